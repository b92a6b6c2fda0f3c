from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from safemeta.cmdp import Policy, TabularCmdp

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_cmdp(rng: np.random.Generator, S: int = 4, A: int = 3, gamma: float | None = None,
                concentration: float = 0.5) -> TabularCmdp:
    return TabularCmdp(
        P=rng.dirichlet(np.full(S, concentration), size=(S, A)),
        r=rng.random((S, A)),
        c=rng.uniform(-1, 1, (S, A)),
        rho=rng.dirichlet(np.ones(S)),
        gamma=rng.uniform(0.5, 0.95) if gamma is None else gamma,
    )


def random_policy(rng: np.random.Generator, S: int, A: int) -> Policy:
    return Policy(rng.dirichlet(np.ones(A), size=S))


def two_action_instance(gamma: float = 0.9) -> TabularCmdp:
    """One state, r = (1, 0), c = (-1, 1)."""
    return TabularCmdp(P=[[[1.0], [1.0]]], r=[[1.0, 0.0]], c=[[-1.0, 1.0]], rho=[1.0], gamma=gamma)


def quiet_train(sampler, config):
    from safemeta.meta_train import train
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return train(sampler, config)


@pytest.fixture(scope="session")
def grid_bundle():
    """Gridworld bundle at the default desk-scale settings (delta = 0.2, structured feasibility)."""
    from safemeta.envs import make_gridworld_sampler
    from safemeta.meta_train import TrainConfig
    return quiet_train(make_gridworld_sampler(), TrainConfig(delta=0.2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 10


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """Record one criterion outcome; the terminal summary lists them all."""
    store = request.config.stash[ACCEPTANCE]

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[n] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash[ACCEPTANCE]
    ran = any("test_acceptance" in str(item) for item in terminalreporter.stats.get("passed", [])
              + terminalreporter.stats.get("failed", []))
    if not store and not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(store.get(n, f"criterion {n:2d}: FAIL  not reached (test errored)"))
