"""Command-line front end: train, test, eval, cover.

Exit codes: 0 success, 1 usage error, 2 oracle or feasibility failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adaptation import RolloutTask, TestConfig, run_static, run_test, run_test_pce
from .cmdp import dump_json, exact_policy_values, load_json
from .envs import NOISE_MAX, NoiseDistribution, build_gridworld, load_layout, make_gridworld_sampler, to_raw_units
from .meta_train import (
    TrainConfig,
    TrainingBundle,
    TrainingError,
    estimate_covering_numbers,
    rounds_of,
    train,
)
from .planner import FeasibilityOracleError, InfeasibleCmdp, oracle_optimal
from .tasks import FiniteSampler

log = logging.getLogger("safemeta")

DEFAULTS = {
    "eps": 0.05,
    "delta": 0.2,
    "xi": 0.05,
    "k": 500,
    "seeds": list(range(10)),
    "noise_interpretation": "variance",
    "layout": None,
    "workers": 1,
    "eps_grid": [0.02, 0.05, 0.1],
    "n_samples": [500],
}
ALGORITHMS = ("ours", "pce_baseline", "static_safe")
RESULT_COLUMNS = ("seed", "noise", "k", "algorithm", "regret_r", "regret_c", "safety_violation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed_list(text: str) -> list[int]:
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, _, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if hi else [int(lo)])
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with default values for any flag")
    common.add_argument("--seed", type=_seed_list, dest="seeds", help="seed list, e.g. 0-9 or 1,4,7")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--layout", type=Path, help="gridworld layout JSON")
    common.add_argument("--noise-interpretation", choices=("variance", "stddev"),
                        help="how the 0.03 spread of the noise distribution is read")
    common.add_argument("--k", type=int, help="test episodes per run")
    common.add_argument("--eps", type=float)
    common.add_argument("--delta", type=float)
    common.add_argument("--xi", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="safemeta", description="Safe meta-RL on tabular constrained MDPs")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="build the policy-value bundle")
    t.add_argument("--point-mass", type=float, metavar="NOISE",
                   help="train on a single gridworld noise level instead of the distribution")
    t.add_argument("--feasibility", choices=("auto", "structured", "generic"), default="auto")

    s = sub.add_parser("test", parents=[common], help="run all arms on sampled test tasks")
    s.add_argument("--bundle", type=Path, help="training bundle (default OUT/bundle.json)")
    s.add_argument("--workers", type=int)
    s.add_argument("--horizon", type=int, help="rollout length H (default from eps and gamma)")

    e = sub.add_parser("eval", parents=[common], help="exact diagnostics of a bundle on one task")
    e.add_argument("--bundle", type=Path)
    e.add_argument("--noise", type=float, required=True)

    c = sub.add_parser("cover", parents=[common], help="covering-number estimates over an eps grid")
    c.add_argument("--eps-grid", type=_float_list)
    c.add_argument("--n-samples", type=_int_list, help="one or more sample counts")
    return p


@dataclass
class RunConfig:
    command: str
    out: Path
    seeds: list[int]
    k: int
    eps: float
    delta: float
    xi: float
    noise_interpretation: str
    layout: Path | None
    workers: int
    eps_grid: list[float]
    n_samples: list[int]
    extra: dict

    def header(self) -> dict:
        return {"command": self.command, "seeds": self.seeds, "k": self.k, "eps": self.eps,
                "delta": self.delta, "xi": self.xi, "noise_interpretation": self.noise_interpretation,
                "layout": str(self.layout) if self.layout else "default"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    merged = dict(DEFAULTS)
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file {args.config} does not exist")
        file_cfg = load_json(args.config)
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    if merged["layout"] is not None:
        merged["layout"] = Path(merged["layout"])
        if not merged["layout"].exists():
            raise UsageError(f"layout file {merged['layout']} does not exist")
    if not merged["seeds"]:
        raise UsageError("seed list is empty")
    if merged["k"] < 1:
        raise UsageError("--k must be positive")
    extra = {k: v for k, v in vars(args).items() if k not in DEFAULTS and k not in ("config", "out", "command")}
    return RunConfig(args.command, args.out, list(merged["seeds"]), int(merged["k"]), float(merged["eps"]),
                     float(merged["delta"]), float(merged["xi"]), merged["noise_interpretation"],
                     merged["layout"], int(merged["workers"]), list(merged["eps_grid"]),
                     list(merged["n_samples"]), extra)


def _sampler(cfg: RunConfig):
    layout = load_layout(cfg.layout)
    return make_gridworld_sampler(NoiseDistribution(interpretation=cfg.noise_interpretation), layout=layout)


def _bundle_path(cfg: RunConfig) -> Path:
    path = cfg.extra.get("bundle") or cfg.out / "bundle.json"
    if not Path(path).exists():
        raise UsageError(f"training bundle {path} does not exist; run 'train' first")
    return Path(path)


# ---------------------------------------------------------------- train

def cmd_train(cfg: RunConfig) -> int:
    sampler = _sampler(cfg)
    point = cfg.extra.get("point_mass")
    if point is not None:
        if not 0 <= point <= NOISE_MAX:
            raise UsageError(f"--point-mass must lie in [0, {NOISE_MAX}]")
        sampler = FiniteSampler([build_gridworld(point, sampler.layout)])
    tc = TrainConfig(eps=cfg.eps, delta=cfg.delta, xi=cfg.xi, rng_seed=cfg.seeds[0],
                     feasibility=cfg.extra.get("feasibility", "auto"))
    bundle = train(sampler, tc)
    bundle.config["run"] = cfg.header()
    cfg.out.mkdir(parents=True, exist_ok=True)
    bundle.save(cfg.out / "bundle.json")
    rounds = rounds_of(bundle)
    print(f"|U| = {len(bundle.tuples)}  rounds = {len(rounds)}  "
          f"final statistic = {rounds[-1]['statistic']:.4f}  (N = {rounds[-1]['n']})")
    print(f"bundle written to {cfg.out / 'bundle.json'}")
    return 0


# ---------------------------------------------------------------- test

def seed_task_noise(seed: int, dist: NoiseDistribution) -> float:
    """Noise level of the test task for ``seed``; independent of the training stream."""
    return dist.sample(np.random.default_rng(np.random.SeedSequence([seed, 1])))


def run_seed(seed: int, bundle_dict: dict, cfg_header: dict, layout_path, horizon) -> dict:
    """All three arms on the test task of one seed; pure function of its inputs."""
    bundle = TrainingBundle.from_dict(bundle_dict)
    layout = load_layout(layout_path)
    dist = NoiseDistribution(interpretation=cfg_header["noise_interpretation"])
    noise = seed_task_noise(seed, dist)
    M = build_gridworld(noise, layout)
    task = RolloutTask(M, noise)
    v_star = oracle_optimal(M).values[0].v_reward
    tc = TestConfig(K=cfg_header["k"], eps=cfg_header["eps"], delta=cfg_header["delta"],
                    gamma=M.gamma, H=horizon, rng_seed=seed)
    out, timing = {}, {}
    for name in ALGORITHMS:
        t0 = time.perf_counter()
        if name == "ours":
            rep = run_test(task, bundle.pi_s, bundle.tuples, tc, v_star)
        elif name == "pce_baseline":
            rep = run_test_pce(task, bundle.tuples, tc, v_star)
        else:
            rep = run_static(task, bundle.pi_s, tc, v_star)
        timing[name] = time.perf_counter() - t0
        out[name] = rep.to_dict()
    return {"seed": seed, "noise": noise, "v_star": v_star, "reports": out, "timing": timing}


def result_rows(results: list[dict]) -> list[dict]:
    rows = []
    for res in sorted(results, key=lambda r: r["seed"]):
        for name in ALGORITHMS:
            for ep in res["reports"][name]["episodes"]:
                rows.append({"seed": res["seed"], "noise": res["noise"], "k": ep["k"], "algorithm": name,
                             "regret_r": ep["regret_r"], "regret_c": ep["regret_c"],
                             "safety_violation": int(ep["true_Vc"] < -1e-9)})
    return rows


def summarize(results: list[dict], header: dict) -> dict:
    summary = {"config": header, "algorithms": {}}
    for name in ALGORITHMS:
        fr = np.array([r["reports"][name]["final_regret_reward"] for r in results])
        fc = np.array([r["reports"][name]["final_regret_constraint"] for r in results])
        viol = [r["reports"][name]["safety_violations"] for r in results]
        summary["algorithms"][name] = {
            "final_regret_reward_mean": float(fr.mean()), "final_regret_reward_std": float(fr.std()),
            "final_regret_constraint_mean": float(fc.mean()), "final_regret_constraint_std": float(fc.std()),
            "safety_violations_total": int(sum(viol)),
        }
    summary["runs"] = [{"seed": r["seed"], "noise": r["noise"], "v_star": r["v_star"],
                        **{f"{n}_flags": r["reports"][n]["flags"] for n in ALGORITHMS}}
                       for r in sorted(results, key=lambda r: r["seed"])]
    return summary


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_test(cfg: RunConfig) -> int:
    bundle_path = _bundle_path(cfg)
    bundle_dict = load_json(bundle_path)
    header = cfg.header()
    # record the bundle by name and content hash so outputs do not depend on where runs live
    header["bundle"] = bundle_path.name
    header["bundle_sha256"] = hashlib.sha256(bundle_path.read_bytes()).hexdigest()
    horizon = cfg.extra.get("horizon")
    args = [(s, bundle_dict, header, cfg.layout, horizon) for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run_seed, *zip(*args)))
    else:
        results = [run_seed(*a) for a in args]
    results.sort(key=lambda r: r["seed"])

    cfg.out.mkdir(parents=True, exist_ok=True)
    per_run = cfg.out / "per_run"
    per_run.mkdir(exist_ok=True)
    from .adaptation import CSV_COLUMNS
    for res in results:
        for name in ALGORITHMS:
            _write_csv(per_run / f"seed{res['seed']}_{name}.csv", CSV_COLUMNS,
                       res["reports"][name]["episodes"])
    _write_csv(cfg.out / "results.csv", RESULT_COLUMNS, result_rows(results))
    summary = summarize(results, header)
    dump_json(summary, cfg.out / "summary.json")
    dump_json({"wall_time_s": {str(r["seed"]): r["timing"] for r in results}}, cfg.out / "timing.json")

    for name, agg in summary["algorithms"].items():
        print(f"{name:13s} regret_r {agg['final_regret_reward_mean']:9.3f} +- {agg['final_regret_reward_std']:8.3f}"
              f"   regret_c {agg['final_regret_constraint_mean']:8.3f}"
              f"   violations {agg['safety_violations_total']}")
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval(cfg: RunConfig) -> int:
    noise = cfg.extra["noise"]
    if not 0 <= noise <= NOISE_MAX:
        raise UsageError(f"--noise must lie in [0, {NOISE_MAX}]")
    bundle = TrainingBundle.load(_bundle_path(cfg))
    layout = load_layout(cfg.layout)
    M = build_gridworld(noise, layout)
    opt = oracle_optimal(M).values[0]
    xi = bundle.config.get("xi", cfg.xi)
    print(f"task noise {noise}: LP optimum V_r = {opt.v_reward:.6f}, V_c = {opt.v_constraint:.6f}")
    try:
        opt_xi = oracle_optimal(M, threshold=xi).values[0]
        print(f"  LP optimum at margin xi={xi}: V_r = {opt_xi.v_reward:.6f}, V_c = {opt_xi.v_constraint:.6f}")
    except InfeasibleCmdp:
        print(f"  no policy reaches margin xi={xi} on this task")
    vs = exact_policy_values(M, bundle.pi_s)
    raw = to_raw_units(vs, layout)
    print(f"pi_s:      V_r = {vs.v_reward:.6f}  V_c = {vs.v_constraint:.6f}  "
          f"(raw reward {raw[0]:.4f}, raw cost {raw[1]:.4f})")
    for i, tp in enumerate(bundle.tuples):
        v = exact_policy_values(M, tp.policy)
        print(f"tuple {i:3d} (task {tp.task_meta.get('task_index')}): V_r = {v.v_reward:.6f}  V_c = {v.v_constraint:.6f}"
              f"  predicted u = {tp.u:.6f}  v = {tp.v:.6f}")
    best = max(tp.u for tp in bundle.tuples)
    first = min(i for i, tp in enumerate(bundle.tuples) if tp.u == best)
    print(f"first candidate selected at test time: tuple {first}")
    return 0


# ---------------------------------------------------------------- cover

def cmd_cover(cfg: RunConfig) -> int:
    sampler = _sampler(cfg)
    rows = []
    for n in cfg.n_samples:
        est = estimate_covering_numbers(sampler, cfg.eps_grid, cfg.delta, n, cfg.seeds[0])
        for e, c in zip(cfg.eps_grid, est):
            rows.append({"eps": e, "delta": cfg.delta, "n_samples": n, "estimate": c})
            print(f"eps {e:<8g} delta {cfg.delta:<6g} n {n:<7d} estimate {c}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.out / "cover.csv", ("eps", "delta", "n_samples", "estimate"), rows)
    return 0


COMMANDS = {"train": cmd_train, "test": cmd_test, "eval": cmd_eval, "cover": cmd_cover}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"safemeta: error: {exc}", file=sys.stderr)
        return 1
    except (FeasibilityOracleError, InfeasibleCmdp, TrainingError) as exc:
        print(f"safemeta: oracle failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
