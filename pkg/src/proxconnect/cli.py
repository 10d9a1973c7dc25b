"""Command line entry point: train, analyze, report-mem, sweep, gap-audit.

Exit codes: 0 success, 2 configuration error, 3 divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import quantizers as qz
from .decomposition import analyze_pair, write_curve_csv
from .errors import ConfigError, DivergenceError, FormatError
from .harness import ExperimentConfig, run_experiment
from .optim import Schedule, TrainerState, gap_audit, dump_trajectory, load_trajectory, pcpp_step, record_run
from .packing import format_memory_table, memory_report, read_bqw

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

# scalar maps that a pair file may reference by name
MAPS = {
    "identity": lambda w, mu: qz.identity(w),
    "sign": lambda w, mu: qz.sign_q(w),
    "hard_tanh": lambda w, mu: qz.hard_tanh(w),
    "ones": lambda w, mu: np.ones_like(np.asarray(w, dtype=np.float64)),
    "indicator": lambda w, mu: (np.abs(np.asarray(w, dtype=np.float64)) <= 1.0).astype(np.float64),
    "ss": qz.ss_forward,
    "ss_grad": qz.ss_backward,
    "poly": qz.poly_forward,
    "poly_grad": qz.poly_backward,
    "tanh": qz.ede_forward,
    "tanh_grad": qz.ede_backward,
}
PROX = {
    "identity": lambda p: qz.ProximalQuantizer("identity"),
    "sign": lambda p: qz.ProximalQuantizer("sign"),
    "linear": lambda p: qz.ProximalQuantizer("linear", p.get("rho", 0.0), p.get("varrho", 0.0)),
    "bnn": lambda p: qz.ProximalQuantizer("bnn", mu=p.get("prox_mu", 2.0)),
}


def _load_mapping(path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        return json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def config_from_args(args) -> ExperimentConfig:
    data = _load_mapping(args.config) if getattr(args, "config", None) else {}
    cfg = ExperimentConfig.from_mapping(data)
    for flag in ("algorithm", "task_mode", "seed", "epochs", "out", "pair", "dataset", "data_dir"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    return cfg.validate()


def pair_from_file(path) -> qz.QuantizerPair:
    """TOML/JSON pair description: forward, backward (map names), mu, optional prox."""
    spec = _load_mapping(path)
    try:
        fwd, bwd = MAPS[spec["forward"]], MAPS[spec["backward"]]
    except KeyError as exc:
        raise ConfigError(f"pair file {path}: unknown or missing map {exc}; known {sorted(MAPS)}") from exc
    pair = qz.QuantizerPair(spec.get("name", Path(path).stem), fwd, bwd, mu=float(spec.get("mu", 1.0)))
    if "prox" in spec:
        if spec["prox"] not in PROX:
            raise ConfigError(f"unknown prox {spec['prox']!r}; known {sorted(PROX)}")
        pair = qz.compose_with_prox(pair, PROX[spec["prox"]](spec))
    return pair


# ---------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    cfg = config_from_args(args)
    summary = run_experiment(cfg)
    final = summary["final"]
    print(f"{cfg.algorithm} {cfg.task_mode}: test_acc={final['test_acc']:.4f} "
          f"frac_binary={final['frac_binary']:.3f} -> {cfg.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.pair_file:
        pair = pair_from_file(args.pair_file)
    else:
        pair = qz.get_pair(args.pair)
    if args.mu is not None:
        pair = pair.at(args.mu)
    verdict = analyze_pair(pair, args.lo, args.hi, args.points, args.tol)
    line = f"{pair.name}: {verdict.status}"
    if not verdict.admits:
        line += f" ({verdict.reason}: {verdict.detail})"
    print(line)
    if verdict.curve.free is not None and verdict.curve.free.any():
        print(f"  0/0 region completed on {int(verdict.curve.free.sum())} grid points")
    csv_path = Path(args.out or f"{pair.name.replace('+', 'p')}_P.csv")
    write_curve_csv(verdict.curve, csv_path)
    print(f"  P curve -> {csv_path}")
    return EXIT_OK


def cmd_report_mem(args) -> int:
    rows, total_fp, total_file = memory_report(read_bqw(args.model))
    print(format_memory_table(rows, total_fp, total_file))
    return EXIT_OK


def _sweep_one(cfg_dict: dict) -> tuple[str, int, str]:
    cfg = ExperimentConfig.from_mapping(cfg_dict)
    try:
        summary = run_experiment(cfg.validate())
        return cfg.out, EXIT_OK, f"test_acc={summary['final']['test_acc']:.4f}"
    except DivergenceError as exc:
        return cfg.out, EXIT_DIVERGED, str(exc)
    except ConfigError as exc:
        return cfg.out, EXIT_CONFIG, str(exc)


def cmd_sweep(args) -> int:
    """Runs every [[run]] table of the sweep file on top of its [base] table."""
    data = _load_mapping(args.config)
    base = data.get("base", {})
    runs = data.get("run", [])
    if not runs:
        raise ConfigError("sweep file has no [[run]] entries")
    configs = []
    for i, run in enumerate(runs):
        merged = {**base, **run}
        if "out" not in run:  # base.out names the sweep root, not a run directory
            merged["out"] = str(Path(base.get("out", "runs/sweep")) / f"run{i:03d}")
        cfg = ExperimentConfig.from_mapping(merged).validate()  # fail before any compute
        configs.append(cfg.to_dict())
    with ProcessPoolExecutor(max_workers=args.workers) as pool:
        results = list(pool.map(_sweep_one, configs))
    worst = EXIT_OK
    for out, code, msg in results:
        print(f"{out}: {'ok' if code == EXIT_OK else 'FAILED'} {msg}")
        worst = max(worst, code)
    return worst


def _quadratic_demo(args):
    rng = np.random.default_rng(args.seed)
    d = args.dim
    M = rng.standard_normal((d, d))
    A = M @ M.T / d + 0.1 * np.eye(d)
    b = rng.standard_normal(d)
    state = TrainerState.create(rng.standard_normal(d), Schedule(T=args.steps, eta0=args.eta))
    traj = record_run(state, lambda s: pcpp_step(s, qz.fp_pair(), lambda ws: [A @ ws[0] - b], record=True),
                      args.steps)
    w_ref = np.linalg.solve(A, b)
    if args.dump:
        dump_trajectory(traj, args.dump, meta={"w_ref": w_ref.tolist(),
                                               "objective": {"A": A.tolist(), "b": b.tolist()}})
    return traj, w_ref, (lambda w: 0.5 * w @ A @ w - b @ w)


def cmd_gap_audit(args) -> int:
    if args.trajectory:
        traj, side = load_trajectory(args.trajectory)
        if "w_ref" not in side:
            raise ConfigError("trajectory sidecar has no w_ref")
        w_ref = np.asarray(side["w_ref"])
        f = None
        if "objective" in side:
            A, b = np.asarray(side["objective"]["A"]), np.asarray(side["objective"]["b"])
            f = lambda w: 0.5 * w @ A @ w - b @ w  # noqa: E731
    else:
        traj, w_ref, f = _quadratic_demo(args)
    n = len(traj)
    if n < 2:
        raise ConfigError("gap audit needs at least two recorded steps")
    rng = np.random.default_rng(args.seed)
    worst = np.inf
    print(f"{'s':>6}{'t':>6}{'lhs':>16}{'rhs':>16}{'slack':>14}")
    for _ in range(args.windows):
        s, t = sorted(int(v) for v in rng.integers(1, n, size=2))
        res = gap_audit(traj, w_ref, args.r, s, t, f=f)
        worst = min(worst, res.slack)
        print(f"{s:>6}{t:>6}{res.lhs:>16.6g}{res.rhs:>16.6g}{res.slack:>14.3e}")
    full = gap_audit(traj, w_ref, args.r, 1, n - 1, f=f)
    print(f"worst window slack {worst:.3e}")
    if full.convex:
        print(f"averaged-iterate bound slack {full.convex['slack_avg']:.3e}; "
              f"min-iterate bound slack {full.convex['slack_min']:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxconnect", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment")
    p.add_argument("--config", help="TOML or JSON experiment config")
    p.add_argument("--algorithm")
    p.add_argument("--task-mode", dest="task_mode", choices=("BW", "BWA", "BWAA"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.add_argument("--pair", help="override the algorithm's quantizer pair")
    p.add_argument("--dataset")
    p.add_argument("--data-dir", dest="data_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="decomposition verdict for a quantizer pair")
    p.add_argument("pair", nargs="?", help=f"one of {', '.join(qz.PAIR_NAMES)}")
    p.add_argument("--pair-file", help="TOML/JSON pair description")
    p.add_argument("--mu", type=float)
    p.add_argument("--lo", type=float, default=-3.0)
    p.add_argument("--hi", type=float, default=3.0)
    p.add_argument("--points", type=int, default=10001)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", help="CSV path for the P curve")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report-mem", help="memory table for a packed model")
    p.add_argument("model")
    p.set_defaults(func=cmd_report_mem)

    p = sub.add_parser("sweep", help="run [[run]] configs in a worker pool")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=2)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gap-audit", help="Bregman window bound on a recorded trajectory")
    p.add_argument("--trajectory", help="trajectory file (JSON sidecar alongside)")
    p.add_argument("--r", choices=("zero", "indicator"), default="zero")
    p.add_argument("--windows", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=10, help="quadratic demo dimension")
    p.add_argument("--steps", type=int, default=500, help="quadratic demo steps")
    p.add_argument("--eta", type=float, default=0.05, help="quadratic demo step size")
    p.add_argument("--dump", help="write the demo trajectory here")
    p.set_defaults(func=cmd_gap_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "analyze" and not (args.pair or args.pair_file):
        print("error: analyze needs a pair name or --pair-file", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
