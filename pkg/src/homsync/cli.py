"""Command line entry point: ``homsync run|validate|dip-curve|batch``.

Exit codes: 0 success, 2 bad command line, 3 configuration error,
4 simulation error (no dip, no peak, fit failure, ...), 5 file I/O error,
1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as cfgmod
from .control import NoDipError, RelockRequired
from .metrology import InsufficientDataError
from .photonics import FitDivergedError, GridUnderresolvedError, HomDipModel, dip_curve, jsa_for_dip
from .plant import UsageError
from .scenarios import check_buildable, run
from .sync import FitNotConvergedError, NoPeakError
from .timebase import parse_duration

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_CONFIG, EXIT_SIMULATION, EXIT_IO = 0, 1, 2, 3, 4, 5
SIMULATION_ERRORS = (NoDipError, RelockRequired, NoPeakError, FitNotConvergedError, FitDivergedError,
                     GridUnderresolvedError, InsufficientDataError, UsageError)


def load_checked(path, seed=None) -> cfgmod.RunConfig:
    """Schema and constructor checks; raises ConfigError listing every problem."""
    cfg = cfgmod.load(path)
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise cfgmod.ConfigError([f"--seed {seed} out of range [0, 2^64)"])
        cfg.seed = seed
    problems = check_buildable(cfg)
    if problems:
        raise cfgmod.ConfigError([f"{path}: {p}" for p in problems])
    return cfg


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, cfgmod.ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, SIMULATION_ERRORS):
        return EXIT_SIMULATION
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_OTHER


def _report(exc: BaseException) -> int:
    code = _exit_code(exc)
    if isinstance(exc, cfgmod.ConfigError):
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
    else:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
    return code


def cmd_run(args) -> int:
    cfg = load_checked(args.config, args.seed)
    out = args.out if args.out is not None else cfg.output_dir
    summary = run(cfg, out)
    print(f"{cfg.scenario} seed={cfg.seed} -> {out}")
    for k, v in summary.headline.items():
        print(f"  {k}: {v}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_checked(args.config)
    print(f"{args.config}: ok")
    sys.stdout.write(cfgmod.dump_echo(cfg))
    return EXIT_OK


def _parse_range(text: str) -> tuple[int, int]:
    # split on the last colon that is not a leading sign, so "-15000:15000" works
    lo, sep, hi = text.rpartition(":")
    if not sep or not lo:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    try:
        return parse_duration(lo), parse_duration(hi)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _duration_arg(text: str) -> int:
    try:
        return parse_duration(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _write_curve(path: Path, delays, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delay_fs", "relative_coincidence"])
        for d, v in zip(delays, values):
            w.writerow([d, repr(float(v))])


def cmd_dip_curve(args) -> int:
    lo, hi = args.range
    if hi < lo or args.step <= 0:
        print("config error: --range must be LO:HI with LO <= HI and --step > 0", file=sys.stderr)
        return EXIT_CONFIG
    if not 0 <= args.v <= 1 or args.tc <= 0:
        print("config error: --v must lie in [0, 1] and --tc must be positive", file=sys.stderr)
        return EXIT_CONFIG
    delays = list(range(lo, hi + 1, args.step))
    model = HomDipModel(args.v, args.tc)
    jsa = jsa_for_dip(args.v, args.tc)
    delays, env, quad = dip_curve(model, delays, jsa)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_curve(out / "dip_envelope.csv", delays, env)
    _write_curve(out / "dip_quadrature.csv", delays, quad)
    worst = max(abs(a - b) for a, b in zip(env, quad))
    print(f"{len(delays)} delays -> {out}; max |quadrature - envelope| = {worst:.3g}")
    return EXIT_OK


def _batch_one(path: str, out_root: str) -> tuple[str, int, str]:
    try:
        cfg = load_checked(path)
        run(cfg, Path(out_root) / Path(path).stem)
        return path, EXIT_OK, ""
    except Exception as exc:  # reported per job; the batch keeps going
        detail = "; ".join(exc.problems) if isinstance(exc, cfgmod.ConfigError) else f"{type(exc).__name__}: {exc}"
        return path, _exit_code(exc), detail


def cmd_batch(args) -> int:
    paths = sorted(str(p) for p in Path(args.configs).glob("*.y*ml"))
    if not paths:
        print(f"config error: no *.yaml files in {args.configs}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs == 1:
        results = [_batch_one(p, args.out) for p in paths]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_batch_one, paths, [args.out] * len(paths)))
    worst = EXIT_OK
    for path, code, detail in results:
        print(f"{'ok' if code == EXIT_OK else 'FAILED'} {path}" + (f" ({detail})" if detail else ""))
        worst = max(worst, code)
    return worst


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homsync", description="HOM-stabilised two-way clock synchronisation simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory (default: output_dir from the config)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check a config and print every resolved parameter")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)

    d = sub.add_parser("dip-curve", help="write the closed-form and quadrature HOM dip curves")
    d.add_argument("--v", type=float, required=True, help="visibility")
    d.add_argument("--tc", type=_duration_arg, required=True, help="coherence time (fs, or e.g. '3 ps')")
    d.add_argument("--range", type=_parse_range, required=True, help="LO:HI delays in fs")
    d.add_argument("--step", type=_duration_arg, required=True, help="delay step in fs")
    d.add_argument("--out", default=".", help="output directory")
    d.set_defaults(func=cmd_dip_curve)

    b = sub.add_parser("batch", help="run every *.yaml config in a directory")
    b.add_argument("--configs", required=True)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--out", default="batch_out", help="root directory; each run goes to OUT/<config stem>")
    b.set_defaults(func=cmd_batch)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        return _report(exc)


if __name__ == "__main__":
    sys.exit(main())
