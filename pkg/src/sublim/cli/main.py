"""Command-line entry point: ``sublim {run,sweep,chi,emit}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (divergence, undefined ratio or chi).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from ..data import DATA_ROOT_ENV
from ..errors import ConfigError, DataError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
PROFILES = ("desk", "paper")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("sublim")


def profile_dir(profile: str) -> Path:
    return Path(__file__).resolve().parent.parent / "configs" / profile


def resolve_config_path(name: str, profile: str) -> Path:
    """A filesystem path, or the name of a shipped config in ``profile``."""
    path = Path(name)
    if path.is_file():
        return path
    shipped = profile_dir(profile) / (name if name.endswith(".toml") else name + ".toml")
    if shipped.is_file():
        return shipped
    have = sorted(p.stem for p in profile_dir(profile).glob("*.toml"))
    raise ConfigError(f"no config file {name!r} and no shipped {profile!r} config of that name "
                      f"(shipped: {', '.join(have)})")


def parse_seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--seed: expected comma-separated unsigned integers, got {text!r}") from None
    if not seeds or any(s < 0 or s >= 2**64 for s in seeds):
        raise ConfigError(f"--seed: expected comma-separated unsigned 64-bit integers, got {text!r}")
    return seeds


def parse_values(text: str) -> list:
    """Comma-separated TOML values: ``1e-3,3e-3``, ``2,4,6``, ``[784,4,20],[784,8,20]``.

    Bare words that are not valid TOML (``fixed,per_epoch``) are taken as strings.
    """
    from .config import tomllib

    try:
        out = tomllib.loads(f"v = [{text}]")["v"]
    except tomllib.TOMLDecodeError:
        out = [item.strip() for item in text.split(",") if item.strip()]
    if not out:
        raise ConfigError("--values: no values given")
    return out


def _load_config(args):
    from .config import ExperimentConfig

    cfg = ExperimentConfig.load(resolve_config_path(args.config, args.profile))
    overrides = {}
    if args.seed:
        overrides["experiment.seeds"] = parse_seeds(args.seed)
    if args.out:
        overrides["experiment.out_dir"] = args.out
    return cfg.replace(**overrides) if overrides else cfg


def cmd_run(args) -> int:
    from .runner import run_experiment

    cfg = _load_config(args)
    res = run_experiment(cfg, cfg.experiment.out_dir)
    _print_aggregate(res.aggregate)
    print(f"wrote {res.out_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .runner import run_sweep

    cfg = _load_config(args)
    rows = run_sweep(cfg, args.axis, parse_values(args.values), cfg.experiment.out_dir)
    for row in rows:
        print(f"{row['axis']}={row['value']!r}: teacher {_num(row['teacher_metric_mean'])} "
              f"student {_num(row['student_metric_mean'])} transmission {_num(row['transmission_mean'])}")
    print(f"wrote {Path(cfg.experiment.out_dir) / 'sweep.csv'}")
    return EXIT_OK


def cmd_chi(args) -> int:
    from .runner import resolve_cache, run_seed, DataBank

    cfg = _load_config(args)
    if cfg.experiment.protocol == "task":
        cfg = cfg.replace(**{"diagnostics.chi": True, "diagnostics.sampled_chi": True})
    else:
        cfg = cfg.replace(**{"diagnostics.chi_aux": True})
    out = Path(cfg.experiment.out_dir)
    cache, bank = resolve_cache(cfg, out), DataBank(cfg.data.root or None)
    for seed in cfg.experiment.seeds:
        rec = run_seed(cfg, seed, cache, bank)
        doc = {"seed": seed, "config_hash": rec.config_hash, "checkpoints": rec.checkpoints,
               "reports": {}}
        for name, rep in rec.chi_reports.items():
            doc["reports"][name] = dict(rep, delta_theta_pub=rec.vectors[name].tolist())
            print(f"seed {seed} {name}: chi {_num(rep['chi'])} norm visibility "
                  f"{_num(rep['norm_visibility'])} (CG {rep['cg_iters']} iters, "
                  f"residual {rep['cg_residual']:.2e}, converged {rep['converged']})")
        for name, why in rec.notes.items():
            print(f"seed {seed} note [{name}]: {why}")
        path = out / f"chi-seed-{seed}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_emit(args) -> int:
    from .runner import emit_figure_data

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    labels = [s.strip() for s in args.labels.split(",")] if args.labels else None
    rows = emit_figure_data(args.runs, metrics=metrics, panel=args.figure, axis=args.axis,
                            labels=labels, path=args.out)
    for row in rows:
        print(f"{row['value']:>20s} {row['metric']:>14s} mean {_num(row['mean'])} "
              f"sem {_num(row['sem'])} n {row['n']}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _num(v):
    return "n/a" if v is None else f"{v:.4f}"


def _print_aggregate(agg):
    for name, a in agg.items():
        print(f"{name:>26s}  mean {_num(a['mean'])}  sem {_num(a['sem'])}  n {a['n']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sublim", description="Run subliminal-learning experiments from TOML configs.",
                                epilog=f"Datasets are read from ${DATA_ROOT_ENV}/{{mnist,fashion}}/ "
                                       f"unless [data] root is set in the config.")
    p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP threads")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", required=True,
                            help="TOML path, or the name of a shipped config in --profile")
            sp.add_argument("--seed", help="comma-separated seeds overriding experiment.seeds")
            sp.add_argument("--profile", choices=PROFILES, default="desk",
                            help="where shipped config names are looked up")
        sp.add_argument("--out", help="output directory (or CSV path for emit)")
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS/OpenMP threads")

    sp = sub.add_parser("run", help="train all stages for every seed and write records")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run one experiment per value of a config field")
    common(sp)
    sp.add_argument("--axis", required=True, help="section.field, e.g. training.teacher_lr")
    sp.add_argument("--values", required=True, help="comma-separated TOML values")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("chi", help="compute chi reports (with reconstructed drift vectors)")
    common(sp)
    sp.set_defaults(func=cmd_chi)

    sp = sub.add_parser("emit", help="tidy figure CSV from finished experiment directories")
    common(sp, needs_config=False)
    sp.add_argument("runs", nargs="+", help="experiment output directories, one per point")
    sp.add_argument("--figure", default="figure", help="panel name written to the CSV")
    sp.add_argument("--axis", default="model", help="axis name written to the CSV")
    sp.add_argument("--metrics", default="chi,transmission")
    sp.add_argument("--labels", help="comma-separated point labels (default: experiment names)")
    sp.set_defaults(func=cmd_emit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "emit" and not args.out:
        parser.error("emit needs --out <file.csv>")
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be positive")
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
        _limit_threads(args.threads)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _limit_threads(n):
    # numpy is already loaded by now, so environment variables alone may be too late
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


if __name__ == "__main__":
    sys.exit(main())
