"""Command-line front end: ``quadlaplace {split,run,report}``.

Exit codes: 0 success, 1 partial or data failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from .data import DataFormatError
from .experiment import (ConfigError, ExperimentConfig, collect_report, echo_config, make_splits,
                         run_experiment, write_report)

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            out[key.strip()] = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set {key}: {exc}") from None
    for key in ("outdir", "seed", "workers"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    if getattr(args, "dataset", None):
        out["datasets"] = list(args.dataset)
    return out


def _load_config(args) -> ExperimentConfig:
    ov = _overrides(args)
    if args.config:
        return ExperimentConfig.from_yaml(args.config, ov)
    return ExperimentConfig.from_dict(ov)


def cmd_split(args) -> int:
    cfg = _load_config(args)
    if not cfg.datasets:
        raise ConfigError("no datasets given")
    paths = make_splits(cfg)
    echo_config(cfg)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if not cfg.datasets:
        raise ConfigError("no datasets given")
    echo_config(cfg)
    failures = run_experiment(cfg, log=lambda m: print(m, file=sys.stderr))
    for (ds, sid), err in sorted(failures.items()):
        print(f"FAILED {ds}/{sid}: {err}", file=sys.stderr)
    res = collect_report(cfg.outdir, cfg.methods, cfg.metric_units,
                         datasets=[Path(d).stem for d in cfg.datasets])
    for p in write_report(cfg.outdir, res, figures=not args.no_figures):
        print(p)
    return EXIT_PARTIAL if failures or res.missing else EXIT_OK


def cmd_report(args) -> int:
    methods, units = ("lla", "qla"), "original"
    cfg_path = Path(args.outdir) / "config.effective.yaml"
    if cfg_path.exists():
        cfg = ExperimentConfig.from_yaml(cfg_path)
        methods, units = cfg.methods, cfg.metric_units
    if args.units:
        units = args.units
    res = collect_report(args.outdir, methods, units)
    if not res.report.per_split and not res.missing:
        print(f"no split results under {args.outdir}", file=sys.stderr)
        return EXIT_PARTIAL
    for p in write_report(args.outdir, res, figures=not args.no_figures):
        print(p)
    sys.stdout.write(res.report.to_markdown())
    if res.missing:
        print("missing splits: " + ", ".join(res.missing), file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadlaplace", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="YAML experiment config")
        sp.add_argument("-d", "--dataset", action="append", help="dataset CSV (repeatable; replaces config list)")
        sp.add_argument("-o", "--outdir")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("split", help="write gap-split manifests")
    common(sp)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("run", help="train, fit and evaluate every split")
    common(sp)
    sp.add_argument("-j", "--workers", type=int)
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("report", help="aggregate per-split metrics into tables and figures")
    sp.add_argument("outdir")
    sp.add_argument("--units", choices=("original", "standardized"))
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
