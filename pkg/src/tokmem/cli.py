"""Command line: ``tokmem run|validate|report|pretrain``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError as PydanticValidationError

from .errors import TokMemError
from .experiments import load_config, report, run_experiment


def _field_errors(exc: PydanticValidationError) -> str:
    return "\n".join(
        f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()
    )


def _load(path: str):
    try:
        return load_config(path), None
    except FileNotFoundError:
        return None, f"cannot read config {path!r}"
    except json.JSONDecodeError as exc:
        return None, f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}"
    except PydanticValidationError as exc:
        return None, f"{path}: invalid config\n{_field_errors(exc)}"


def cmd_validate(args) -> int:
    cfg, err = _load(args.config)
    if err:
        print(err, file=sys.stderr)
        return 2
    print(f"ok: {cfg.kind} (seed {cfg.seed})")
    return 0


def cmd_run(args) -> int:
    cfg, err = _load(args.config)
    if err:
        print(err, file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.name}-{cfg.kind}-s{seed}"
    try:
        run_experiment(cfg, out, args.seed)
    except TokMemError as exc:
        print(f"run failed: {type(exc).__name__}: {exc} (see {out / 'error.json'})", file=sys.stderr)
        return 1
    print(report(out))
    print(f"artifacts in {out}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.dir)
    if not (path / "metrics.json").exists():
        print(f"{path} has no metrics.json", file=sys.stderr)
        return 2
    print(report(path), end="")
    return 0


def cmd_pretrain(args) -> int:
    from .pretrain import PretrainConfig, pretrained_backbone

    cfg = PretrainConfig(steps=args.steps, seed=args.seed)
    pretrained_backbone(cfg, Path(args.cache_dir) if args.cache_dir else None)
    print(f"backbone {cfg.key()} ready")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokmem", description="Tokenized procedural memory experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)

    rep = sub.add_parser("report", help="print summary tables for a run directory")
    rep.add_argument("dir")
    rep.set_defaults(func=cmd_report)

    pre = sub.add_parser("pretrain", help="build (or reuse) the cached stand-in backbone")
    pre.add_argument("--steps", type=int, default=20000)
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--cache-dir")
    pre.set_defaults(func=cmd_pretrain)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
