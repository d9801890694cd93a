"""``eplab <experiment> --seed N --out DIR [--set key=value ...]``

Exit status: 0 when every check passes, 2 when a check fails, 1 on a
runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from importlib import metadata
from pathlib import Path

from .experiments import EXPERIMENTS, write_json


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _coerce(raw: str, default):
    """Parse ``raw`` as JSON when possible, then check it against the default's type."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"expected true/false, got {raw!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"expected a number, got {raw!r}")
        value = float(value)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"expected an integer, got {raw!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ValueError(f"expected a JSON list, got {raw!r}")
    elif isinstance(default, str):
        value = str(value)
    return value


def resolve_config(experiment: str, overrides: list[str]) -> dict:
    defaults = EXPERIMENTS[experiment][1]
    cfg = dict(defaults)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form key=value")
        if key not in defaults:
            raise KeyError(f"unknown key {key!r} for {experiment}; known: {', '.join(sorted(defaults))}")
        cfg[key] = _coerce(raw, defaults[key])
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eplab", description="EP / aEP / Newton numerical experiments")
    p.add_argument("experiment", choices=sorted(EXPERIMENTS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory (created if missing)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry; repeatable")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.experiment, args.overrides)
    except (KeyError, ValueError) as exc:
        parser.error(str(exc.args[0]) if exc.args else str(exc))
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        fn = EXPERIMENTS[args.experiment][0]
        outcome = fn(cfg, args.seed, args.out)
    except Exception:
        traceback.print_exc()
        return 1
    write_json(args.out / "manifest.json", {
        "experiment": args.experiment,
        "seed": args.seed,
        "config": cfg,
        "version": _version(),
        "files": sorted(p.name for p in outcome.files),
        "checks": outcome.checks,
        "summary": outcome.summary,
    })
    for name, ok in sorted(outcome.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return 0 if outcome.ok else 2


if __name__ == "__main__":
    sys.exit(main())
