"""Command-line entry point: ``rwre <subcommand> [config.yaml] [--set key=value ...]``.

Exit codes: 0 all checks passed, 2 checker failures (or replay divergence),
1 execution or usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex

log = logging.getLogger("balanced_rwre")

SUBCOMMANDS = {
    "gen-env": "generate an environment file",
    "stationary": "stationary density on a periodized environment",
    "phi": "norm diagnostics of the stationary density across N and seeds",
    "mp": "maximum-principle ratios over a random corpus",
    "mvi": "mean-value-inequality ratios over a random corpus",
    "cutoff": "cutoff-function inequality at contact points",
    "perc": "connectivity decay of the small-ellipticity percolation",
    "mp2": "explicit-constant maximum principle for coarse kernels",
    "mvi2": "mean-value ratios for coarse kernels",
    "clt": "covariance of X_n / sqrt(n)",
    "transience": "per-annulus visits to the origin and Omega_i frequencies",
    "recurrence": "visits to the origin up to fixed horizons",
    "exit": "exit-time means against (r + 1)^2",
    "lemma-e": "E(1 - c/N^2)^tau on periodized environments",
}


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ex.ConfigError(f"--set {item!r}: expected key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = ex.parse_value(v)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwre", description="Random walks in balanced random environments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in SUBCOMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", nargs="?", help="YAML config file (defaults apply to missing keys)")
        s.add_argument("-o", "--out", default=f"runs/{name}", help="output directory")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
        s.add_argument("--workers", type=int, help="worker threads (does not change outputs)")
        s.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    r = sub.add_parser("replay", help="re-execute a run and compare output digests")
    r.add_argument("manifest", help="manifest.json or its run directory")
    r.add_argument("-o", "--out", help="directory for the replayed outputs")
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.add_argument("--workers", type=int)
    return p


def _run(args) -> int:
    raw = ex.load_config(args.config) if args.config else {}
    raw.setdefault("kind", args.command)
    if raw["kind"] != args.command:
        raise ex.ConfigError(f"kind: config is for {raw['kind']!r}, not {args.command!r}")
    for k, v in _overrides(args.set).items():
        ex.apply_override(raw, k, v)
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.print_config:
        print(json.dumps(ex.resolve_config(raw), indent=2, sort_keys=True))
        return 0
    m = ex.run(raw, args.out)
    for name, ok in m["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"outputs in {args.out} ({len(m['outputs'])} files, {m['wall_seconds']:.2f}s)")
    return 0 if m["status"] == "pass" else 2


def _replay(args) -> int:
    over = _overrides(args.set)
    if args.workers is not None:
        over["workers"] = args.workers
    src = Path(args.manifest)
    out = args.out or str((src if src.is_dir() else src.parent).with_name(
        (src if src.is_dir() else src.parent).name + "-replay"))
    rep = ex.replay(args.manifest, out, over)
    for c in rep["config_changes"]:
        print(f"config  {c['field']}: {c['old']!r} -> {c['new']!r}")
    if rep["build_changed"]:
        print("note    package sources differ from the recorded build")
    for d in rep["divergences"]:
        print(f"DIFF    {d['path']}: expected {d['expected']} got {d['actual']}")
    print("identical" if rep["identical"] else f"{len(rep['divergences'])} output(s) diverged")
    return 0 if rep["identical"] else 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _replay(args) if args.command == "replay" else _run(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # reported, not swallowed: exit code 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
