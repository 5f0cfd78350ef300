"""Command-line entry point: ``colsync`` / ``python -m colsync``.

Every config-file field can be overridden by the flag of the same name.
Exit codes: 0 success, 2 configuration error, 3 singular R, 4 integrator failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .exceptions import ConfigError
from .experiment import (
    EXIT_CONFIG,
    GENERATORS,
    INITS,
    MODES,
    ExperimentConfig,
    graph_spec_from_arg,
    load_config,
    run,
)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="colsync",
        description="Simulate QR-based column synchronization of rotation matrices.",
    )
    p.add_argument("--config", help="TOML config file; flags override its values")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--n", type=int, help="number of agents")
    p.add_argument("--d", type=int, help="dimension of the rotations")
    p.add_argument("--k", type=int, help="number of synchronized columns")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-seeds", type=int, dest="num_seeds")
    p.add_argument("--init", choices=INITS)
    p.add_argument("--init-file", dest="init_file")
    p.add_argument("--graph", help=f"graph file or generator ({', '.join(GENERATORS)})")
    p.add_argument("--t-final", type=float, dest="t_final")
    p.add_argument("--rel-tol", type=float, dest="rel_tol")
    p.add_argument("--abs-tol", type=float, dest="abs_tol")
    p.add_argument("--record-stride", type=int, dest="record_stride")
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--workers", type=int, help="Monte Carlo worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


_TOP = ("mode", "n", "d", "k", "seed", "num_seeds", "init", "init_file", "output_dir", "workers")
_INTEG = ("t_final", "rel_tol", "abs_tol", "record_stride")


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = load_config(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    for name in _TOP:
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    for name in _INTEG:
        value = getattr(args, name)
        if value is not None:
            base["integrator"][name] = value
    if args.graph is not None:
        base["graph"] = graph_spec_from_arg(args.graph).to_dict()
    return ExperimentConfig.from_dict(base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"colsync: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code = run(cfg)
    if code:
        print(f"colsync: finished with exit code {code}; see {cfg.output_dir}/", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
