"""Command-line entry point: run one experiment, or validate a config.

    fedlips run <config-path> [--seed N] [--output DIR] [--workers N]
    fedlips validate <config-path>

A run writes accuracy.csv, cosine.csv, gradnorm.csv, summary.json and the
resolved config (config.yaml) into the output directory and exits 0. On any
failure it removes whatever it managed to write and exits nonzero with a
diagnostic. Output directory precedence: --output, then the config's
output_dir, then $FEDLIPS_OUTPUT_ROOT/<config stem>, then ./runs/<config stem>.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import fedcore
from . import metrics as mt
from .config import ConfigError, dump_config, load_config

OUTPUT_ROOT_ENV = "FEDLIPS_OUTPUT_ROOT"
CONFIG_ECHO = "config.yaml"


def _resolve_output_dir(cfg, config_path: str, cli_output: str | None) -> str:
    if cli_output:
        return cli_output
    if cfg.output_dir:
        return cfg.output_dir
    stem = os.path.splitext(os.path.basename(config_path))[0]
    root = os.environ.get(OUTPUT_ROOT_ENV, os.path.join(".", "runs"))
    return os.path.join(root, stem)


def _write_artifacts(cfg, log, out_dir: str) -> list[str]:
    created_dir = not os.path.isdir(out_dir)
    written: list[str] = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        written += mt.export_csv(log, out_dir)
        written.append(mt.export_summary(log, out_dir))
        echo = os.path.join(out_dir, CONFIG_ECHO)
        with open(echo, "w") as fh:
            fh.write(dump_config(cfg))
        written.append(echo)
        return written
    except BaseException:
        for path in written:
            try:
                os.remove(path)
            except OSError:
                pass
        if created_dir:
            try:
                os.rmdir(out_dir)
            except OSError:
                pass
        raise


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.workers is not None:
            cfg.parallel_workers = args.workers
        cfg.output_dir = _resolve_output_dir(cfg, args.config, args.output)
        from .config import validate
        validate(cfg)

        log = fedcore.run_experiment(cfg)
        _write_artifacts(cfg, log, cfg.output_dir)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    final = log.final()
    acc = "n/a" if final is None else f"{final.mean_accuracy:.4f}"
    print(f"completed {len(log)} rounds; final mean accuracy {acc}; "
          f"artifacts in {cfg.output_dir}")
    return 0


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1
    print(f"config ok: method={cfg.method} arch={cfg.arch} "
          f"n_clients={cfg.n_clients} rounds={cfg.rounds} seed={cfg.seed}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlips",
        description="Deterministic federated-learning simulator with transient sparsity")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a config file")
    run_p.add_argument("config", help="path to the YAML config")
    run_p.add_argument("--seed", type=int, help="override the master seed")
    run_p.add_argument("--output", help="override the output directory")
    run_p.add_argument("--workers", type=int, help="override parallel_workers")
    run_p.set_defaults(func=cmd_run)

    val_p = sub.add_parser("validate", help="parse and validate a config file")
    val_p.add_argument("config", help="path to the YAML config")
    val_p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
