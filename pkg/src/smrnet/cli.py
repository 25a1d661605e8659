"""Command-line entry point: ``smrnet generate|train|eval|ablate``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure
(non-finite values, I/O), 4 corrupt checkpoint or manifest.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig
from .metrics import CSV_HEADER
from .synthgel import MANIFEST_NAME, SNAP_TYPES, Dataset, generate_dataset, load_dataset
from .tensor import NonFiniteError
from .train import LOG_HEADER, ablation_csv, evaluate_split, ordering_summary, run_ablation, train_model

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CORRUPT = 0, 2, 3, 4
THREADS_ENV = "SMRNET_THREADS"

log = logging.getLogger("smrnet")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _int_list(text: str) -> List[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("need at least one seed")
    return out


def _dirs(text: str) -> List[str]:
    out = [x.strip() for x in text.split(",") if x.strip()]
    if not out:
        raise argparse.ArgumentTypeError("need at least one data directory")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smrnet", description="Snap detector on synthetic gel images.")
    p.add_argument("--version", action="version", version=f"smrnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--type", required=True, choices=SNAP_TYPES, help="snap geometry")
    g.add_argument("--count", required=True, type=_positive_int, help="number of images")
    g.add_argument("--seed", required=True, type=int, help="dataset seed")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a detector and write a checkpoint")
    t.add_argument("--config", help="key = value config file (defaults if omitted)")
    t.add_argument("--data", required=True, type=_dirs, help="DIR[,DIR2] dataset directories")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="also write the CSV epoch log here")
    t.add_argument("--epochs", type=int, help="override the configured epoch count")
    t.add_argument("--seed", type=int, help="override the configured seed")

    e = sub.add_parser("eval", help="score a checkpoint on the eval split")
    e.add_argument("--ckpt", help="checkpoint path (not needed with --oracle/--empty)")
    e.add_argument("--data", required=True, type=_dirs, help="DIR[,DIR2] dataset directories")
    e.add_argument("--report", required=True, help="JSON report path")
    e.add_argument("--split", default="eval", choices=("train", "eval"))
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--oracle", action="store_true", help="echo ground truth as predictions")
    mode.add_argument("--empty", action="store_true", help="predict nothing")

    a = sub.add_parser("ablate", help="train and score the four ablation variants")
    a.add_argument("--config", help="key = value config file (defaults if omitted)")
    a.add_argument("--data", required=True, type=_dirs, help="DIR[,DIR2] dataset directories")
    a.add_argument("--seeds", required=True, type=_int_list, help="S1,S2,... training seeds")
    a.add_argument("--report", required=True, help="JSON report path; a CSV table goes to stdout")
    a.add_argument("--epochs", type=int, help="override the configured epoch count")
    return p


def thread_limit() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}", EXIT_USAGE) from None
    if n < 1:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}", EXIT_USAGE)
    return n


def load_config(path: Optional[str], **overrides) -> RunConfig:
    try:
        cfg = RunConfig.load(path) if path else RunConfig()
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return cfg.replace(**overrides) if overrides else cfg
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_USAGE) from None
    except ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_USAGE) from None
    except (OSError, UnicodeDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_RUNTIME) from None


def load_data(dirs: Sequence[str]) -> List[Dataset]:
    out = []
    for d in dirs:
        if not os.path.isfile(os.path.join(d, MANIFEST_NAME)):
            raise CliError(f"no {MANIFEST_NAME} in {d}", EXIT_USAGE)
        try:
            out.append(load_dataset(d))
        except (ValueError, KeyError) as exc:
            raise CliError(f"corrupt dataset in {d}: {exc}", EXIT_CORRUPT) from None
        except OSError as exc:
            raise CliError(f"cannot read dataset {d}: {exc}", EXIT_RUNTIME) from None
    return out


def provenance(datasets: Sequence[Dataset]) -> dict:
    return {d.name: d.manifest.digest for d in datasets}


def write_json(path: str, payload: dict) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(args) -> int:
    manifest = generate_dataset(args.type, args.count, args.seed, args.out)
    print(manifest.path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, epochs=args.epochs, seed=args.seed)
    cfg = cfg.replace(data=list(args.data))
    datasets = load_data(args.data)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        print(LOG_HEADER, flush=True)

        def echo(entry):
            for row in entry.csv_rows():
                print(row, flush=True)

        model, _ = train_model(cfg, datasets, log_fh=log_fh, on_epoch=echo)
    finally:
        if log_fh is not None:
            log_fh.close()
    save_model(args.out, model)
    log.info("checkpoint written to %s", args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    mode = "oracle" if args.oracle else "empty" if args.empty else "model"
    model = cfg = None
    if mode == "model":
        if not args.ckpt:
            raise CliError("--ckpt is required unless --oracle or --empty is given", EXIT_USAGE)
        if not os.path.isfile(args.ckpt):
            raise CliError(f"checkpoint not found: {args.ckpt}", EXIT_USAGE)
        model = load_model(args.ckpt)
        cfg = model.cfg
    datasets = load_data(args.data)
    reports = [evaluate_split(d, args.split, model, mode) for d in datasets]
    write_json(args.report, {
        "mode": mode, "split": args.split,
        "config": cfg.as_dict() if cfg is not None else None,
        "manifest_digests": provenance(datasets),
        "csv_header": CSV_HEADER,
        "reports": [r.as_dict() for r in reports],
    })
    print(CSV_HEADER)
    for r in reports:
        print(r.csv_row())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, epochs=args.epochs)
    cfg = cfg.replace(data=list(args.data))
    datasets = load_data(args.data)
    rows = run_ablation(cfg, datasets, args.seeds, progress=log.info)
    write_json(args.report, {
        "config": cfg.as_dict(), "seeds": list(args.seeds),
        "manifest_digests": provenance(datasets),
        "rows": rows,
        "ordering_full_at_least_ablation": ordering_summary(rows),
    })
    sys.stdout.write(ablation_csv(rows))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        # every tensor op checks for NaN/Inf itself and raises NonFiniteError
        with threadpool_limits(limits=thread_limit()), np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"smrnet: {exc}", file=sys.stderr)
        return exc.code
    except CheckpointError as exc:
        print(f"smrnet: corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except NonFiniteError as exc:
        print(f"smrnet: numeric failure: {exc}; try a lower lr or clip_norm", file=sys.stderr)
        return EXIT_RUNTIME
    except ConfigError as exc:
        print(f"smrnet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError) as exc:
        print(f"smrnet: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"smrnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
