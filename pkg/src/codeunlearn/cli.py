"""Command-line entry point: ``codeunlearn <stage> [options]``.

Exit codes: 0 success, 2 usage, 3 validation, 4 stage order, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import experiment as ex
from .data import DatasetError
from .lm import EncodingError, VocabError
from .metrics import ContaminationError, MetricError
from .surgery import StaleCacheError, SurgeryConfig, SurgeryConfigError
from .trainers import METHODS, ConfigError, MemorizationError, NonFiniteLossError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_ORDER, EXIT_NUMERIC = 0, 2, 3, 4, 5

VALIDATION_ERRORS = (ex.ValidationError, ConfigError, SurgeryConfigError, DatasetError, EncodingError,
                     VocabError, ContaminationError, MetricError, StaleCacheError, FileNotFoundError)
NUMERIC_ERRORS = (NonFiniteLossError, MemorizationError, FloatingPointError)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON config (default: ${ex.CONFIG_ENV}, then built-in defaults)")
    common.add_argument("--root", help="put data, checkpoints, reports and the manifest under this directory")
    common.add_argument("--task", choices=ex.TASKS)
    common.add_argument("--seeds", type=int, nargs="+", help="unlearning seeds")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="codeunlearn", description="Desk-scale code unlearning experiments.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic task dataset")
    g.add_argument("--seed", type=int, help="dataset seed")
    g.add_argument("--out", help="dataset directory (default: <data_dir>/<task>)")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sub.add_parser("pretrain", parents=[common], help="train the base model on the pretraining corpus")
    sub.add_parser("memorize", parents=[common], help="contaminate the base model with the forget set")

    u = sub.add_parser("unlearn", parents=[common], help="run one unlearning method over all seeds")
    u.add_argument("--method", required=True, choices=METHODS)
    u.add_argument("--epochs", type=int)
    u.add_argument("--lr", type=float, help="skip the grid search and use this learning rate")
    u.add_argument("--top-p", type=float)
    u.add_argument("--alpha", type=float)
    u.add_argument("--loss", choices=("ce", "kl", "js"))

    sub.add_parser("eval", parents=[common], help="score every unlearning checkpoint")
    sub.add_parser("attack", parents=[common], help="prefix-injection attack on scored checkpoints")
    d = sub.add_parser("pdr", parents=[common], help="Pareto Dominance Ratio per method")
    d.add_argument("--mode", choices=("points", "best"))
    a = sub.add_parser("ablate", parents=[common], help="PROD loss x top_p x alpha grid")
    a.add_argument("--lr", type=float)

    r = sub.add_parser("report", parents=[common], help="merge report CSVs into one summary")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)

    run = sub.add_parser("run", parents=[common], help="gen-data through pdr in one go")
    run.add_argument("--force", action="store_true")
    run.add_argument("--no-attack", action="store_true")

    sub.add_parser("check", parents=[common], help="list artifacts missing from the manifest")
    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    return p


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config)
    if args.root:
        cfg = cfg.with_root(args.root)
    if args.task:
        cfg = replace(cfg, task=args.task)
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(args.seeds))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, data=replace(cfg.data, seed=args.seed))
    if getattr(args, "mode", None):
        cfg = replace(cfg, pdr_mode=args.mode)
    surgery = {k: v for k, v in (("top_p", getattr(args, "top_p", None)), ("alpha", getattr(args, "alpha", None)),
                                 ("loss", getattr(args, "loss", None))) if v is not None}
    if surgery:
        base = cfg.train.surgery
        cfg = replace(cfg, train=replace(cfg.train, surgery=SurgeryConfig(
            top_p=surgery.get("top_p", base.top_p), alpha=surgery.get("alpha", base.alpha),
            loss=surgery.get("loss", base.loss))))
    return cfg.validate()


def _dispatch(args) -> int:
    if args.cmd == "report":
        path = ex.merge_reports(args.inp, args.out)
        print(path)
        return EXIT_OK
    cfg = _config(args)
    if args.cmd == "show-config":
        print(json.dumps(cfg.to_json(), indent=1, sort_keys=True))
    elif args.cmd == "gen-data":
        path, digest = ex.stage_gen_data(cfg, force=args.force, out=args.out)
        print(f"{digest}  {path}")
    elif args.cmd == "pretrain":
        row = ex.stage_pretrain(cfg)
        print(f"utility {row['model_utility']:.4f}  model {row['model_hash'][:12]}")
    elif args.cmd == "memorize":
        row = ex.stage_memorize(cfg)
        if row is None:
            print("api task: memorisation skipped")
        else:
            print(f"recall {row['recall']:.4f}  forget quality {row['forget_quality']:.4f}  "
                  f"utility {row['model_utility']:.4f}")
    elif args.cmd == "unlearn":
        if args.epochs is not None and args.epochs < 0:
            raise ex.ValidationError("--epochs must be >= 0")
        rows = ex.stage_unlearn(cfg, args.method, epochs=args.epochs, lr=args.lr)
        print(f"{args.method}: lr {rows[0]['lr']:g}, {len(rows)} seeds, "
              f"{len(rows[0]['checkpoints'])} checkpoints each")
    elif args.cmd == "eval":
        print(ex.stage_eval(cfg))
    elif args.cmd == "attack":
        print(ex.stage_attack(cfg))
    elif args.cmd == "pdr":
        path = ex.stage_pdr(cfg)
        print(path.read_text(encoding="utf-8"), end="")
    elif args.cmd == "ablate":
        print(ex.stage_ablation(cfg, lr=args.lr))
    elif args.cmd == "run":
        times = ex.run_pipeline(cfg, force=args.force, attack=not args.no_attack,
                                progress=lambda s: print(f"[{s}]", file=sys.stderr))
        for k, v in times.items():
            print(f"{k:16s} {v:8.1f}s")
    elif args.cmd == "check":
        bad = ex.orphans(cfg)
        for p in bad:
            print(p)
        if bad:
            raise ex.ValidationError(f"{len(bad)} artifacts are not in the manifest")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ex.PipelineError as e:
        print(f"pipeline error: {e}", file=sys.stderr)
        return EXIT_ORDER
    except NUMERIC_ERRORS as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except VALIDATION_ERRORS as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
