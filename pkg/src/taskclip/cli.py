"""Command-line entry point: synth, train, infer, calibrate, eval, gradcheck."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data_io
from .data_io import CheckpointError, DataError
from .evaluation import CalibrationError, EvaluationError, calibrate_threshold, evaluate
from .gradcheck import run_gradcheck
from .pipeline import predict_scene, scene_scores
from .recalibration import ModelConfig
from .scorer import GroupingConfig
from .synth import SynthConfig, generate
from .tensor import ConfigError, DimensionError
from .training import SYNTH_PRESET, TrainConfig, TrainingError, save_loss_history, train

log = logging.getLogger("taskclip")

EXIT_OK = 0
EXIT_MISSING_FILE = 3
EXIT_BAD_DATA = 4
EXIT_TRAINING_ABORT = 5
EXIT_CHECKPOINT = 6
EXIT_EVAL = 7
EXIT_GRADCHECK_FAILED = 8
EXIT_CONFIG = 9

DEFAULT_THRESHOLD = 0.15


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def _emit_config(args: argparse.Namespace, extra: dict | None = None) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    if extra:
        resolved.update(extra)
    print(json.dumps({"resolved_config": resolved}, sort_keys=True, default=str), flush=True)


def _require(path: Path | None, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise CliError(EXIT_MISSING_FILE, "missing_file", f"{what} not found: {path}")
    return Path(path)


def _load_tasks(args) -> dict:
    if args.task:
        return data_io.load_tasks(_require(p, "task file") for p in args.task)
    directory = _require(args.tasks_dir, "task directory")
    tasks = data_io.load_task_dir(directory)
    if not tasks:
        raise CliError(EXIT_MISSING_FILE, "missing_file", f"no task*.json files in {directory}")
    return tasks


# --- subcommands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = SynthConfig(n_tasks=args.tasks, scenes_per_task=args.scenes_per_task,
                      boxes_per_scene=(args.min_boxes, args.max_boxes), d=args.dim, n_word=args.n_word,
                      positive_rate=args.positive_rate, noise_std=args.noise_std, n_global=args.global_tokens,
                      split_scenes={"val": args.val_scenes, "test": args.test_scenes}, seed=args.seed)
    _emit_config(args, {"synth_config": cfg.to_dict()})
    paths = generate(cfg, args.out_dir)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def _model_config(args, d: int, n_word: int) -> ModelConfig:
    return ModelConfig(d=d, m=args.layers, n_head=args.heads, d_prime=args.d_prime, alpha=args.alpha,
                       beta_adapter=args.beta_adapter, ffn_dim=args.ffn_dim,
                       d_hidden_adapter=args.adapter_hidden, n_word=n_word)


def cmd_train(args) -> int:
    tasks = _load_tasks(args)
    scenes = data_io.load_scenes(_require(args.scenes, "scenes file"), require_labels=True, known_tasks=tasks)
    if not scenes:
        raise CliError(EXIT_BAD_DATA, "schema", "no training scenes")
    n_words = {t.n_word for t in tasks.values()}
    if len(n_words) != 1:
        raise CliError(EXIT_BAD_DATA, "schema", f"tasks disagree on attribute count: {sorted(n_words)}")
    cfg = _model_config(args, scenes[0].dim, n_words.pop())
    preset = SYNTH_PRESET if args.preset == "synth" else {}
    tcfg = TrainConfig(epochs=args.epochs, seed=args.seed, shuffle=not args.no_shuffle,
                       learning_rate=args.lr if args.lr is not None else preset.get("learning_rate", 1e-6),
                       weight_decay=args.weight_decay if args.weight_decay is not None
                       else preset.get("weight_decay", 1e-4))
    _emit_config(args, {"model_config": cfg.to_dict(), "train_config": tcfg.to_dict()})
    result = train(scenes, tasks, cfg, tcfg)
    data_io.save_checkpoint(result.params, cfg, args.out, result.meta)
    if args.loss_csv:
        save_loss_history(result.history, args.loss_csv)
    print(json.dumps({"checkpoint": str(args.out), "epochs": len(result.history),
                      "final_loss": result.history[-1]}))
    return EXIT_OK


def _thresholds_for(args) -> dict[int, float]:
    if args.thresholds:
        return data_io.load_thresholds(_require(args.thresholds, "thresholds file"))
    return {}


def cmd_infer(args) -> int:
    params, cfg, _ = data_io.load_checkpoint(_require(args.model, "checkpoint"))
    tasks = _load_tasks(args)
    scenes = data_io.load_scenes(_require(args.scenes, "scenes file"), known_tasks=tasks)
    per_task = _thresholds_for(args)
    if not 0.0 <= args.threshold <= 1.0:
        raise CliError(EXIT_CONFIG, "config", f"--threshold {args.threshold} outside [0, 1]")
    grouping = GroupingConfig(beta_g=args.group_conf, enabled=args.grouping)
    _emit_config(args, {"model_config": cfg.to_dict(), "per_task_thresholds": per_task})
    records = [predict_scene(s, tasks[s.task_id], params, cfg, per_task.get(s.task_id, args.threshold), grouping)
               for s in scenes]
    data_io.save_predictions(records, args.out)
    print(json.dumps({"predictions": str(args.out), "scenes": len(records)}))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    params, cfg, _ = data_io.load_checkpoint(_require(args.model, "checkpoint"))
    tasks = _load_tasks(args)
    scenes = data_io.load_scenes(_require(args.scenes, "scenes file"), require_labels=True, known_tasks=tasks)
    _emit_config(args, {"model_config": cfg.to_dict()})
    by_task: dict[int, tuple[list, list]] = {}
    for s in scenes:
        scores, labels = by_task.setdefault(s.task_id, ([], []))
        scores.extend(scene_scores(s, tasks[s.task_id], params, cfg))
        labels.extend(s.labels())
    thresholds, summary = {}, {}
    for task_id, (scores, labels) in sorted(by_task.items()):
        res = calibrate_threshold(scores, labels)
        thresholds[task_id] = res.threshold
        summary[str(task_id)] = {"threshold": res.threshold, "tpr": res.tpr, "fpr": res.fpr, "gmean": res.gmean}
    data_io.save_thresholds(thresholds, args.out)
    print(json.dumps({"thresholds": str(args.out), "per_task": summary,
                      "mean_threshold": float(np.mean(list(thresholds.values())))}))
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = data_io.load_predictions(_require(args.preds, "predictions file"))
    scenes = data_io.load_scenes(_require(args.scenes, "scenes file"), require_labels=True)
    _emit_config(args)
    report = evaluate(preds, scenes, args.iou)
    data_io.save_report(report, args.out)
    print(json.dumps({"report": str(args.out), "map": report["map"]}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _emit_config(args)
    rep = run_gradcheck(d=args.dim, heads=args.heads, m=args.layers, d_prime=args.d_prime, n_word=args.n_word,
                        seed=args.seed, max_entries=args.max_entries or None,
                        block_tol=args.block_tol, full_tol=args.full_tol)
    out = rep.to_dict()
    out["worst"] = max([rep.full_error, *rep.block_errors.values()])
    print(json.dumps(out))
    if not rep.passed:
        raise CliError(EXIT_GRADCHECK_FAILED, "gradcheck_failed", f"worst relative error {out['worst']:.3e}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def _add_task_args(p) -> None:
    p.add_argument("--tasks-dir", type=Path, help="directory holding task*.json")
    p.add_argument("--task", type=Path, action="append", help="task spec file (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskclip", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out-dir", type=Path, default=Path("data"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tasks", type=int, default=3)
    p.add_argument("--scenes-per-task", type=int, default=40)
    p.add_argument("--val-scenes", type=int, default=20)
    p.add_argument("--test-scenes", type=int, default=20)
    p.add_argument("--min-boxes", type=int, default=10)
    p.add_argument("--max-boxes", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--n-word", type=int, default=20)
    p.add_argument("--global-tokens", type=int, default=1)
    p.add_argument("--positive-rate", type=float, default=1 / 15)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model end to end")
    p.add_argument("--scenes", type=Path, required=True)
    _add_task_args(p)
    p.add_argument("--out", type=Path, default=Path("model.ckpt"))
    p.add_argument("--loss-csv", type=Path)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--preset", choices=["default", "synth"], default="default",
                   help="default: lr 1e-6; synth: elevated lr for small synthetic data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-prime", type=int, default=256)
    p.add_argument("--ffn-dim", type=int)
    p.add_argument("--adapter-hidden", type=int)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--beta-adapter", type=float, default=0.3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score scenes and write predictions")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--scenes", type=Path, required=True)
    _add_task_args(p)
    p.add_argument("--out", type=Path, default=Path("preds.jsonl"))
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--thresholds", type=Path, help="per-task thresholds; overrides --threshold")
    p.add_argument("--grouping", action="store_true")
    p.add_argument("--group-conf", type=float, default=0.8)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("calibrate", help="per-task g-means thresholds on a validation split")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--scenes", type=Path, required=True)
    _add_task_args(p)
    p.add_argument("--out", type=Path, default=Path("thresholds.json"))
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="AP@0.5 per task and mAP")
    p.add_argument("--preds", type=Path, required=True)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("report.json"))
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-prime", type=int, default=16)
    p.add_argument("--n-word", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=int, default=24, help="0 checks every entry")
    p.add_argument("--block-tol", type=float, default=1e-5)
    p.add_argument("--full-tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def _thread_limit():
    n = os.environ.get("TASKCLIP_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except CliError as e:
        return _fail(e.code, e.kind, str(e))
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING_FILE, "missing_file", str(e))
    except CheckpointError as e:
        return _fail(EXIT_CHECKPOINT, e.code, str(e))
    except (DataError, DimensionError) as e:
        return _fail(EXIT_BAD_DATA, "schema", str(e))
    except TrainingError as e:
        return _fail(EXIT_TRAINING_ABORT, "training_aborted", str(e))
    except (CalibrationError, EvaluationError) as e:
        return _fail(EXIT_EVAL, "evaluation", str(e))
    except (ConfigError, ValueError) as e:
        return _fail(EXIT_CONFIG, "config", str(e))


if __name__ == "__main__":
    sys.exit(main())
