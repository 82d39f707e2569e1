"""Command-line entry point: persistence plus the six pipeline subcommands.

Control-plane data (configs, reports, metrics) is JSON; tensors travel in the
binary checkpoint container. Model checkpoints embed their own ModelConfig so
a file is loadable without the config that produced it.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, load_run_config
from .data import generate_example, split_size
from .model import ModelConfig, ModelParameters, forward, init_params
from .pipeline import (
    decode_vision_tokens, evaluate, train_distill, train_teacher,
)
from .assignment import Assignment, match_vision_tokens
from .tensor import Tensor, no_grad

__all__ = [
    "main", "run", "save_model_checkpoint", "load_model_checkpoint",
    "save_dataset", "CONFIG_ENTRY", "STEP_ENTRY",
]

CONFIG_ENTRY = "config_json"
STEP_ENTRY = "step"

DATASET_FIELDS = ("patch_grid", "prompt_ids", "response_ids", "labels")


def _encode_doc(doc: dict) -> np.ndarray:
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return np.frombuffer(blob, dtype=np.uint8).astype(np.int64)


def _decode_doc(arr: np.ndarray) -> dict:
    return json.loads(np.asarray(arr, dtype=np.int64).astype(np.uint8).tobytes().decode("utf-8"))


def _model_config_from_doc(doc: dict) -> ModelConfig:
    kwargs = dict(doc)
    kwargs["patch_grid"] = tuple(kwargs["patch_grid"])
    if kwargs.get("pool_grid") is not None:
        kwargs["pool_grid"] = tuple(kwargs["pool_grid"])
    return ModelConfig(**kwargs)


def save_model_checkpoint(params: ModelParameters, step: int, path: str) -> None:
    entries = {name: t.values for name, t in params.tensors.items()}
    entries[CONFIG_ENTRY] = _encode_doc(asdict(params.config))
    entries[STEP_ENTRY] = np.array(step, dtype=np.int64)
    save_checkpoint(entries, path)


def load_model_checkpoint(path: str) -> tuple[ModelParameters, int]:
    """Rebuild parameters from a file, validating names and shapes."""
    entries = load_checkpoint(path)
    if CONFIG_ENTRY not in entries or STEP_ENTRY not in entries:
        raise ValueError(f"{path} is not a model checkpoint (missing embedded config)")
    cfg = _model_config_from_doc(_decode_doc(entries.pop(CONFIG_ENTRY)))
    step = int(entries.pop(STEP_ENTRY))
    expected = init_params(cfg, 0).tensors
    if set(entries) != set(expected):
        missing = sorted(set(expected) - set(entries))
        extra = sorted(set(entries) - set(expected))
        raise ValueError(f"{path}: tensor names do not match config (missing {missing}, extra {extra})")
    tensors = {}
    for name in expected:
        if entries[name].shape != expected[name].values.shape:
            raise ValueError(
                f"{path}: tensor {name} has shape {entries[name].shape}, "
                f"config implies {expected[name].values.shape}"
            )
        tensors[name] = Tensor(entries[name], requires_grad=True)
    return ModelParameters(config=cfg, tensors=tensors), step


def save_dataset(data_cfg, split: str, path: str) -> None:
    """Materialize one split as stacked per-field tensors."""
    n = split_size(data_cfg, split)
    examples = [generate_example(data_cfg, split, i) for i in range(n)]
    entries = {
        "patch_grid": np.stack([ex.patch_grid.values for ex in examples]),
        "prompt_ids": np.array([ex.prompt_ids for ex in examples], dtype=np.int64),
        "response_ids": np.array([ex.response_ids for ex in examples], dtype=np.int64),
        "labels": np.array([ex.labels for ex in examples], dtype=np.int64),
        CONFIG_ENTRY: _encode_doc({"data": asdict(data_cfg), "split": split}),
    }
    save_checkpoint(entries, path)


def _write_metrics(records, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit 1 plus usage."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="matchkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", default=None, help="run config JSON; defaults when omitted")
        p.add_argument("--seed", type=int, default=None, help="override distill.seed")

    p = sub.add_parser("gen-data", help="write one dataset split as a tensor container")
    common(p)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-teacher", help="supervised teacher run; checkpoint plus metrics")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None, help="metrics JSONL path (default: OUT.metrics.jsonl)")

    p = sub.add_parser("distill", help="distill a student from a teacher checkpoint")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None, help="metrics JSONL path (default: OUT.metrics.jsonl)")

    p = sub.add_parser("eval", help="print a MetricsRecord for a checkpoint as JSON")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--teacher", default=None, help="reference checkpoint for agreement and KD terms")
    p.add_argument("--split", choices=("train", "eval"), default="eval")

    p = sub.add_parser("inspect-vision", help="top-k vocabulary readout per vision token")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--example-index", type=int, required=True)
    p.add_argument("--topk", type=int, required=True)
    p.add_argument("--split", choices=("train", "eval"), default="eval")

    p = sub.add_parser("match-dump", help="per-example assignment pairs and total cost")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--limit", type=int, default=None, help="cap the number of examples dumped")

    return parser


def _load_run(args):
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc = replace(rc, distill=replace(rc.distill, seed=args.seed))
    return rc


def _cmd_gen_data(args) -> int:
    rc = _load_run(args)
    save_dataset(rc.data, args.split, args.out)
    print(json.dumps({"written": args.out, "split": args.split,
                      "examples": split_size(rc.data, args.split)}))
    return 0


def _cmd_train_teacher(args) -> int:
    rc = _load_run(args)
    params, records = train_teacher(rc.teacher, rc.data, rc.distill)
    save_model_checkpoint(params, rc.distill.teacher_steps, args.out)
    _write_metrics(records, args.metrics or args.out + ".metrics.jsonl")
    print(records[-1].to_json())
    return 0


def _cmd_distill(args) -> int:
    rc = _load_run(args)
    teacher, _ = load_model_checkpoint(args.teacher)
    student_init = init_params(rc.student, rc.distill.seed)
    params, records = train_distill(teacher, student_init, rc.data, rc.distill)
    save_model_checkpoint(params, rc.distill.steps, args.out)
    _write_metrics(records, args.metrics or args.out + ".metrics.jsonl")
    print(records[-1].to_json())
    return 0


def _cmd_eval(args) -> int:
    rc = _load_run(args)
    params, step = load_model_checkpoint(args.model)
    reference = None
    if args.teacher is not None:
        reference, _ = load_model_checkpoint(args.teacher)
    record = evaluate(params, rc.data, args.split, reference, rc.distill, step=step)
    print(record.to_json())
    return 0


def _cmd_inspect_vision(args) -> int:
    rc = _load_run(args)
    params, _ = load_model_checkpoint(args.model)
    example = generate_example(rc.data, args.split, args.example_index)
    cfg = params.config
    if cfg.role == "student" and cfg.pool_grid is not None:
        grid_h, grid_w = cfg.pool_grid
    else:
        grid_h, grid_w = cfg.patch_grid
    table = decode_vision_tokens(params, example, args.topk)
    for pos, entries in enumerate(table):
        line = {
            "position": [pos // grid_w, pos % grid_w],
            "topk": [[tok, logit] for tok, logit in entries],
        }
        print(json.dumps(line))
    return 0


def _cmd_match_dump(args) -> int:
    rc = _load_run(args)
    matcher = rc.distill.matcher
    if matcher == "pooling":
        raise ValueError("match-dump reports assignments; pooling produces none "
                         "(set distill.matcher to a hungarian strategy)")
    teacher, _ = load_model_checkpoint(args.teacher)
    student, _ = load_model_checkpoint(args.student)
    n = split_size(rc.data, args.split)
    if args.limit is not None:
        n = min(n, args.limit)
    with no_grad():
        for index in range(n):
            example = generate_example(rc.data, args.split, index)
            match = match_vision_tokens(forward(teacher, example), forward(student, example), matcher)
            assert isinstance(match, Assignment)
            print(json.dumps({
                "index": index,
                "pairs": [[int(t), int(s)] for t, s in match.pairs],
                "total_cost": match.total_cost,
            }))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-teacher": _cmd_train_teacher,
    "distill": _cmd_distill,
    "eval": _cmd_eval,
    "inspect-vision": _cmd_inspect_vision,
    "match-dump": _cmd_match_dump,
}


def run(argv) -> int:
    """Parse argv (no program name) and execute; returns the exit code."""
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure of any kind: diagnostic, exit 2
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
