"""Training orchestration: teacher SFT, the distillation step, Adam, eval.

Per-sample loops everywhere, with loss terms accumulated in fixed sample
order, so whole runs are bitwise reproducible from their seeds.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .tensor import Tensor, Tape, backward, no_grad
from . import ops
from .assignment import match_vision_tokens, MATCH_STRATEGIES
from .data import DatasetConfig, SyntheticExample, generate_example, make_batches, split_size
from .losses import (
    LossWeights, LossBreakdown, cross_entropy, response_rld, vsd_loss, vlad_loss, combine,
)
from .model import ModelConfig, ModelParameters, forward, greedy_decode, init_params

__all__ = [
    "DistillConfig", "TrainState", "MetricsRecord", "DivergenceError",
    "train_teacher", "train_distill", "distill_step", "adam_update",
    "evaluate", "decode_vision_tokens", "sft_weights", "clone_params",
]

VSD_OBJECTIVES = ("logits", "hidden")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, message: str, records: Optional[list] = None):
        super().__init__(message)
        self.records = records or []


@dataclass(frozen=True)
class DistillConfig:
    weights: LossWeights = LossWeights()
    matcher: str = "hungarian_logits"
    vsd_objective: str = "logits"
    learning_rate: float = 3e-3
    steps: int = 2000
    teacher_steps: int = 3000
    batch_size: int = 8
    seed: int = 1
    eval_interval: int = 500

    def __post_init__(self):
        if self.matcher not in MATCH_STRATEGIES:
            raise ValueError(f"matcher must be one of {MATCH_STRATEGIES}, got {self.matcher!r}")
        if self.vsd_objective not in VSD_OBJECTIVES:
            raise ValueError(
                f"vsd_objective must be one of {VSD_OBJECTIVES}, got {self.vsd_objective!r}"
            )
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if min(self.steps, self.teacher_steps, self.batch_size, self.eval_interval) < 1:
            raise ValueError("steps, teacher_steps, batch_size, eval_interval must be positive")


@dataclass
class TrainState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: ModelParameters) -> "TrainState":
        return cls(
            step=0,
            m={name: np.zeros_like(t.values) for name, t in params.tensors.items()},
            v={name: np.zeros_like(t.values) for name, t in params.tensors.items()},
        )


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    sup: float
    rld: float
    vsd: float
    vlad: float
    total: float
    eval_ce: float
    agreement: float
    exact_match: float
    ms: float

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "sup": self.sup,
            "rld": self.rld,
            "vsd": self.vsd,
            "vlad": self.vlad,
            "total": self.total,
            "eval_ce": self.eval_ce,
            "agreement": self.agreement,
            "exact_match": self.exact_match,
            "ms": self.ms,
        })


def sft_weights(weights: LossWeights) -> LossWeights:
    """Degenerate weights for the supervision-only arm."""
    return LossWeights(alpha=1.0, beta=0.0, gamma=0.0, temperature=weights.temperature)


def clone_params(params: ModelParameters) -> ModelParameters:
    return ModelParameters(
        config=params.config,
        tensors={n: Tensor(t.values.copy(), requires_grad=True) for n, t in params.tensors.items()},
    )


def _check_model_data(model_cfg: ModelConfig, data_cfg: DatasetConfig) -> None:
    if model_cfg.patch_grid != data_cfg.grid:
        raise ValueError(f"model patch_grid {model_cfg.patch_grid} != data grid {data_cfg.grid}")
    if model_cfg.patch_dim != data_cfg.patch_dim:
        raise ValueError(f"model patch_dim {model_cfg.patch_dim} != data patch_dim {data_cfg.patch_dim}")
    if model_cfg.vocab_size < data_cfg.min_vocab:
        raise ValueError(
            f"vocab_size {model_cfg.vocab_size} too small for data ids up to {data_cfg.min_vocab - 1}"
        )
    needed = model_cfg.vision_tokens_out + len(data_cfg.prompt_ids) + data_cfg.response_len - 1
    if needed > model_cfg.max_seq_len:
        raise ValueError(f"sequence of {needed} exceeds max_seq_len {model_cfg.max_seq_len}")


def _check_pair(teacher_cfg: ModelConfig, student_cfg: ModelConfig) -> None:
    if teacher_cfg.vocab_size != student_cfg.vocab_size:
        raise ValueError(
            f"teacher and student must share a vocabulary, got "
            f"{teacher_cfg.vocab_size} vs {student_cfg.vocab_size}"
        )
    if student_cfg.vision_tokens_out > teacher_cfg.vision_tokens_out:
        raise ValueError(
            f"student emits {student_cfg.vision_tokens_out} vision tokens, more than "
            f"the teacher's {teacher_cfg.vision_tokens_out}"
        )


def _mean_scalars(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ops.add(acc, t)
    return ops.scale(acc, 1.0 / len(terms))


def distill_step(
    teacher: ModelParameters,
    student: ModelParameters,
    batch: list[SyntheticExample],
    config: DistillConfig,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """One combined-loss step; populates and returns student gradients only.

    The teacher runs without a tape, matching runs under no-grad, and terms
    whose weight is exactly zero are skipped outright (they would contribute
    exactly zero to the total and its gradient either way).
    """
    if not batch:
        raise ValueError("distill_step: empty batch")
    _check_pair(teacher.config, student.config)
    w = config.weights
    needs_teacher = w.alpha < 1.0 or w.beta > 0.0 or w.gamma > 0.0
    teacher.zero_grads()
    student.zero_grads()
    sup_terms: list[Tensor] = []
    rld_terms: list[Tensor] = []
    vsd_terms: list[Tensor] = []
    vlad_terms: list[Tensor] = []
    with Tape():
        for ex in batch:
            s_out = forward(student, ex)
            sup_terms.append(cross_entropy(s_out.response_logits, ex.response_ids))
            if needs_teacher:
                with no_grad():
                    t_out = forward(teacher, ex)
                rld_terms.append(
                    response_rld(
                        s_out.response_logits,
                        Tensor(t_out.response_logits.values),
                        ex.response_ids,
                        w.temperature,
                    )
                )
                match = match_vision_tokens(t_out, s_out, config.matcher)
                vsd_terms.append(vsd_loss(t_out, s_out, match, config.vsd_objective, w))
                vlad_terms.append(vlad_loss(t_out, s_out, match))
        sup = _mean_scalars(sup_terms)
        rld = _mean_scalars(rld_terms) if rld_terms else Tensor(0.0)
        vsd = _mean_scalars(vsd_terms) if vsd_terms else Tensor(0.0)
        vlad = _mean_scalars(vlad_terms) if vlad_terms else Tensor(0.0)
        breakdown, total = combine(w, sup, rld, vsd, vlad)
    if not np.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite loss {breakdown.total} in distill_step")
    backward(total)
    grads = {name: t.grad.copy() for name, t in student.tensors.items()}
    return breakdown, grads


def adam_update(
    state: TrainState,
    params: ModelParameters,
    grads: dict[str, np.ndarray],
    lr: float,
) -> None:
    """In-place Adam with bias correction, fixed parameter-name order."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    for name in sorted(params.tensors):
        g = grads[name]
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        params.tensors[name].values -= lr * update


def evaluate(
    params: ModelParameters,
    data_cfg: DatasetConfig,
    split: str = "eval",
    reference: Optional[ModelParameters] = None,
    config: DistillConfig = DistillConfig(),
    step: int = 0,
    elapsed_ms: float = 0.0,
) -> MetricsRecord:
    """No-update metrics pass over a split.

    Loss components are teacher-forced means over the split; rld, vsd and
    vlad need a reference model and are zero without one. agreement is the
    top-1 match rate against the reference's argmax when a reference is
    given, and against the ground-truth labels otherwise. exact_match uses
    greedy decoding against the full response.
    """
    _check_model_data(params.config, data_cfg)
    w = config.weights
    n = split_size(data_cfg, split)
    sup_vals, rld_vals, vsd_vals, vlad_vals = [], [], [], []
    agree_hits = 0
    agree_total = 0
    exact_hits = 0
    with no_grad():
        for idx in range(n):
            ex = generate_example(data_cfg, split, idx)
            out = forward(params, ex)
            sup_vals.append(cross_entropy(out.response_logits, ex.response_ids).item())
            predicted = out.response_logits.values.argmax(axis=1)
            if reference is not None:
                ref_out = forward(reference, ex)
                rld_vals.append(
                    response_rld(
                        out.response_logits, ref_out.response_logits,
                        ex.response_ids, w.temperature,
                    ).item()
                )
                match = match_vision_tokens(ref_out, out, config.matcher)
                vsd_vals.append(vsd_loss(ref_out, out, match, config.vsd_objective, w).item())
                vlad_vals.append(vlad_loss(ref_out, out, match).item())
                ref_predicted = ref_out.response_logits.values.argmax(axis=1)
                agree_hits += int((predicted == ref_predicted).sum())
            else:
                agree_hits += int((predicted == np.asarray(ex.response_ids)).sum())
            agree_total += predicted.size
            decoded = greedy_decode(params, ex, len(ex.response_ids), data_cfg.eos_id)
            exact_hits += decoded == list(ex.response_ids)
    sup = float(np.mean(sup_vals))
    rld = float(np.mean(rld_vals)) if rld_vals else 0.0
    vsd = float(np.mean(vsd_vals)) if vsd_vals else 0.0
    vlad = float(np.mean(vlad_vals)) if vlad_vals else 0.0
    breakdown, _ = combine(w, sup, rld, vsd, vlad)
    return MetricsRecord(
        step=step,
        sup=breakdown.sup,
        rld=breakdown.rld,
        vsd=breakdown.vsd,
        vlad=breakdown.vlad,
        total=breakdown.total,
        eval_ce=sup,
        agreement=agree_hits / agree_total,
        exact_match=exact_hits / n,
        ms=elapsed_ms,
    )


def _train_loop(
    step_fn,
    params: ModelParameters,
    data_cfg: DatasetConfig,
    config: DistillConfig,
    total_steps: int,
    eval_fn,
) -> list[MetricsRecord]:
    state = TrainState.for_params(params)
    start = time.perf_counter()

    def elapsed() -> float:
        return (time.perf_counter() - start) * 1000.0

    records = [eval_fn(0, elapsed())]
    step = 0
    try:
        while step < total_steps:
            for batch in make_batches(data_cfg, "train", config.batch_size):
                step += 1
                _, grads = step_fn(batch)
                adam_update(state, params, grads, config.learning_rate)
                if step % config.eval_interval == 0 or step == total_steps:
                    records.append(eval_fn(step, elapsed()))
                if step >= total_steps:
                    break
    except DivergenceError as err:
        raise DivergenceError(str(err), records) from None
    return records


def train_teacher(
    model_cfg: ModelConfig,
    data_cfg: DatasetConfig,
    config: DistillConfig,
) -> tuple[ModelParameters, list[MetricsRecord]]:
    """Supervised training with cross-entropy only (the distill step with
    degenerate weights and the model standing in as its own teacher)."""
    _check_model_data(model_cfg, data_cfg)
    params = init_params(model_cfg, config.seed)
    sft_cfg = replace(config, weights=sft_weights(config.weights))

    def eval_fn(step, ms):
        return evaluate(params, data_cfg, "eval", None, sft_cfg, step, ms)

    records = _train_loop(
        lambda batch: distill_step(params, params, batch, sft_cfg),
        params, data_cfg, sft_cfg, config.teacher_steps, eval_fn,
    )
    return params, records


def train_distill(
    teacher: ModelParameters,
    student_init: ModelParameters,
    data_cfg: DatasetConfig,
    config: DistillConfig,
) -> tuple[ModelParameters, list[MetricsRecord]]:
    """Distill a student from a frozen teacher; student_init is not mutated."""
    _check_pair(teacher.config, student_init.config)
    _check_model_data(teacher.config, data_cfg)
    _check_model_data(student_init.config, data_cfg)
    params = clone_params(student_init)

    def eval_fn(step, ms):
        return evaluate(params, data_cfg, "eval", teacher, config, step, ms)

    records = _train_loop(
        lambda batch: distill_step(teacher, params, batch, config),
        params, data_cfg, config, config.steps, eval_fn,
    )
    return params, records


def decode_vision_tokens(
    params: ModelParameters, example: SyntheticExample, k: int
) -> list[list[tuple[int, float]]]:
    """Top-k vocabulary entries per vision token, highest logit first.

    Ties resolve to the lowest token id via the stable descending sort.
    """
    if not 1 <= k <= params.config.vocab_size:
        raise ValueError(f"k must lie in [1, {params.config.vocab_size}], got {k}")
    with no_grad():
        out = forward(params, example)
    table = []
    for row in out.vision_logits.values:
        order = np.argsort(-row, kind="stable")[:k]
        table.append([(int(tok), float(row[tok])) for tok in order])
    return table
