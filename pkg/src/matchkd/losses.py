"""Distillation loss components and their weighted combination.

All teacher-side quantities are detached before entering a loss, so gradients
reach student tensors only. Reductions are means: over rows for the KL terms,
over all affinity entries for the smooth L1 term.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import Tensor
from . import ops
from .assignment import Assignment, PooledTokens
from .data import IGNORE_LABEL
from .model import ModelOutputs

__all__ = [
    "LossWeights", "LossBreakdown", "reverse_kl", "cross_entropy",
    "response_rld", "vsd_loss", "vlad_loss", "combine", "SMOOTH_L1_DELTA",
]

SMOOTH_L1_DELTA = 1.0


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.25
    gamma: float = 25.0
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0.0 or self.gamma < 0.0:
            raise ValueError("beta and gamma must be nonnegative")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class LossBreakdown:
    sup: float
    rld: float
    vsd: float
    vlad: float
    total: float


def _as_const(t: Tensor) -> Tensor:
    """Detach a tensor so no gradient flows into it."""
    return Tensor(t.values)


def reverse_kl(student_logits: Tensor, teacher_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean over rows of KL(softmax(student/T) || softmax(teacher/T)).

    The divergence is taken with the student distribution as the reference
    measure (mode seeking); the teacher side is detached.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"reverse_kl: shape mismatch {student_logits.shape} vs {teacher_logits.shape}"
        )
    if student_logits.values.ndim != 2:
        raise ValueError(f"reverse_kl: expected [N x V] logits, got {student_logits.shape}")
    if temperature <= 0.0:
        raise ValueError(f"reverse_kl: temperature must be positive, got {temperature}")
    s = ops.scale(student_logits, 1.0 / temperature)
    log_p = ops.log_softmax(s)
    p = ops.softmax(s)
    log_q = ops.log_softmax(ops.scale(_as_const(teacher_logits), 1.0 / temperature))
    per_row = ops.reduce_sum(ops.mul(p, ops.sub(log_p, log_q)), axis=-1)
    return ops.reduce_mean(per_row)


def cross_entropy(response_logits: Tensor, labels) -> Tensor:
    """Mean negative log likelihood over non-ignored label positions."""
    labels = list(labels)
    if response_logits.values.ndim != 2 or len(labels) != response_logits.shape[0]:
        raise ValueError(
            f"cross_entropy: {len(labels)} labels for logits of shape {response_logits.shape}"
        )
    vocab = response_logits.shape[1]
    keep = [i for i, lab in enumerate(labels) if lab != IGNORE_LABEL]
    if not keep:
        raise ValueError("cross_entropy: every position is ignored")
    for i in keep:
        if not 0 <= labels[i] < vocab:
            raise ValueError(f"cross_entropy: label {labels[i]} outside vocab of {vocab}")
    kept = ops.take_rows(response_logits, keep)
    log_probs = ops.log_softmax(kept)
    onehot = np.zeros((len(keep), vocab))
    onehot[np.arange(len(keep)), [labels[i] for i in keep]] = 1.0
    picked = ops.reduce_sum(ops.mul(log_probs, Tensor(onehot)))
    return ops.scale(picked, -1.0 / len(keep))


def response_rld(
    student_logits: Tensor, teacher_logits: Tensor, labels, temperature: float = 1.0
) -> Tensor:
    """Reverse KL restricted to the non-ignored (response) positions."""
    labels = list(labels)
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"response_rld: shape mismatch {student_logits.shape} vs {teacher_logits.shape}"
        )
    if len(labels) != student_logits.shape[0]:
        raise ValueError(
            f"response_rld: {len(labels)} labels for logits of shape {student_logits.shape}"
        )
    keep = [i for i, lab in enumerate(labels) if lab != IGNORE_LABEL]
    if not keep:
        raise ValueError("response_rld: no response positions")
    return reverse_kl(
        ops.take_rows(student_logits, keep),
        Tensor(teacher_logits.values[keep]),
        temperature,
    )


Match = Union[Assignment, PooledTokens]


def _matched_sides(teacher_rows: Tensor, student_rows: Tensor, match: Match, pooled_attr: str):
    """Teacher rows (detached) and student rows selected by the match."""
    if isinstance(match, PooledTokens):
        pooled = getattr(match, pooled_attr)
        if pooled.shape[0] != student_rows.shape[0]:
            raise ValueError(
                f"pooled teacher has {pooled.shape[0]} rows for "
                f"{student_rows.shape[0]} student tokens"
            )
        return _as_const(pooled), student_rows
    t_idx = [p[0] for p in match.pairs]
    s_idx = [p[1] for p in match.pairs]
    n_t, n_s = teacher_rows.shape[0], student_rows.shape[0]
    if any(not 0 <= i < n_t for i in t_idx) or any(not 0 <= j < n_s for j in s_idx):
        raise ValueError("match contains out-of-range token indices")
    return Tensor(teacher_rows.values[t_idx]), ops.take_rows(student_rows, s_idx)


def vsd_loss(
    teacher: ModelOutputs,
    student: ModelOutputs,
    match: Match,
    objective: str = "logits",
    weights: LossWeights = LossWeights(),
    delta: float = SMOOTH_L1_DELTA,
) -> Tensor:
    """Vision semantic distillation over matched vision tokens.

    logits mode is the default: reverse KL between matched vision logit rows.
    hidden mode is the ablation comparator: smooth L1 between matched hidden
    rows, which requires equal hidden widths.
    """
    if objective not in ("logits", "hidden"):
        raise ValueError(f"vsd objective must be logits or hidden, got {objective!r}")
    if objective == "logits":
        if teacher.vision_logits.shape[1] != student.vision_logits.shape[1]:
            raise ValueError(
                f"vsd on logits needs a shared vocabulary, got "
                f"{teacher.vision_logits.shape[1]} vs {student.vision_logits.shape[1]}"
            )
        t_rows, s_rows = _matched_sides(teacher.vision_logits, student.vision_logits, match, "logits")
        return reverse_kl(s_rows, t_rows, weights.temperature)
    if teacher.vision_hidden.shape[1] != student.vision_hidden.shape[1]:
        raise ValueError(
            f"vsd on hidden states needs equal widths, got "
            f"{teacher.vision_hidden.shape[1]} vs {student.vision_hidden.shape[1]}"
        )
    t_rows, s_rows = _matched_sides(teacher.vision_hidden, student.vision_hidden, match, "hidden")
    return ops.smooth_l1(s_rows, t_rows, delta)


def vlad_loss(
    teacher: ModelOutputs,
    student: ModelOutputs,
    match: Match,
    delta: float = SMOOTH_L1_DELTA,
) -> Tensor:
    """Vision-language affinity distillation.

    Both affinity matrices are cosine similarities between matched vision
    hidden rows and the full language segment, shaped
    [student vision tokens x text tokens]; the teacher matrix is a constant.
    """
    n_text_t = teacher.language_hidden.shape[0]
    n_text_s = student.language_hidden.shape[0]
    if n_text_t != n_text_s:
        raise ValueError(
            f"vlad_loss: text length mismatch, teacher {n_text_t} vs student {n_text_s}"
        )
    t_vis, s_vis = _matched_sides(teacher.vision_hidden, student.vision_hidden, match, "hidden")
    affinity_t = ops.cosine_rows(_as_const(t_vis), _as_const(teacher.language_hidden))
    affinity_s = ops.cosine_rows(s_vis, student.language_hidden)
    return ops.smooth_l1(affinity_s, _as_const(affinity_t), delta)


def _scalar(x) -> Tensor:
    if isinstance(x, Tensor):
        if x.values.size != 1:
            raise ValueError(f"combine: component must be scalar, got shape {x.shape}")
        return x
    return Tensor(float(x))


def combine(weights: LossWeights, sup, rld, vsd, vlad) -> tuple[LossBreakdown, Tensor]:
    """Weighted total; returns the breakdown floats and the taped total."""
    sup_t, rld_t, vsd_t, vlad_t = _scalar(sup), _scalar(rld), _scalar(vsd), _scalar(vlad)
    total = ops.add(
        ops.add(
            ops.add(ops.scale(sup_t, weights.alpha), ops.scale(rld_t, 1.0 - weights.alpha)),
            ops.scale(vsd_t, weights.beta),
        ),
        ops.scale(vlad_t, weights.gamma),
    )
    breakdown = LossBreakdown(
        sup=sup_t.item(), rld=rld_t.item(), vsd=vsd_t.item(), vlad=vlad_t.item(),
        total=total.item(),
    )
    return breakdown, total
