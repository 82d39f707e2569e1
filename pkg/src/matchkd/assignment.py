"""Unbalanced one-to-one token matching by minimum total cost.

solve_lap is a rectangular shortest-augmenting-path solver (row and column
potentials, one virtual column); brute_force_lap enumerates every injection
and exists purely as an independent check on solve_lap. Both break ties the
same way so their answers can be compared directly.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .tensor import Tensor, no_grad
from . import ops

__all__ = [
    "CostMatrix", "Assignment", "PooledTokens", "manhattan_cost",
    "solve_lap", "brute_force_lap", "count_optimal_assignments",
    "pool_match", "match_vision_tokens", "MATCH_STRATEGIES",
]

MATCH_STRATEGIES = ("hungarian_logits", "hungarian_hidden", "pooling")

BRUTE_FORCE_LIMIT = 8


@dataclass
class CostMatrix:
    """Nonnegative pairwise costs, teacher tokens as rows, student as columns."""

    costs: np.ndarray

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=np.float64)
        if self.costs.ndim != 2 or 0 in self.costs.shape:
            raise ValueError(f"cost matrix must be 2-D and non-empty, got shape {self.costs.shape}")
        if not np.isfinite(self.costs).all():
            raise ValueError("cost matrix contains non-finite entries")
        if (self.costs < 0.0).any():
            raise ValueError("cost matrix contains negative entries")

    @property
    def rows(self) -> int:
        return self.costs.shape[0]

    @property
    def cols(self) -> int:
        return self.costs.shape[1]


@dataclass
class Assignment:
    """One-to-one pairs (row, col), sorted by row, exhausting the smaller side."""

    pairs: list[tuple[int, int]]
    total_cost: float


@dataclass
class PooledTokens:
    """Teacher vision tokens averaged down to the student's token count.

    Position i of the pooled output corresponds to student token i, so the
    implied pairing is the identity.
    """

    hidden: Tensor
    logits: Tensor

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(i, i) for i in range(self.hidden.shape[0])]


def manhattan_cost(teacher_logits: Tensor, student_logits: Tensor) -> CostMatrix:
    """L1 distance between every teacher and student logit row."""
    t = teacher_logits.values if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    s = student_logits.values if isinstance(student_logits, Tensor) else np.asarray(student_logits)
    if t.ndim != 2 or s.ndim != 2 or t.shape[1] != s.shape[1]:
        raise ValueError(f"manhattan_cost: incompatible shapes {t.shape} and {s.shape}")
    costs = np.abs(t[:, None, :] - s[None, :, :]).sum(axis=2)
    return CostMatrix(costs)


def _lap_rows(costs: np.ndarray) -> np.ndarray:
    """Assign every row of an n x m matrix (n <= m) to a distinct column.

    Shortest augmenting paths with dual potentials; column m is virtual and
    hosts the row currently being inserted. Ties in the reduced cost resolve
    to the lowest column index via argmin's first-match rule.
    """
    n, m = costs.shape
    u = np.zeros(n)
    v = np.zeros(m + 1)
    owner = np.full(m + 1, -1, dtype=np.int64)  # owner[j] = row matched to column j
    for i in range(n):
        owner[m] = i
        j0 = m
        minv = np.full(m, np.inf)
        way = np.zeros(m, dtype=np.int64)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            unused = ~used[:m]
            cur = costs[i0] - u[i0] - v[:m]
            better = unused & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            reachable = np.where(unused, minv, np.inf)
            j1 = int(np.argmin(reachable))
            delta = reachable[j1]
            used_cols = np.nonzero(used)[0]
            u[owner[used_cols]] += delta
            v[used_cols] -= delta
            minv[unused] -= delta
            j0 = j1
            if owner[j0] == -1:
                break
        while j0 != m:
            j_prev = int(way[j0])
            owner[j0] = owner[j_prev]
            j0 = j_prev
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(m):
        if owner[j] >= 0:
            row_to_col[owner[j]] = j
    return row_to_col


def _selected_total(costs: np.ndarray, pairs: list[tuple[int, int]]) -> float:
    rows = np.fromiter((p[0] for p in pairs), dtype=np.int64, count=len(pairs))
    cols = np.fromiter((p[1] for p in pairs), dtype=np.int64, count=len(pairs))
    return float(costs[rows, cols].sum())


def solve_lap(cost: CostMatrix) -> Assignment:
    """Minimum-cost one-to-one assignment exhausting the smaller side."""
    costs = cost.costs
    if costs.shape[0] <= costs.shape[1]:
        row_to_col = _lap_rows(costs)
        pairs = [(i, int(row_to_col[i])) for i in range(costs.shape[0])]
    else:
        col_to_row = _lap_rows(costs.T.copy())
        pairs = sorted((int(col_to_row[j]), j) for j in range(costs.shape[1]))
    return Assignment(pairs=pairs, total_cost=_selected_total(costs, pairs))


def _injection_sums(costs: np.ndarray):
    """Totals of every injection of the smaller side into the larger."""
    r, c = costs.shape
    if r <= c:
        perms = np.array(list(itertools.permutations(range(c), r)), dtype=np.int64)
        sums = costs[np.arange(r)[None, :], perms].sum(axis=1)
    else:
        perms = np.array(list(itertools.permutations(range(r), c)), dtype=np.int64)
        sums = costs[perms, np.arange(c)[None, :]].sum(axis=1)
    return perms, sums


def brute_force_lap(cost: CostMatrix) -> Assignment:
    """Exhaustive optimum; tie-break is the lexicographically smallest pair list."""
    costs = cost.costs
    r, c = costs.shape
    if min(r, c) > BRUTE_FORCE_LIMIT:
        raise ValueError(
            f"brute_force_lap: min dimension {min(r, c)} exceeds the "
            f"enumeration bound {BRUTE_FORCE_LIMIT}"
        )
    perms, sums = _injection_sums(costs)
    best = sums.min()
    candidates = np.nonzero(sums == best)[0]
    if r <= c:
        # Enumeration order is already lexicographic in the pair lists.
        chosen = perms[candidates[0]]
        pairs = [(i, int(chosen[i])) for i in range(r)]
    else:
        pairs = min(
            tuple(sorted((int(perms[k][j]), j) for j in range(c)))
            for k in candidates
        )
        pairs = list(pairs)
    return Assignment(pairs=pairs, total_cost=_selected_total(costs, pairs))


def count_optimal_assignments(cost: CostMatrix) -> int:
    """How many injections achieve the optimum (enumeration-bounded)."""
    costs = cost.costs
    if min(costs.shape) > BRUTE_FORCE_LIMIT:
        raise ValueError("count_optimal_assignments: matrix too large to enumerate")
    _, sums = _injection_sums(costs)
    return int((sums == sums.min()).sum())


def pool_match(teacher_tokens: Tensor, target_len: int) -> Tensor:
    """Average teacher token rows down to target_len positions."""
    n = teacher_tokens.shape[0]
    if not 1 <= target_len <= n:
        raise ValueError(f"pool_match: target length {target_len} invalid for {n} tokens")
    return ops.adaptive_avg_pool(teacher_tokens, [target_len])


def match_vision_tokens(teacher_out, student_out, strategy: str) -> Union[Assignment, PooledTokens]:
    """Pair teacher vision tokens with student vision tokens.

    hungarian_logits matches on L1 distance between LM-head logits (works for
    any pair of hidden widths); hungarian_hidden matches on L1 distance
    between hidden states and needs equal widths; pooling averages teacher
    tokens down to the student count positionally. All strategies run with
    gradient recording disabled: the match is data, not a differentiable op.
    """
    if strategy not in MATCH_STRATEGIES:
        raise ValueError(f"unknown matching strategy {strategy!r}, expected one of {MATCH_STRATEGIES}")
    with no_grad():
        if strategy == "pooling":
            n_student = student_out.vision_hidden.shape[0]
            return PooledTokens(
                hidden=pool_match(Tensor(teacher_out.vision_hidden.values), n_student),
                logits=pool_match(Tensor(teacher_out.vision_logits.values), n_student),
            )
        if strategy == "hungarian_hidden":
            dt = teacher_out.vision_hidden.shape[1]
            ds = student_out.vision_hidden.shape[1]
            if dt != ds:
                raise ValueError(
                    f"hungarian_hidden needs equal hidden widths, got teacher {dt} and student {ds}"
                )
            cost = manhattan_cost(teacher_out.vision_hidden, student_out.vision_hidden)
        else:
            cost = manhattan_cost(teacher_out.vision_logits, student_out.vision_logits)
        return solve_lap(cost)
