"""Cost construction, the two assignment solvers, and matching strategies."""
import numpy as np
import pytest

from matchkd.assignment import (
    BRUTE_FORCE_LIMIT, MATCH_STRATEGIES, Assignment, CostMatrix, PooledTokens,
    brute_force_lap, count_optimal_assignments, manhattan_cost, match_vision_tokens,
    pool_match, solve_lap,
)
from matchkd.model import ModelOutputs
from matchkd.tensor import Tape, Tensor


def test_manhattan_cost_oracle():
    teacher = Tensor([[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]])
    student = Tensor([[1.0, 1.0], [0.0, 0.0]])
    cost = manhattan_cost(teacher, student)
    assert np.array_equal(cost.costs, np.array([[1.0, 1.0], [3.0, 3.0], [1.0, 1.0]]))
    assert cost.rows == 3 and cost.cols == 2


def test_manhattan_cost_shape_error():
    with pytest.raises(ValueError, match="incompatible"):
        manhattan_cost(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_cost_matrix_validation():
    with pytest.raises(ValueError, match="2-D"):
        CostMatrix(np.zeros(3))
    with pytest.raises(ValueError, match="non-empty"):
        CostMatrix(np.zeros((0, 2)))
    with pytest.raises(ValueError, match="non-finite"):
        CostMatrix(np.array([[1.0, np.inf]]))
    with pytest.raises(ValueError, match="negative"):
        CostMatrix(np.array([[1.0, -0.5]]))


def test_square_oracle():
    cost = CostMatrix(np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]))
    fast = solve_lap(cost)
    slow = brute_force_lap(cost)
    assert fast.total_cost == 5.0
    assert fast.pairs == [(0, 1), (1, 0), (2, 2)]
    assert slow.pairs == fast.pairs
    assert count_optimal_assignments(cost) == 1


def test_rectangular_exhausts_smaller_side():
    wide = CostMatrix(np.array([[5.0, 1.0, 9.0, 2.0]]))
    assert solve_lap(wide).pairs == [(0, 1)]
    tall = CostMatrix(np.array([[3.0], [1.0], [2.0]]))
    a = solve_lap(tall)
    assert a.pairs == [(1, 0)]
    assert a.total_cost == 1.0


def test_solver_parity_random_sweep():
    rng = np.random.default_rng(11)
    for _ in range(60):
        r = int(rng.integers(1, 7))
        c = int(rng.integers(1, 7))
        costs = rng.uniform(0.0, 10.0, size=(r, c))
        cost = CostMatrix(costs)
        fast = solve_lap(cost)
        slow = brute_force_lap(cost)
        assert abs(fast.total_cost - slow.total_cost) < 1e-9
        n = min(r, c)
        assert len(fast.pairs) == n
        assert fast.pairs == sorted(fast.pairs)
        assert len({p[0] for p in fast.pairs}) == n
        assert len({p[1] for p in fast.pairs}) == n
        if count_optimal_assignments(cost) == 1:
            assert set(fast.pairs) == set(slow.pairs)


def test_brute_force_enumeration_bound():
    big = CostMatrix(np.ones((BRUTE_FORCE_LIMIT + 1, BRUTE_FORCE_LIMIT + 1)))
    with pytest.raises(ValueError, match="enumeration bound"):
        brute_force_lap(big)
    with pytest.raises(ValueError, match="too large"):
        count_optimal_assignments(big)


def test_tie_counting():
    assert count_optimal_assignments(CostMatrix(np.zeros((2, 2)))) == 2
    assert count_optimal_assignments(CostMatrix(np.zeros((2, 3)))) == 6
    distinct = CostMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert count_optimal_assignments(distinct) == 1


def test_pool_match_windows():
    tokens = Tensor(np.array([[1.0], [2.0], [4.0], [8.0], [16.0]]))
    pooled = pool_match(tokens, 3)
    assert np.allclose(pooled.values[:, 0], [1.5, 4.666666666666667, 12.0], atol=1e-12)
    assert np.allclose(pool_match(tokens, 5).values, tokens.values, atol=0)
    with pytest.raises(ValueError, match="target length"):
        pool_match(tokens, 0)
    with pytest.raises(ValueError, match="target length"):
        pool_match(tokens, 6)


def _fake_outputs(n_tokens, hidden_dim, vocab, seed):
    rng = np.random.default_rng(seed)
    hidden = Tensor(rng.normal(size=(n_tokens, hidden_dim)))
    return ModelOutputs(
        vision_hidden=hidden,
        language_hidden=Tensor(rng.normal(size=(4, hidden_dim))),
        vision_logits=Tensor(rng.normal(size=(n_tokens, vocab))),
        response_logits=Tensor(rng.normal(size=(3, vocab))),
        full_hidden=hidden,
    )


def test_match_strategies():
    teacher = _fake_outputs(6, 5, 9, seed=1)
    student = _fake_outputs(4, 5, 9, seed=2)

    by_logits = match_vision_tokens(teacher, student, "hungarian_logits")
    assert isinstance(by_logits, Assignment)
    assert len(by_logits.pairs) == 4
    expected = solve_lap(manhattan_cost(teacher.vision_logits, student.vision_logits))
    assert by_logits.pairs == expected.pairs

    by_hidden = match_vision_tokens(teacher, student, "hungarian_hidden")
    assert isinstance(by_hidden, Assignment)

    pooled = match_vision_tokens(teacher, student, "pooling")
    assert isinstance(pooled, PooledTokens)
    assert pooled.hidden.shape == (4, 5)
    assert pooled.logits.shape == (4, 9)
    assert pooled.pairs == [(i, i) for i in range(4)]


def test_match_hidden_width_mismatch():
    teacher = _fake_outputs(6, 5, 9, seed=1)
    student = _fake_outputs(4, 3, 9, seed=2)
    with pytest.raises(ValueError, match="equal hidden widths"):
        match_vision_tokens(teacher, student, "hungarian_hidden")


def test_match_unknown_strategy():
    teacher = _fake_outputs(3, 4, 5, seed=1)
    with pytest.raises(ValueError, match="unknown matching strategy"):
        match_vision_tokens(teacher, teacher, "nearest")
    assert "hungarian_logits" in MATCH_STRATEGIES


def test_matching_is_not_recorded():
    teacher = _fake_outputs(5, 4, 7, seed=3)
    student = _fake_outputs(3, 4, 7, seed=4)
    with Tape() as tape:
        match_vision_tokens(teacher, student, "pooling")
        match_vision_tokens(teacher, student, "hungarian_logits")
        assert tape.nodes == []


def test_self_match_is_identity_with_zero_cost():
    out = _fake_outputs(5, 4, 7, seed=9)
    match = match_vision_tokens(out, out, "hungarian_logits")
    assert match.pairs == [(i, i) for i in range(5)]
    assert match.total_cost == 0.0
