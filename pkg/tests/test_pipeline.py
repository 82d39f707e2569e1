"""Training step, optimizer, evaluation, and the two training entry points."""
import json
from dataclasses import replace

import numpy as np
import pytest

from common import tiny_data, tiny_model
from matchkd.data import generate_example, make_batches
from matchkd.losses import LossWeights
from matchkd.model import init_params
from matchkd.pipeline import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DistillConfig, DivergenceError, MetricsRecord,
    TrainState, adam_update, clone_params, decode_vision_tokens, distill_step,
    evaluate, sft_weights, train_distill, train_teacher,
)
from matchkd.tensor import Tensor


def tiny_distill(**overrides):
    base = dict(learning_rate=3e-3, steps=6, teacher_steps=30, batch_size=4,
                seed=1, eval_interval=3)
    base.update(overrides)
    return DistillConfig(**base)


def first_batch(data_cfg, batch_size=4):
    return next(make_batches(data_cfg, "train", batch_size))


def test_sft_weights_keep_temperature():
    w = sft_weights(LossWeights(alpha=0.25, beta=2.0, gamma=3.0, temperature=1.5))
    assert (w.alpha, w.beta, w.gamma, w.temperature) == (1.0, 0.0, 0.0, 1.5)


def test_clone_params_is_independent():
    params = init_params(tiny_model(), seed=1)
    cloned = clone_params(params)
    cloned.tensors["tok_emb"].values[0, 0] += 1.0
    assert params.tensors["tok_emb"].values[0, 0] != cloned.tensors["tok_emb"].values[0, 0]
    assert all(t.requires_grad for t in cloned.tensors.values())


def test_distill_step_rejects_empty_batch():
    params = init_params(tiny_model(), seed=1)
    with pytest.raises(ValueError, match="empty batch"):
        distill_step(params, params, [], tiny_distill())


def test_distill_step_grads_cover_student_parameters():
    data_cfg = tiny_data()
    teacher = init_params(tiny_model(), seed=1)
    student = init_params(tiny_model(role="student", pool_grid=(1, 2)), seed=2)
    breakdown, grads = distill_step(teacher, student, first_batch(data_cfg), tiny_distill())
    assert set(grads) == set(student.tensors)
    assert all(np.isfinite(g).all() for g in grads.values())
    assert np.abs(grads["lm_head.weight"]).max() > 0.0
    for value in (breakdown.sup, breakdown.rld, breakdown.vsd, breakdown.vlad):
        assert value >= 0.0


def test_distill_step_leaves_teacher_untouched():
    data_cfg = tiny_data()
    teacher = init_params(tiny_model(), seed=1)
    student = init_params(tiny_model(role="student"), seed=2)
    before = {n: t.values.copy() for n, t in teacher.tensors.items()}
    distill_step(teacher, student, first_batch(data_cfg), tiny_distill())
    for name, t in teacher.tensors.items():
        assert np.array_equal(t.values, before[name])
        assert np.array_equal(t.grad, np.zeros_like(t.values))


def test_supervision_only_weights_skip_teacher_terms():
    data_cfg = tiny_data()
    teacher = init_params(tiny_model(), seed=1)
    student = init_params(tiny_model(role="student"), seed=2)
    cfg = tiny_distill(weights=sft_weights(LossWeights()))
    breakdown, _ = distill_step(teacher, student, first_batch(data_cfg), cfg)
    assert breakdown.rld == 0.0
    assert breakdown.vsd == 0.0
    assert breakdown.vlad == 0.0
    assert breakdown.total == breakdown.sup


def test_pair_checks():
    data_cfg = tiny_data()
    teacher = init_params(tiny_model(), seed=1)
    other_vocab = init_params(tiny_model(role="student", vocab_size=13), seed=2)
    with pytest.raises(ValueError, match="share a vocabulary"):
        distill_step(teacher, other_vocab, first_batch(data_cfg), tiny_distill())
    small_teacher = init_params(tiny_model(patch_grid=(1, 2), patch_dim=4), seed=1)
    wide_student = init_params(tiny_model(role="student"), seed=2)
    with pytest.raises(ValueError, match="more than"):
        distill_step(small_teacher, wide_student, first_batch(data_cfg), tiny_distill())


def test_mismatched_widths_only_break_hidden_routes():
    data_cfg = tiny_data()
    teacher = init_params(tiny_model(), seed=1)
    narrow = init_params(tiny_model(role="student", hidden_dim=6), seed=2)
    batch = first_batch(data_cfg, 2)
    breakdown, _ = distill_step(teacher, narrow, batch, tiny_distill())
    assert np.isfinite(breakdown.total)
    with pytest.raises(ValueError, match="equal hidden widths"):
        distill_step(teacher, narrow, batch, tiny_distill(matcher="hungarian_hidden"))
    with pytest.raises(ValueError, match="equal widths"):
        distill_step(teacher, narrow, batch, tiny_distill(vsd_objective="hidden"))


def test_adam_update_matches_hand_computation():
    params = init_params(tiny_model(), seed=1)
    state = TrainState.for_params(params)
    name = "ln_f.bias"
    grads = {n: np.zeros_like(t.values) for n, t in params.tensors.items()}
    g = np.full_like(params.tensors[name].values, 0.5)
    grads[name] = g
    lr = 0.1
    p = params.tensors[name].values.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t in (1, 2):
        adam_update(state, params, grads, lr)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        mhat = m / (1.0 - ADAM_BETA1**t)
        vhat = v / (1.0 - ADAM_BETA2**t)
        p = p - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        assert state.step == t
        assert np.allclose(params.tensors[name].values, p, atol=1e-15)
    untouched = params.tensors["tok_emb"].values
    assert np.array_equal(untouched, init_params(tiny_model(), seed=1).tensors["tok_emb"].values)


def test_adam_update_rejects_non_finite_grads():
    params = init_params(tiny_model(), seed=1)
    state = TrainState.for_params(params)
    grads = {n: np.zeros_like(t.values) for n, t in params.tensors.items()}
    grads["tok_emb"][0, 0] = np.nan
    with pytest.raises(DivergenceError, match="non-finite gradient"):
        adam_update(state, params, grads, 0.01)


def test_evaluate_against_labels():
    data_cfg = tiny_data()
    params = init_params(tiny_model(), seed=1)
    record = evaluate(params, data_cfg, "eval", None, tiny_distill(), step=7, elapsed_ms=12.5)
    assert record.step == 7
    assert record.ms == 12.5
    assert record.rld == 0.0 and record.vsd == 0.0 and record.vlad == 0.0
    assert record.eval_ce == record.sup
    assert 0.0 <= record.agreement <= 1.0
    assert 0.0 <= record.exact_match <= 1.0
    w = LossWeights()
    mirrored = ((w.alpha * record.sup + (1.0 - w.alpha) * record.rld)
                + w.beta * record.vsd) + w.gamma * record.vlad
    assert record.total == mirrored


def test_evaluate_against_self_reference():
    data_cfg = tiny_data()
    params = init_params(tiny_model(), seed=1)
    record = evaluate(params, data_cfg, "eval", params, tiny_distill())
    assert record.agreement == 1.0
    assert record.rld == 0.0
    assert record.vsd == 0.0
    assert abs(record.vlad) < 1e-12


def test_evaluate_checks_model_against_data():
    params = init_params(tiny_model(), seed=1)
    with pytest.raises(ValueError, match="patch_grid"):
        evaluate(params, tiny_data(grid=(2, 3), patch_dim=4), "eval")
    with pytest.raises(ValueError, match="vocab_size"):
        evaluate(params, tiny_data(num_symbols=20), "eval")
    with pytest.raises(ValueError, match="vocab_size"):
        evaluate(params, tiny_data(prompt_ids=(13, 14)), "eval")


def test_train_teacher_learns_and_reports():
    data_cfg = tiny_data()
    cfg = tiny_distill()
    params, records = train_teacher(tiny_model(), data_cfg, cfg)
    assert [r.step for r in records] == [0, 3, 6, 9, 12, 15, 18, 21, 24, 27, 30]
    assert records[-1].eval_ce < records[0].eval_ce
    assert records[-1].ms >= records[0].ms >= 0.0
    assert params.config.role == "teacher"


def test_train_distill_is_reproducible_and_pure():
    data_cfg = tiny_data()
    cfg = tiny_distill()
    teacher, _ = train_teacher(tiny_model(), data_cfg, tiny_distill(teacher_steps=12))
    student_init = init_params(tiny_model(role="student", pool_grid=(1, 2)), cfg.seed)
    frozen = {n: t.values.copy() for n, t in student_init.tensors.items()}
    first, records_a = train_distill(teacher, student_init, data_cfg, cfg)
    second, records_b = train_distill(teacher, student_init, data_cfg, cfg)
    for name in first.tensors:
        assert np.array_equal(first.tensors[name].values, second.tensors[name].values)
        assert np.array_equal(student_init.tensors[name].values, frozen[name])
    assert len(records_a) == len(records_b)
    for a, b in zip(records_a, records_b):
        assert json.loads(a.to_json()) | {"ms": 0} == json.loads(b.to_json()) | {"ms": 0}


def test_trained_teacher_masters_the_task(default_teacher):
    record = default_teacher["records"][-1]
    assert record.exact_match >= 0.9
    assert record.agreement >= 0.95
    assert record.eval_ce < 0.05


def test_decode_vision_tokens_ordering():
    data_cfg = tiny_data()
    params = init_params(tiny_model(), seed=3)
    ex = generate_example(data_cfg, "eval", 0)
    table = decode_vision_tokens(params, ex, k=4)
    assert len(table) == 4
    for row in table:
        logits = [logit for _, logit in row]
        assert logits == sorted(logits, reverse=True)
    with pytest.raises(ValueError, match="k must lie"):
        decode_vision_tokens(params, ex, k=0)
    params.tensors["lm_head.weight"].values[...] = 0.0
    flat = decode_vision_tokens(params, ex, k=3)
    assert [tok for tok, _ in flat[0]] == [0, 1, 2]


def test_metrics_record_json_field_order():
    record = MetricsRecord(step=5, sup=1.0, rld=0.5, vsd=0.25, vlad=0.1,
                           total=2.0, eval_ce=1.0, agreement=0.75, exact_match=0.5, ms=42.0)
    doc = json.loads(record.to_json())
    assert list(doc) == ["step", "sup", "rld", "vsd", "vlad", "total",
                        "eval_ce", "agreement", "exact_match", "ms"]
    assert doc["agreement"] == 0.75


def test_distill_config_validation():
    with pytest.raises(ValueError, match="matcher"):
        tiny_distill(matcher="greedy")
    with pytest.raises(ValueError, match="vsd_objective"):
        tiny_distill(vsd_objective="cosine")
    with pytest.raises(ValueError, match="learning_rate"):
        tiny_distill(learning_rate=0.0)
    with pytest.raises(ValueError, match="positive"):
        tiny_distill(steps=0)
    defaults = DistillConfig()
    assert defaults.matcher == "hungarian_logits"
    assert defaults.vsd_objective == "logits"
    assert defaults.learning_rate == 3e-3
    assert defaults.steps == 2000
    assert defaults.teacher_steps == 3000
    assert defaults.batch_size == 8
    assert defaults.seed == 1
    assert defaults.eval_interval == 500
