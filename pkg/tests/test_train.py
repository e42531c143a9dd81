import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmgraph.embeddings import SynthConfig, synth_dataset
from mmgraph.model import ModelConfig, init_params
from mmgraph.optim import lr_at
from mmgraph.train import (
    Metrics,
    TrainConfig,
    ablate,
    ablation_table,
    confusion_matrix,
    cross_entropy,
    evaluate,
    metrics_from_predictions,
    split_few_shot,
    split_unseen,
    stratified_split,
    train,
)


def test_cross_entropy_examples():
    assert cross_entropy([0.0, 0.0, 0.0, 0.0], 0).item() == pytest.approx(math.log(4), abs=1e-15)
    assert cross_entropy([100.0, 0.0, 0.0, 0.0], 0).item() == pytest.approx(0.0, abs=1e-40)
    expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    assert cross_entropy([1.0, 2.0, 3.0], 2).item() == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.4076, abs=1e-4)


def test_cross_entropy_label_range():
    for bad in (-1, 3):
        with pytest.raises(ValueError):
            cross_entropy([1.0, 2.0, 3.0], bad)


def test_cross_entropy_large_logits_stay_finite():
    assert math.isfinite(cross_entropy([1e4, -1e4], 1).item())


def test_metrics_crafted_confusion():
    m = Metrics(np.array([[2, 1], [0, 3]]))
    np.testing.assert_allclose(m.precision, [1.0, 0.75], atol=1e-15)
    np.testing.assert_allclose(m.recall, [2 / 3, 1.0], atol=1e-15)
    np.testing.assert_allclose(m.f1, [0.8, 6 / 7], atol=1e-15)
    assert m.accuracy == pytest.approx(5 / 6)
    assert m.macro("f1") == pytest.approx((0.8 + 6 / 7) / 2)


def test_metrics_perfect_predictions():
    y = [0, 1, 2, 3, 1]
    m = metrics_from_predictions(y, y, 4)
    assert m.accuracy == 1.0
    assert (m.confusion == np.diag(np.diag(m.confusion))).all()
    for name in ("precision", "recall", "f1", "class_accuracy"):
        assert m.macro(name) == 1.0


def test_metrics_constant_prediction():
    m = metrics_from_predictions([0, 1, 2, 3] * 5, [2] * 20, 4)
    assert m.accuracy == 0.25
    assert m.macro("recall") == 0.25
    assert m.precision.tolist() == [0.0, 0.0, 0.25, 0.0]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=40))
def test_metric_identities(k, pairs):
    y = [a % k for a, _ in pairs]
    p = [b % k for _, b in pairs]
    m = metrics_from_predictions(y, p, k)
    assert m.confusion.sum() == len(pairs)
    assert m.accuracy == np.trace(m.confusion) / len(pairs)
    for arr in (m.precision, m.recall, m.f1):
        assert ((0 <= arr) & (arr <= 1)).all()
    assert m.macro("f1") == pytest.approx(float(np.mean(m.f1)), abs=1e-15)
    d = m.to_dict()
    assert d["count"] == len(pairs) and len(d["confusion"]) == k


def test_confusion_layout():
    assert confusion_matrix([0, 0, 1], [1, 0, 1], 2).tolist() == [[1, 1], [0, 1]]


# splits ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_set():
    return synth_dataset(SynthConfig(num_classes=4, episodes_per_class=5, frames=3, patches=8, d_v=6, d_t=6))


def test_stratified_split(small_set):
    labels = [ep.class_id for ep in small_set]
    keep, held = stratified_split(labels, 0.2, 3)
    assert sorted(keep + held) == list(range(len(labels)))
    assert sorted(labels[i] for i in held) == [0, 1, 2, 3]
    assert stratified_split(labels, 0.2, 3) == (keep, held)
    with pytest.raises(ValueError):
        stratified_split([0, 1], 0.5, 0)


def test_few_shot_split(small_set):
    support, query = split_few_shot(small_set, 1, seed=0)
    assert len(support) == 4 and len(query) == 16
    assert sorted(ep.class_id for ep in support) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        split_few_shot(small_set, 5, seed=0)


def test_unseen_split(small_set):
    train_set, eval_set = split_unseen(small_set, [3], seed=0)
    assert {ep.class_id for ep in train_set} == {0, 1, 2}
    assert {ep.class_id for ep in eval_set} == {0, 1, 2, 3}
    assert sum(ep.class_id == 3 for ep in eval_set) == 5
    assert not {id(ep) for ep in train_set} & {id(ep) for ep in eval_set}
    with pytest.raises(ValueError):
        split_unseen(small_set, [0, 1, 2, 3])
    with pytest.raises(ValueError):
        split_unseen(small_set, [])


# training --------------------------------------------------------------------------


def quick_cfg(**kw):
    base = dict(epochs=3, warmup=1, batch_size=4, model=ModelConfig(hidden=8))
    base.update(kw)
    return TrainConfig(**base)


def test_zero_lr_freezes_parameters(small_set):
    cfg = quick_cfg(epochs=2, base_lr=0.0, variant="visual_only")
    res = train(small_set, cfg)
    start = init_params(6, 6, 4, cfg.model, "visual_only", seed=cfg.seed)
    for name, arr in start.arrays().items():
        assert res.params[name].data.tobytes() == arr.tobytes()
    assert 0.0 <= res.val_metrics.accuracy <= 1.0


def test_training_is_deterministic(small_set):
    a = train(small_set, quick_cfg(base_lr=1e-2))
    b = train(small_set, quick_cfg(base_lr=1e-2))
    assert a.history_dicts() == b.history_dicts()
    assert a.val_metrics.to_dict() == b.val_metrics.to_dict()
    for name in a.params.tensors:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


def test_logged_rates_follow_schedule(small_set):
    cfg = quick_cfg(epochs=4, warmup=2, base_lr=1e-4)
    res = train(small_set, cfg)
    for rec in res.history:
        assert rec.lr == lr_at(cfg.schedule, rec.epoch)
        assert rec.step_lrs == [rec.lr] * math.ceil(16 / 4)


def test_evaluate_checks_dimensions(small_set):
    params = init_params(5, 6, 4, ModelConfig(hidden=8))
    with pytest.raises(ValueError):
        evaluate(params, small_set)
    with pytest.raises(ValueError):
        evaluate(init_params(6, 6, 4, ModelConfig(hidden=8)), [])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    assert TrainConfig(epochs=3, warmup=5).schedule.warmup_epochs == 2
    with pytest.raises(ValueError):
        TrainConfig(variant="bogus")


def test_ablation_with_zero_lr_is_near_chance(small_set):
    rows = ablate(small_set, quick_cfg(epochs=2, base_lr=0.0), seeds=(0,))
    assert [r.variant for r in rows] == ["visual_only", "plus_text", "static_graph", "full"]
    for r in rows:
        assert r.accuracy <= 0.75
    table = ablation_table(rows)
    assert table.count("\n") == 6 and "Full model" in table
