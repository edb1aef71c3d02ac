import numpy as np
import pytest
from scipy import stats

from pscr import data
from pscr import tensor as T
from pscr.errors import ConfigurationError, NonFiniteError, ValidationError
from pscr.model import BackboneSpec, Mode, build_bundle, fuse, predict_relative, regress
from pscr.preprocessing import OverlapSample, Resize, SamplerSpec
from pscr.training import (
    Arm, DirectBatch, PairBatch, ScoredSet, TrainConfig, contrastive_loss, direct_loss, make_pairs,
    pair_indices, train,
)

SPEC = BackboneSpec(channels=(4, 8))
SAMPLER = SamplerSpec((0, 8), 8)


def _images(rng, n, side=16):
    return [rng.random((3, side, side)) for _ in range(n)]


def _features(rng, n, d=4):
    return {f"k{i}": rng.standard_normal(d) for i in range(n)}


# ---- pairing

def test_two_item_pairing_is_forced():
    for epoch in range(5):
        assert sorted(pair_indices(2, 0, epoch)) == [(0, 1), (1, 0)]


def test_pairing_deterministic_and_epoch_dependent():
    assert pair_indices(9, 4, 2) == pair_indices(9, 4, 2)
    assert pair_indices(9, 4, 2) != pair_indices(9, 4, 3)


def test_every_item_queries_once_and_no_self_pairs():
    pairs = pair_indices(7, 1, 0, exemplars_per_query=3)
    assert sorted(q for q, _ in pairs) == sorted(list(range(7)) * 3)
    assert all(q != e for q, e in pairs)
    with pytest.raises(ValidationError):
        pair_indices(3, 0, 0, exemplars_per_query=3)


def test_exemplar_draws_are_uniform():
    counts = np.zeros((5, 5))
    for epoch in range(2000):
        for q, e in pair_indices(5, 11, epoch):
            counts[q, e] += 1
    assert counts.sum() == 10_000 and np.trace(counts) == 0
    for q in range(5):
        row = np.delete(counts[q], q)
        expected = row.sum() / 4
        sigma = np.sqrt(row.sum() * 0.25 * 0.75)
        assert np.all(np.abs(row - expected) < 3 * sigma)
        assert stats.chisquare(row).pvalue > 1e-3


def test_make_pairs_batches(rng):
    ts = ScoredSet(list(range(10)), rng.random(10))
    batches = list(make_pairs(ts, 0, 0, batch_size=4))
    assert [len(b) for b in batches] == [4, 4, 2]
    b = batches[0]
    np.testing.assert_array_equal(b.targets, ts.scores[b.query_index] - ts.scores[b.exemplar_index])


def test_pair_batch_rejects_self_pair():
    with pytest.raises(ValidationError, match="self-pair"):
        PairBatch([0], [0], ["a"], ["a"], np.zeros(1), np.zeros(1))


# ---- losses

def _contrastive_bundle(seed=0):
    return build_bundle(SPEC, OverlapSample(SAMPLER), Mode.CONTRASTIVE, seed=seed, head_hidden=8)


def test_contrastive_loss_zero_head(rng):
    b = _contrastive_bundle()
    b.head.zero_()
    imgs = _images(rng, 3)
    sq, se = np.array([4.0, 1.0, 2.0]), np.array([1.0, 3.0, 2.5])
    batch = PairBatch([0, 1, 2], [1, 2, 0], imgs, imgs[1:] + imgs[:1], sq, se)
    assert contrastive_loss(batch, b) == pytest.approx(np.mean((sq - se) ** 2), abs=1e-15)
    tied = PairBatch([0, 1], [1, 0], imgs[:2], imgs[1::-1], np.ones(2), np.ones(2))
    assert contrastive_loss(tied, b) == 0.0


def test_contrastive_loss_hand_composed(rng):
    b = _contrastive_bundle(4)
    imgs = _images(rng, 3)
    sq, se = rng.random(3) * 4, rng.random(3) * 4
    batch = PairBatch([0, 1, 2], [2, 0, 1], imgs, [imgs[2], imgs[0], imgs[1]], sq, se)
    preds = [predict_relative(q, e, b) for q, e in zip(batch.queries, batch.exemplars)]
    expected, _ = T.mse_loss(np.array(preds), sq - se)
    assert contrastive_loss(batch, b) == pytest.approx(expected, abs=1e-12)


def test_direct_loss_zero_head_and_composition(rng):
    b = build_bundle(SPEC, Resize(8), Mode.DIRECT, seed=2, head_hidden=8)
    imgs = _images(rng, 4)
    s = rng.random(4) * 5
    batch = DirectBatch([0, 1, 2, 3], imgs, s)
    preds = [regress(b.encode([x])[0][0], b.head) for x in imgs]
    assert direct_loss(batch, b) == pytest.approx(T.mse_loss(np.array(preds), s)[0], abs=1e-12)
    b.head.zero_()
    assert direct_loss(batch, b) == pytest.approx(np.mean(s ** 2), abs=1e-14)


def test_bias_only_fit_reaches_zero(rng):
    feats = _features(rng, 5)
    b = build_bundle(BackboneSpec("precomputed", feature_dim=4), None, Mode.DIRECT, features=feats)
    b.head.zero_()
    batch = DirectBatch(list(range(5)), list(feats), np.full(5, 3.7))
    bias = b.head.fc2.bias
    cfg = T.AdamConfig(learning_rate=0.05, weight_decay=0.0)
    for _ in range(2000):
        T.zero_grads(b.parameters())
        direct_loss(batch, b, backward=True)
        T.adam_step([bias], cfg)
    assert direct_loss(batch, b) < 1e-10


def test_mode_mismatch(rng):
    b = _contrastive_bundle()
    with pytest.raises(ConfigurationError):
        direct_loss(DirectBatch([0], _images(rng, 1), np.zeros(1)), b)


# ---- train

def test_zero_lr_direct_history_constant(rng):
    ts = ScoredSet(_images(rng, 6), rng.random(6) * 4)
    cfg = TrainConfig(batch_size=4, epochs=4, adam=T.AdamConfig(learning_rate=0.0), arm=Arm.FR)
    res = train(ts, cfg, backbone=SPEC, preprocessor=Resize(8), head_hidden=8)
    assert len(set(res.history)) == 1


def test_zero_lr_two_item_contrastive_constant(rng):
    ts = ScoredSet(_images(rng, 2), [1.0, 4.0])
    cfg = TrainConfig(epochs=4, adam=T.AdamConfig(learning_rate=0.0))
    res = train(ts, cfg, backbone=SPEC, sampler=SAMPLER, head_hidden=8)
    assert len(set(res.history)) == 1
    init = build_bundle(SPEC, OverlapSample(SAMPLER), Mode.CONTRASTIVE, seed=0, head_hidden=8).state()
    assert all(np.array_equal(init[k], v) for k, v in res.bundle.state().items())


def test_same_seed_bitwise_identical(rng):
    ts = ScoredSet(_images(rng, 5), rng.random(5) * 4)
    cfg = TrainConfig(batch_size=3, epochs=3, seed=9, adam=T.AdamConfig(learning_rate=1e-3))
    a = train(ts, cfg, backbone=SPEC, sampler=SAMPLER, head_hidden=8)
    b = train(ts, cfg, backbone=SPEC, sampler=SAMPLER, head_hidden=8)
    assert a.history == b.history
    assert all(np.array_equal(a.bundle.state()[k], v) for k, v in b.bundle.state().items())


def test_history_is_epoch_mean_of_squared_errors(rng):
    ts = ScoredSet(_images(rng, 4), [1.0, 2.0, 3.0, 5.0])
    cfg = TrainConfig(batch_size=3, epochs=1, adam=T.AdamConfig(learning_rate=0.0))
    res = train(ts, cfg, backbone=SPEC, sampler=SAMPLER, head_hidden=8)
    sq = []
    for batch in make_pairs(ts, 0, 0, batch_size=3):
        preds = [predict_relative(q, e, res.bundle) for q, e in zip(batch.queries, batch.exemplars)]
        sq.extend((np.array(preds) - batch.targets) ** 2)
    assert res.history[0] == pytest.approx(np.mean(sq), abs=1e-12)


def test_freeze_backbone_keeps_backbone(rng):
    ts = ScoredSet(_images(rng, 4), rng.random(4) * 4)
    cfg = TrainConfig(epochs=2, adam=T.AdamConfig(learning_rate=1e-2), freeze_backbone=True)
    res = train(ts, cfg, backbone=SPEC, sampler=SAMPLER, head_hidden=8)
    init = build_bundle(SPEC, OverlapSample(SAMPLER), Mode.CONTRASTIVE, seed=0, head_hidden=8).state()
    state = res.bundle.state()
    assert all(np.array_equal(init[k], state[k]) for k in state if k.startswith("backbone"))
    assert any(not np.array_equal(init[k], state[k]) for k in state if k.startswith("head"))


def test_early_stopping(rng):
    ts = ScoredSet(_images(rng, 3), [1.0, 2.0, 3.0])
    cfg = TrainConfig(epochs=50, adam=T.AdamConfig(learning_rate=0.0), arm=Arm.FR, patience=3)
    res = train(ts, cfg, backbone=SPEC, preprocessor=Resize(8), head_hidden=8)
    assert res.stopped_early and len(res.history) == 4


def test_nonfinite_loss_reports_position(rng):
    ts = ScoredSet(_images(rng, 3), [1.0, np.inf, 3.0])
    cfg = TrainConfig(epochs=2, arm=Arm.FR)
    with pytest.raises(NonFiniteError, match="epoch 0, batch 0"):
        train(ts, cfg, backbone=SPEC, preprocessor=Resize(8), head_hidden=8)


def test_one_small_step_lowers_loss(rng):
    ts = ScoredSet(_images(rng, 2), [0.5, 4.5])
    cfg = TrainConfig(epochs=2, patience=0, adam=T.AdamConfig(learning_rate=1e-4, weight_decay=0.0))
    res = train(ts, cfg, backbone=SPEC, sampler=SAMPLER, head_hidden=8)
    assert res.history[1] < res.history[0]


def test_overfit_pair_reconstructs_query_score(rng):
    feats = _features(rng, 2, d=6)
    ts = ScoredSet(list(feats), [1.5, 4.0])
    cfg = TrainConfig(epochs=1500, patience=0, adam=T.AdamConfig(learning_rate=1e-2, weight_decay=0.0))
    res = train(ts, cfg, backbone=BackboneSpec("precomputed", feature_dim=6), features=feats)
    assert res.history[-1] < 1e-8
    b = res.bundle
    assert predict_relative("k0", "k1", b) + 4.0 == pytest.approx(1.5, abs=1e-3)
    assert regress(fuse(feats["k1"], feats["k0"]), b.head) + 1.5 == pytest.approx(4.0, abs=1e-3)


def test_arm_equivalence_whole_image(rng):
    ts = ScoredSet(_images(rng, 4), [1.0, 2.0, 4.0, 5.0])
    cfg_cr = TrainConfig(batch_size=2, epochs=3, seed=5, adam=T.AdamConfig(1e-3), arm=Arm.FR_CR)
    cfg_ps = TrainConfig(batch_size=2, epochs=3, seed=5, adam=T.AdamConfig(1e-3), arm=Arm.FR_PSCR)
    a = train(ts, cfg_cr, backbone=SPEC, preprocessor=Resize(16), head_hidden=8)
    b = train(ts, cfg_ps, backbone=SPEC, sampler=SamplerSpec((0,), 16), head_hidden=8)
    np.testing.assert_allclose(a.history, b.history, rtol=0, atol=1e-12)


def test_sixteen_image_loss_drops_tenfold(tmp_path):
    m = data.gen_synthetic(data.SyntheticSpec(count=16, side=32, seed=7), tmp_path)
    ts = ScoredSet(m.images(), m.scores[:, 0])
    cfg = TrainConfig(epochs=200, seed=7, adam=T.AdamConfig(1e-3), patience=0)
    res = train(ts, cfg, sampler=SamplerSpec((0, 8, 16), 16))
    assert min(res.history) * 10 <= res.history[0]
