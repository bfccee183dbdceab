import numpy as np
import pytest

from mmotta import adapt as A
from mmotta import metrics as mt
from mmotta import model as mdl
from mmotta import streams as S


@pytest.fixture(scope="module")
def setup():
    scen = S.make_scenario(S.ScenarioConfig(n_source=240, n_target=128))
    m = mdl.init(S.model_spec_for(scen))
    S.pretrain_source(m, S.source_dataset(scen), epochs=4, lr=1e-2)
    return scen, m


def test_source_leaves_model_untouched(setup):
    scen, m = setup
    before = m.state_dict()
    records, rep, adapted = A.run_episode(m, S.target_stream(scen, S.Protocol()), A.MethodConfig("source"))
    for name, v in adapted.state_dict().items():
        np.testing.assert_array_equal(v, before[name])
    assert all(r.loss == {} for r in records)


def test_adaptation_only_touches_adaptable_parameters(setup):
    scen, m = setup
    _, _, adapted = A.run_episode(m, S.target_stream(scen, S.Protocol()), A.MethodConfig("aeo", lr=1e-2))
    before, after = m.state_dict(), adapted.state_dict()
    for name in before:
        changed = not np.array_equal(before[name], after[name])
        assert changed == (not name.startswith("head")), name


def test_predictions_are_recorded_before_update(setup):
    scen, m = setup
    batch = next(S.target_stream(scen, S.Protocol()))
    state = A.AdaptState(m.copy(), A.MethodConfig("tent", lr=1e-1))
    expect = mdl.forward(state.model, batch.features).fused_probs.value.argmax(1)
    rec = A.adapt_batch(state, batch)
    np.testing.assert_array_equal(rec.preds, expect)
    assert rec.loss["tent"] > 0


def test_runs_are_deterministic(setup):
    scen, m = setup
    cfg = A.MethodConfig("aeo", lr=1e-3)
    r1, _, _ = A.run_episode(m, S.target_stream(scen, S.Protocol()), cfg)
    r2, _, _ = A.run_episode(m, S.target_stream(scen, S.Protocol()), cfg)
    assert [x.to_dict() for x in r1] == [x.to_dict() for x in r2]


def test_record_roundtrip(setup):
    scen, m = setup
    recs, _, _ = A.run_episode(m, S.target_stream(scen, S.Protocol()), A.MethodConfig("aeo"), eta=0.5)
    d = recs[0].to_dict()
    assert A.BatchRecord.from_dict(d).to_dict() == d
    assert "detected_known" in d


def test_non_finite_loss_skips_update(setup, monkeypatch):
    scen, m = setup
    monkeypatch.setattr(A, "_method_loss", lambda out, cfg: (A.dc.constant(np.nan), {"total": np.nan}))
    recs, rep, adapted = A.run_episode(m, S.target_stream(scen, S.Protocol()), A.MethodConfig("aeo"))
    assert rep.skipped_batches == len(recs) and all(r.skipped for r in recs)
    np.testing.assert_array_equal(adapted.fusion.weight.value, m.fusion.weight.value)


def test_segments_and_trace(setup):
    scen, m = setup
    recs, rep, _ = A.run_episode(m, S.target_stream(scen, S.Protocol("long_term", rounds=3), 32),
                                 A.MethodConfig("source"), window=2)
    assert [s for s, _ in rep.segments] == ["round01", "round02", "round03", "all"]
    assert len(rep.trace) == 6
    # an unadapted model sees identical data each round
    assert rep.metrics("round01") == rep.metrics("round03")


def test_entropy_gap_definition():
    r = A.BatchRecord(0, "x", np.array([0, -1, 1, -2]), np.zeros(4, int), np.zeros(4),
                      np.array([0.2, 0.9, 0.4, 0.7]), np.zeros(4))
    assert A.entropy_gap([r]) == pytest.approx(0.8 - 0.3)
    r.labels = np.array([0, 1, 2, 3])
    assert np.isnan(A.entropy_gap([r]))


def test_pearson():
    assert A.pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert A.gap_fpr_correlation([0.1, 0.2, 0.3], [0.9, 0.6, 0.3]) == pytest.approx(1.0)
    with pytest.raises(mt.MetricUndefined):
        A.pearson([1, 1], [1, 2])


def test_ablation_labels_and_config():
    assert A.MethodConfig("aeo", ablation="no_div").label == "aeo-no_div"
    assert A.MethodConfig("aeo", ablation="no_div").effective_loss_cfg.gamma2 == 0.0
    with pytest.raises(A.ConfigError):
        A.MethodConfig("bn_adapt")
    with pytest.raises(A.ConfigError):
        A.MethodConfig(score_kind="odin")


def _tiny_model(scale, seed=0):
    m = mdl.init(mdl.ModelSpec((6, 6), (5, 5), 4, "tanh", seed))
    for p in m.parameters():
        mdl.set_value(p, p.value * scale)
    return m


def _batch(rng, n=16):
    return S.Batch((rng.standard_normal((n, 6)), rng.standard_normal((n, 6))), np.zeros(n, dtype=np.int64))


def _mean_fused_entropy(m, batch):
    from mmotta import losses as L
    return float(L.entropy_np(mdl.forward(m, batch.features).fused_probs.value).mean())


def test_zero_weight_batch_changes_nothing(rng):
    from mmotta import losses as L
    m = _tiny_model(0.0)
    mdl.set_value(m.fusion.bias, np.array([2.0, 1.0, 0.0, -1.0]))
    batch = _batch(rng)
    alpha = float(L.normalized_entropy(mdl.forward(m, batch.features).fused_probs).value[0])
    cfg = A.MethodConfig("aeo", L.LossConfig(alpha=alpha, gamma1=0.0, gamma2=0.0), lr=0.1)
    state = A.AdaptState(m, cfg)
    before = m.state_dict()
    rec = A.adapt_batch(state, batch)
    assert rec.loss["total"] == 0.0
    assert all(not p.grad.any() for p in state.params)
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_tent_on_repeated_batch_lowers_entropy(rng):
    m = _tiny_model(1.0)
    batch = _batch(rng)
    state = A.AdaptState(m, A.MethodConfig("tent", lr=1e-2))
    ent = [A.adapt_batch(state, batch).entropy.mean() for _ in range(50)]
    assert all(b < a for a, b in zip(ent, ent[1:]))


@pytest.mark.parametrize("scale,direction", [(0.05, 1), (3.0, -1)])
def test_aeo_first_step_entropy_direction(rng, scale, direction):
    from mmotta import losses as L
    m = _tiny_model(scale, seed=3)
    X = (rng.standard_normal((400, 6)), rng.standard_normal((400, 6)))
    H = L.entropy_np(mdl.forward(m, X).fused_probs.value)
    keep = H > 0.8 if direction > 0 else H < 0.8
    assert keep.sum() >= 8
    batch = S.Batch(tuple(x[keep] for x in X), np.zeros(int(keep.sum()), dtype=np.int64))
    before = _mean_fused_entropy(m, batch)
    A.adapt_batch(A.AdaptState(m, A.MethodConfig("aeo")), batch)
    assert np.sign(_mean_fused_entropy(m, batch) - before) == direction


def test_aeo_step_increases_discrepancy_for_positive_weights(rng):
    m = _tiny_model(0.05, seed=4)
    batch = _batch(rng, 32)

    def dis():
        out = mdl.forward(m, batch.features)
        return float(np.abs(out.modality_probs[0].value - out.modality_probs[1].value).sum(1).mean())

    assert (A.L.entropy_np(mdl.forward(m, batch.features).fused_probs.value) > 0.8).all()
    before = dis()
    A.adapt_batch(A.AdaptState(m, A.MethodConfig("aeo")), batch)
    assert dis() > before


def test_source_metrics_match_offline_evaluation(setup):
    scen, m = setup
    _, rep, _ = A.run_episode(m, S.target_stream(scen, S.Protocol()), A.MethodConfig("source"))
    batches = list(S.target_stream(scen, S.Protocol()))
    X = [np.vstack([b.features[k] for b in batches]) for k in range(2)]
    y = np.concatenate([b.labels for b in batches])
    out = mdl.forward(m, X)
    s = out.fused_probs.value.max(1)
    pred = out.fused_probs.value.argmax(1)
    known = y >= 0
    assert rep.metrics()["acc"] == pytest.approx(np.mean(pred[known] == y[known]), abs=1e-15)
    assert rep.metrics()["auroc"] == mt.auroc(s[known], s[~known])


def test_empty_stream_is_undefined(setup):
    _, m = setup
    with pytest.raises(mt.MetricUndefined):
        A.run_episode(m, [], A.MethodConfig("source"))


def test_gap_trace_brute_force(setup):
    scen, m = setup
    recs, rep, _ = A.run_episode(m, S.target_stream(scen, S.Protocol(), 16), A.MethodConfig("aeo"), window=3)
    for i, g in enumerate(rep.trace):
        chunk = recs[3 * i:3 * i + 3]
        H = np.concatenate([r.entropy for r in chunk])
        y = np.concatenate([r.labels for r in chunk])
        assert g == pytest.approx(H[y < 0].mean() - H[y >= 0].mean(), abs=1e-15)
    same = A.BatchRecord(0, "x", np.array([0, -1]), np.zeros(2, int), np.zeros(2), np.array([0.4, 0.4]), np.zeros(2))
    assert A.entropy_gap([same]) == 0.0


def test_pearson_against_textbook(rng):
    x, y = rng.standard_normal(30), rng.standard_normal(30)
    assert A.pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
    assert abs(A.pearson([0.1, 0.3], [0.5, 0.2])) == pytest.approx(1.0)
