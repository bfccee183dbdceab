import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmotta import model as mdl
from mmotta import streams as S

SMALL = S.ScenarioConfig(n_source=120, n_target=128)


def test_scenario_is_seeded():
    a, b = S.make_scenario(SMALL), S.make_scenario(SMALL)
    for k in range(2):
        np.testing.assert_array_equal(a.known_protos[k], b.known_protos[k])
        np.testing.assert_array_equal(a.unknown_protos[k], b.unknown_protos[k])
    c = S.make_scenario(S.ScenarioConfig(n_source=120, n_target=128, seed=1))
    assert not np.array_equal(a.known_protos[0], c.known_protos[0])


def test_prototype_radii_and_separation():
    cfg = S.ScenarioConfig(r_known=3.0, r_unknown=(1.0, 1.5, 2.0, 2.5), min_separation=0.5)
    scen = S.make_scenario(cfg)
    np.testing.assert_allclose(np.linalg.norm(scen.known_protos[0], axis=1), 3.0)
    np.testing.assert_allclose(np.linalg.norm(scen.unknown_protos[1], axis=1), [1.0, 1.5, 2.0, 2.5])
    assert scen.min_pairwise_distance() >= 0.5


def test_novel_unknown_direction_is_orthogonal():
    scen = S.make_scenario(S.ScenarioConfig(unknown_overlap=0.0, min_separation=0.0))
    K, U = scen.known_protos[0], scen.unknown_protos[0]
    np.testing.assert_allclose(K @ U.T, 0.0, atol=1e-9)


@pytest.mark.parametrize("kw", [dict(num_classes=1), dict(unknown_ratio=1.0), dict(unknown_mix=9),
                                dict(r_unknown=(1.0, 2.0)), dict(unknown_overlap=1.5), dict(d_in=(3,)),
                                dict(domains=())])
def test_config_validation(kw):
    with pytest.raises(S.ConfigError):
        S.ScenarioConfig(**kw)


def test_config_dict_roundtrip():
    cfg = S.ScenarioConfig(r_unknown=(1.0, 1.5, 2.0, 2.5))
    assert S.ScenarioConfig.from_dict(cfg.to_dict()) == cfg


def test_unknown_labels_are_negative():
    scen = S.make_scenario(SMALL)
    b = next(S.target_stream(scen, S.Protocol(), 32))
    assert b.size == 32 and b.known_mask.sum() == 16
    assert set(b.labels[b.labels < 0]) <= {-1, -2, -3, -4}
    assert set(b.labels[b.labels >= 0]) <= set(range(6))


@given(st.floats(0.05, 0.95))
def test_unknown_ratio_respected(ratio):
    scen = S.make_scenario(SMALL)
    for b in S.domain_batches(scen, 0, 40, unknown_ratio=ratio):
        assert (b.labels < 0).sum() == round(40 * ratio)


def test_long_term_repeats_the_same_batches():
    scen = S.make_scenario(SMALL)
    batches = list(S.target_stream(scen, S.Protocol("long_term", rounds=3), 32))
    assert len(batches) == 12
    assert [b.segment for b in batches[::4]] == ["round01", "round02", "round03"]
    np.testing.assert_array_equal(batches[0].features[0], batches[8].features[0])


def test_continual_visits_every_domain_in_order():
    scen = S.make_scenario(SMALL)
    segs = [b.segment for b in S.target_stream(scen, S.Protocol("continual"), 32)]
    names = [d.name for d in SMALL.domains]
    assert segs == [n for n in names for _ in range(4)]


def test_mixed_draws_from_several_domains():
    scen = S.make_scenario(SMALL)
    doms = np.concatenate([b.domain for b in S.target_stream(scen, S.Protocol("mixed"), 32)])
    assert set(doms) == {0, 1, 2}


def test_protocol_validation():
    with pytest.raises(S.ConfigError):
        S.Protocol("forever")
    with pytest.raises(S.ConfigError):
        S.Protocol(rounds=0)
    with pytest.raises(S.ConfigError):
        S.Protocol("single", domains=(5,)).domain_indices(3)


def test_domain_shift_broadcast():
    d = S.DomainShift("x", (0.5,), (0.1, 0.2), (0.0,), (1.0,)).per_modality(2)
    assert d.contraction == (0.5, 0.5) and d.jitter == (0.1, 0.2)
    with pytest.raises(S.ConfigError):
        S.DomainShift("x", (0.5, 0.5, 0.5)).per_modality(2)


def test_identity_domain_matches_source_distribution():
    cfg = S.ScenarioConfig(domains=(S.DomainShift(),), noise_sigma=0.0, n_target=64)
    scen = S.make_scenario(cfg)
    b = next(S.target_stream(scen, S.Protocol(), 64))
    known = b.labels >= 0
    np.testing.assert_allclose(b.features[0][known], scen.known_protos[0][b.labels[known]])


def test_pretraining_fits_source():
    scen = S.make_scenario(SMALL)
    m = mdl.init(S.model_spec_for(scen))
    res = S.pretrain_source(m, S.source_dataset(scen), epochs=8, lr=1e-2)
    assert res.epoch_losses[-1] < res.epoch_losses[0]
    assert res.source_accuracy > 0.9


def test_dataset_csv(tmp_path):
    ds = S.source_dataset(S.make_scenario(SMALL), n=5)
    ds.to_csv(tmp_path / "d.csv")
    rows = (tmp_path / "d.csv").read_text().splitlines()
    assert len(rows) == 6 and rows[0].endswith(",label")
    assert float(rows[1].split(",")[0]) == ds.features[0][0, 0]


def test_source_labels_balanced_and_known():
    ds = S.source_dataset(S.make_scenario(SMALL), n=100)
    counts = np.bincount(ds.labels, minlength=6)
    assert counts.max() - counts.min() <= 1
    assert (ds.labels >= 0).all()


def test_source_sample_mean_converges():
    cfg = S.ScenarioConfig(n_source=6000)
    scen = S.make_scenario(cfg)
    ds = S.source_dataset(scen)
    for k in range(2):
        sel = ds.labels == 2
        mean = ds.features[k][sel].mean(axis=0)
        tol = 3 * cfg.noise_sigma / np.sqrt(sel.sum())
        assert np.all(np.abs(mean - scen.known_protos[k][2]) < tol)


def test_long_term_batch_count():
    scen = S.make_scenario(SMALL)
    single = len(list(S.target_stream(scen, S.Protocol(), 32)))
    assert len(list(S.target_stream(scen, S.Protocol("long_term", 10), 32))) == 10 * single


def test_identity_shift_matches_source_means():
    cfg = S.ScenarioConfig(domains=(S.DomainShift(),), n_target=6400)
    scen = S.make_scenario(cfg)
    tgt = list(S.target_stream(scen, S.Protocol(), 64))
    X = np.vstack([b.features[0] for b in tgt])
    y = np.concatenate([b.labels for b in tgt])
    src = S.source_dataset(scen, n=6000)
    for c in range(6):
        a, b = X[y == c], src.features[0][src.labels == c]
        se = cfg.noise_sigma * np.sqrt(1 / len(a) + 1 / len(b))
        assert np.all(np.abs(a.mean(0) - b.mean(0)) < 4.5 * se)


def test_zero_epochs_leave_model_unchanged():
    scen = S.make_scenario(SMALL)
    m = mdl.init(S.model_spec_for(scen))
    before = m.state_dict()
    S.pretrain_source(m, S.source_dataset(scen), epochs=0)
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_default_scenario_training_loss_decreases():
    scen = S.make_scenario(S.ScenarioConfig())
    m = mdl.init(S.model_spec_for(scen))
    res = S.pretrain_source(m, S.source_dataset(scen), epochs=5, lr=3e-3)
    assert all(b < a for a, b in zip(res.epoch_losses, res.epoch_losses[1:]))


def test_stream_bytes_deterministic():
    def dump():
        scen = S.make_scenario(SMALL)
        return b"".join(x.tobytes() for b in S.target_stream(scen, S.Protocol("mixed"), 32)
                        for x in (*b.features, b.labels))
    assert dump() == dump()
