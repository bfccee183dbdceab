import numpy as np
import pytest

from mmotta import diffcore as dc
from mmotta import model as mdl

SPEC = mdl.ModelSpec((5, 3), (4, 2), 3, "tanh", 7)


def test_parameter_count_and_names():
    m = mdl.init(SPEC)
    assert m.num_parameters() == mdl.expected_parameter_count(SPEC)
    names = [n for n, _ in m.named_parameters()]
    assert names == ["encoder0.weight", "encoder0.bias", "encoder1.weight", "encoder1.bias",
                     "fusion.weight", "fusion.bias", "head0.weight", "head0.bias", "head1.weight", "head1.bias"]


def test_forward_shapes_and_probabilities(rng):
    m = mdl.init(SPEC)
    out = mdl.forward(m, [rng.standard_normal((6, 5)), rng.standard_normal((6, 3))])
    assert out.fused_probs.shape == (6, 3)
    assert [p.shape for p in out.modality_probs] == [(6, 3), (6, 3)]
    np.testing.assert_allclose(out.fused_probs.value.sum(1), 1.0)
    assert out.embeddings[0].shape == (6, 4)


def test_forward_validates_inputs(rng):
    m = mdl.init(SPEC)
    with pytest.raises((dc.DimensionError, mdl.ConfigError)):
        mdl.forward(m, [rng.standard_normal((6, 5))])
    with pytest.raises((dc.DimensionError, mdl.ConfigError)):
        mdl.forward(m, [rng.standard_normal((6, 4)), rng.standard_normal((6, 3))])


def test_spec_validation():
    with pytest.raises(mdl.ConfigError):
        mdl.ModelSpec((5,), (4, 2), 3)
    with pytest.raises(mdl.ConfigError):
        mdl.ModelSpec((5,), (4,), 3, "relu")


def test_init_is_seeded():
    a, b = mdl.init(SPEC), mdl.init(SPEC)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.value, q.value)


def test_adaptable_subset():
    m = mdl.init(SPEC)
    params = mdl.adaptable_parameters(m)
    names = {id(p): n for n, p in m.named_parameters()}
    assert sorted(names[id(p)] for p in params) == sorted(
        ["encoder0.weight", "encoder0.bias", "encoder1.weight", "encoder1.bias", "fusion.weight", "fusion.bias"])
    assert len(mdl.adaptable_parameters(m, include_heads=True)) == 10


def test_fused_prediction_independent_of_heads(rng):
    m = mdl.init(SPEC)
    x = [rng.standard_normal((4, 5)), rng.standard_normal((4, 3))]
    before = mdl.forward(m, x).fused_probs.value
    mdl.set_value(m.heads[0].weight, np.zeros_like(m.heads[0].weight.value))
    np.testing.assert_array_equal(mdl.forward(m, x).fused_probs.value, before)


def test_checkpoint_roundtrip(tmp_path, rng):
    m = mdl.init(SPEC)
    mdl.set_value(m.fusion.bias, rng.standard_normal(3))
    mdl.save_checkpoint(m, tmp_path / "ck")
    m2 = mdl.load_checkpoint(tmp_path / "ck")
    for (n, p), (_, q) in zip(m.named_parameters(), m2.named_parameters()):
        np.testing.assert_array_equal(p.value, q.value, err_msg=n)


def test_copy_is_independent():
    m = mdl.init(SPEC)
    c = m.copy()
    mdl.set_value(c.fusion.bias, np.ones(3))
    assert not np.array_equal(m.fusion.bias.value, c.fusion.bias.value)
    assert c.fusion.bias is not m.fusion.bias


def test_zero_parameters_give_uniform(rng):
    m = mdl.init(SPEC)
    for p in m.parameters():
        mdl.set_value(p, np.zeros_like(p.value))
    out = mdl.forward(m, [rng.standard_normal((3, 5)), rng.standard_normal((3, 3))])
    np.testing.assert_allclose(out.fused_probs.value, 1 / 3)
    for p in out.modality_probs:
        np.testing.assert_allclose(p.value, 1 / 3)


def test_single_modality_model(rng):
    m = mdl.init(mdl.ModelSpec((4,), (3,), 2))
    out = mdl.forward(m, [rng.standard_normal((5, 4))])
    assert out.fused_probs.shape == (5, 2) and len(out.modality_probs) == 1


def test_init_distribution():
    m = mdl.init(SPEC)
    for k, enc in enumerate(m.encoders):
        bound = 1 / np.sqrt(SPEC.d_in[k])
        assert np.abs(enc.weight.value).max() <= bound
        assert not enc.bias.value.any()
    assert np.abs(m.fusion.weight.value).max() <= 1 / np.sqrt(6)


def test_parameter_count_by_hand():
    # encoders 5*4+4 + 3*2+2, fusion 6*3+3, heads 4*3+3 + 2*3+3
    assert mdl.expected_parameter_count(SPEC) == 24 + 8 + 21 + 15 + 9


def test_adaptable_selection_counts():
    m = mdl.init(mdl.ModelSpec((4, 4), (3, 3), 2))
    sel = mdl.adaptable_parameters(m)
    assert len(sel) == 6 and len({id(p) for p in sel}) == 6
    assert len(mdl.adaptable_parameters(m, include_heads=True)) == 6 + 2 * 2


def test_forward_is_pure(rng):
    m = mdl.init(SPEC)
    x = [rng.standard_normal((4, 5)), rng.standard_normal((4, 3))]
    a, b = mdl.forward(m, x), mdl.forward(m, x)
    np.testing.assert_array_equal(a.fused_logits.value, b.fused_logits.value)
