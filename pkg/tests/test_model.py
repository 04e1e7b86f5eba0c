import numpy as np
import pytest

from stars import tensor as T
from stars.errors import ConfigError, ContractViolation, ParameterError, UnsupportedVariantError
from stars.metrics import apd
from stars.model import AnchorLevel, AnchorSet, ModelConfig, StarsModel, compose_anchor, interpolate_anchor
from stars.objectives import loss_reconstruction

TOY = dict(channels=(3, 8, 4, 8, 4, 8, 4, 8, 3), M=4, T_h=4, T_p=4, V=3, K_s=2, K_t=3, noise_dim=4)


def toy(seed=0, **kw):
    return StarsModel(ModelConfig(**{**TOY, **kw}), rng=np.random.default_rng(seed))


def _history(seed=0, B=None, T_h=4, V=3):
    rng = np.random.default_rng(seed)
    shape = (T_h, V, 3) if B is None else (B, T_h, V, 3)
    return rng.uniform(-0.5, 0.5, shape)


def _anchors(s, t):
    return AnchorSet([AnchorLevel(T.Tensor(np.asarray(s, float)), T.Tensor(np.asarray(t, float)))])


def test_default_config_matches_reference_layout():
    cfg = ModelConfig()
    assert cfg.channels == (3, 128, 64, 128, 64, 128, 64, 128, 3)
    assert [cfg.channels[l - 1] for l in cfg.anchor_layers] == [128, 128]
    assert cfg.weight_in(cfg.noise_layer) == 128
    assert cfg.K == 50
    assert cfg.resolved_prune_map() == (0, 2, 4, 6)


def test_deterministic_variants():
    s = ModelConfig.for_variant("deterministic_short", T_h=10, T_p=10, V=3)
    assert (s.K, s.noise_dim, s.M) == (1, 0, 20)
    assert s.resolved_prune_map() == tuple(range(1, 7))
    assert s.resolved_temporal_prune_map() == ()
    lng = ModelConfig.for_variant("deterministic_long", T_h=10, T_p=25, V=3)
    assert lng.M == 35 and lng.resolved_temporal_prune_map() == tuple(range(1, 7))
    with pytest.raises(ConfigError):
        ModelConfig.for_variant("deterministic_short", T_h=10, T_p=10, V=3, K_s=2)


@pytest.mark.parametrize("kw", [dict(M=9), dict(channels=(3, 8, 4)), dict(anchor_layers=(2, 4, 6)),
                                dict(residuals=((1, 2),)), dict(share_map=((1, 1),)), dict(variant="x")])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**{**TOY, **kw})


def test_config_dict_round_trip():
    cfg = ModelConfig(**TOY)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_compose_anchor_scalar_and_broadcast():
    out = compose_anchor(_anchors([[[1.0]]], [[[2.0]]]), 0, 0, 0)
    np.testing.assert_array_equal(out, [[[3.0]]])
    rng = np.random.default_rng(0)
    s, t = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 5, 4))
    a = _anchors(s, t)
    off = compose_anchor(a, 0, 1, 2)
    assert off.shape == (5, 3, 4)
    for v in range(3):
        np.testing.assert_allclose(off[3, v] - off[1, v], t[2, 3] - t[2, 1], rtol=0, atol=1e-14)
    np.testing.assert_array_equal(off, s[1][None] + t[2][:, None])
    zero_t = compose_anchor(_anchors(s, np.zeros_like(t)), 0, 1, 0)
    assert np.all(zero_t == zero_t[:1])
    with pytest.raises(ParameterError):
        compose_anchor(a, 0, 2, 0)


def test_interpolate_anchor_endpoints_and_midpoint():
    rng = np.random.default_rng(1)
    s, t = rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 5, 4))
    a = _anchors(s, t)
    assert np.array_equal(interpolate_anchor(a, 0, "spatial", 0, 1, 0.0), s[0])
    assert np.array_equal(interpolate_anchor(a, 0, "spatial", 0, 1, 1.0), s[1])
    np.testing.assert_allclose(interpolate_anchor(a, 0, "temporal", 0, 2, 0.5), (t[0] + t[2]) / 2, atol=1e-15)
    for alpha in (-0.1, 1.5):
        with pytest.raises(ParameterError):
            interpolate_anchor(a, 0, "spatial", 0, 1, alpha)
    with pytest.raises(ParameterError):
        interpolate_anchor(a, 0, "sideways", 0, 1, 0.5)


def test_forward_one_shape_full_size():
    cfg = ModelConfig(T_h=25, T_p=100, V=17, M=20, K_s=1, K_t=1)
    m = StarsModel(cfg, rng=np.random.default_rng(0))
    fut, hist = m.forward_one(_history(0, T_h=25, V=17), 0, 0, np.zeros(64))
    assert fut.shape == (100, 17, 3) and hist.shape == (25, 17, 3)


def test_zero_model_outputs_zero():
    m = toy()
    m.zero_()
    fut, hist = m.forward_one(_history(), 1, 2, np.ones(4))
    assert not fut.any() and not hist.any()
    ps = m.sample_set(_history(), seed=3)
    assert ps.K == 6 and apd(ps.predictions) == 0.0


def test_forward_is_deterministic():
    m = toy()
    X, z = _history(), np.random.default_rng(2).normal(size=4)
    a = m.forward_one(X, 1, 1, z)
    b = m.forward_one(X, 1, 1, z)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_forward_contract_errors():
    m = toy()
    with pytest.raises(ContractViolation):
        m.forward_one(_history(V=4), 0, 0, np.zeros(4))
    with pytest.raises(ContractViolation):
        m.forward_one(_history(), 0, 0, np.zeros(5))
    with pytest.raises(ContractViolation):
        m.forward_one(_history(), 0, 0, None)
    with pytest.raises(ParameterError):
        m.forward_one(_history(), 2, 0, np.zeros(4))


def test_sample_set_enumerates_every_pair():
    m = toy()
    a = m.sample_set(_history(), seed=5)
    b = m.sample_set(_history(), seed=5)
    assert a.K == 6
    assert [(p["spatial"], p["temporal"]) for p in a.provenance] == m.all_pairs()
    assert np.array_equal(a.predictions, b.predictions)
    assert toy(K_s=5, K_t=10).sample_set(_history(), seed=0).K == 50


def test_sample_set_rejects_deterministic():
    m = StarsModel(ModelConfig.for_variant("deterministic_short", **{**TOY, "K_s": 1, "K_t": 1, "noise_dim": 0}))
    with pytest.raises(UnsupportedVariantError):
        m.sample_set(_history(), seed=0)
    with pytest.raises(UnsupportedVariantError):
        toy().deterministic_forward(_history())


def test_deterministic_forward_shape_zero_and_repeat():
    cfg = ModelConfig.for_variant("deterministic_short", channels=TOY["channels"], M=4, T_h=4, T_p=4, V=3)
    m = StarsModel(cfg)
    f1, h1 = m.deterministic_forward(_history())
    f2, _ = m.deterministic_forward(_history())
    assert f1.shape == (4, 3, 3) and h1.shape == (4, 3, 3)
    assert np.array_equal(f1, f2)
    m.zero_()
    assert not m.deterministic_forward(_history())[0].any()


def test_stochastic_reduces_to_deterministic_exactly():
    det_cfg = ModelConfig.for_variant("deterministic_short", channels=TOY["channels"], M=4, T_h=4, T_p=4, V=3)
    det = StarsModel(det_cfg, rng=np.random.default_rng(7))
    sto_cfg = ModelConfig(**{**TOY, "K_s": 1, "K_t": 1, "noise_dim": 0, "anchor_layers": (),
                             "prune_map": det_cfg.resolved_prune_map()})
    sto = StarsModel(sto_cfg, rng=np.random.default_rng(99))
    sto.load_state_dict(det.state_dict())
    X = _history(B=5)
    a, _ = det.forward(X, training=False)
    b, _ = sto.forward(X, training=False)
    assert np.array_equal(a.data, b.data)


def test_anchor_separation_under_reconstruction():
    m = toy(seed=3)
    X = _history(4, B=1)
    Y = np.random.default_rng(5).normal(size=(1, 4, 3, 3))
    z = np.random.default_rng(6).normal(size=(1, 6, 4))
    params = m.anchor_parameters()
    with T.Tape() as tape:
        fut, _ = m.forward(X, m.all_pairs(), z, training=False)
        loss = loss_reconstruction(fut, Y)
        grads = tape.backward(loss, params)
    d = ((fut.data[0] - Y[0]) ** 2).sum(axis=(1, 2, 3))
    i, j = m.all_pairs()[int(np.argmin(d))]
    for lvl in range(2):
        gs, gt = grads[params[2 * lvl]], grads[params[2 * lvl + 1]]
        assert np.abs(gs[i]).sum() > 0 and np.abs(gt[j]).sum() > 0
        assert not np.delete(gs, i, axis=0).any()
        assert not np.delete(gt, j, axis=0).any()


def test_shared_spatial_factors():
    m = toy()
    L = m.layers
    for a, b in ((4, 6), (5, 7)):
        assert L[a].adj.spatial is L[b].adj.spatial
    assert L[4].adj.spatial is not L[5].adj.spatial
    names = m.named_parameters()
    assert "adj6.spatial" not in names and "adj7.spatial" not in names


def test_state_dict_round_trip_and_mismatch():
    a, b = toy(seed=1), toy(seed=2)
    b.load_state_dict(a.state_dict())
    X, z = _history(), np.ones(4)
    assert np.array_equal(a.forward_one(X, 0, 1, z)[0], b.forward_one(X, 0, 1, z)[0])
    st = a.state_dict()
    st.pop("layer1.weight")
    with pytest.raises(ContractViolation, match="layer1.weight"):
        b.load_state_dict(st)


def test_anchor_override_replaces_component():
    m = toy(seed=4)
    X, z = _history(), np.ones(4)
    lv = m.anchors.levels
    over = {(k, "spatial"): lv[k].spatial.data[1] for k in range(2)}
    np.testing.assert_array_equal(m.forward_one(X, 0, 2, z, anchor_override=over)[0], m.forward_one(X, 1, 2, z)[0])
