import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from agcd import numcore as nc
from agcd.backbone import BackboneConfig, encode, init_backbone, patchify
from agcd.crid import (
    CRIDConfig,
    attention_cost_ratio,
    cmg_forward,
    cmi_forward,
    crid_predict,
    gate_text,
    hopfield_pool,
    init_crid,
    region_tokens,
)
from agcd.errors import ConfigError, ShapeError
from agcd.textenc import FrozenTextEncoder

BB = BackboneConfig()


def _store(cfg=CRIDConfig(), bcfg=BB, seed=0):
    store = nc.ParamStore()
    rng = np.random.default_rng(seed)
    init_backbone(store, bcfg, rng)
    init_crid(store, bcfg, cfg, rng)
    return store


def _pool_store(Q, cfg):
    store = nc.ParamStore()
    store.add("crid.pool.q", np.asarray(Q, dtype=float))
    return store


# --- gating ---------------------------------------------------------------


def test_zero_queries_give_uniform_gates():
    g = gate_text(np.eye(2)[None], np.zeros((1, 1, 2)), np.zeros((1, 1, 2)))
    assert np.allclose(g.alpha, 0.5) and np.allclose(g.beta, 0.5)
    assert np.allclose(g.t_tilde.value[0], 0.25 * np.eye(2))


def test_channel_query_example():
    g = gate_text(np.eye(2)[None], np.zeros((1, 1, 2)), np.array([[[1.0, 0.0]]]))
    assert np.allclose(g.alpha[0], [0.7311, 0.2689], atol=1e-4)
    assert np.allclose(g.t_tilde.value[0], [[0.3655, 0], [0, 0.1344]], atol=1e-4)


def test_cmg_default_shape_and_token_limit():
    cfg = CRIDConfig()
    store = _store(cfg)
    rng = np.random.default_rng(1)
    g = cmg_forward(store, cfg, rng.normal(size=(1, 64, 48)), rng.normal(size=(1, 1, 32)))
    assert g.t_tilde.shape == (1, 64, 32)
    with pytest.raises(ShapeError):
        cmg_forward(store, cfg, rng.normal(size=(1, 65, 48)), rng.normal(size=(1, 1, 32)))


@given(st.integers(0, 10_000), st.integers(1, 64))
def test_gate_weights_are_distributions(seed, n_t):
    cfg = CRIDConfig()
    store = _store(cfg)
    rng = np.random.default_rng(seed)
    g = cmg_forward(store, cfg, rng.normal(size=(2, n_t, 48)), rng.normal(size=(2, 1, 32)) * 3)
    for w in (g.alpha, g.beta):
        assert np.all(w > 0)
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)


# --- region tokens ---------------------------------------------------------


def test_region_tokens_block_means():
    P = np.arange(1.0, 17.0).reshape(1, 16, 1)
    R = region_tokens(P, (4, 2))
    assert R.shape == (1, 5, 1)
    assert np.allclose(R.value[0, :, 0], [3.5, 5.5, 11.5, 13.5, 8.5])


def test_region_tokens_constant_and_unit_scale():
    assert np.all(region_tokens(np.full((1, 16, 3), 2.5), (2, 4)).value == 2.5)
    P = np.random.default_rng(0).normal(size=(2, 16, 4))
    assert np.array_equal(region_tokens(P, (1,)).value, P)


def test_region_tokens_bad_scale():
    with pytest.raises(ShapeError):
        region_tokens(np.zeros((1, 16, 2)), (3,))
    with pytest.raises(ShapeError):
        region_tokens(np.zeros((1, 15, 2)), (1,))


@given(st.sampled_from([4, 16, 64]), st.sampled_from([(1,), (2,), (1, 2), (2, 4)]), st.integers(1, 70))
def test_context_length(n, scales, n_t):
    side = int(np.sqrt(n))
    scales = tuple(s for s in scales if side % s == 0) or (1,)
    cfg = CRIDConfig(scales=scales)
    X_len = n + region_tokens(np.zeros((1, n, 2)), scales).shape[1] + n_t
    assert cfg.context_length(n, n_t) == X_len


# --- Hopfield pooling --------------------------------------------------------


def test_pool_identical_rows():
    cfg = CRIDConfig(memory=2, pool_projections=False)
    row = np.array([1.0, -2.0, 0.5])
    Z = hopfield_pool(_pool_store(np.random.default_rng(0).normal(size=(2, 3)), cfg), cfg, np.tile(row, (1, 8, 1)))
    assert np.allclose(Z.value[0], row)


def test_pool_zero_queries_give_column_means():
    cfg = CRIDConfig(memory=1, pool_projections=False)
    X = np.random.default_rng(1).normal(size=(1, 8, 3))
    Z = hopfield_pool(_pool_store(np.zeros((1, 3)), cfg), cfg, X)
    assert np.allclose(Z.value[0, 0], X[0].mean(axis=0))
    X2 = np.tile(np.eye(2), (2, 1))[None]  # L=4 so M=1 satisfies M <= L/4
    assert np.allclose(hopfield_pool(_pool_store(np.zeros((1, 2)), cfg), cfg, X2).value[0, 0], [0.5, 0.5])


def test_pool_saturated_temperature_selects_row():
    cfg = CRIDConfig(memory=1, pool_projections=False, beta_h=32.0)
    X = np.eye(4)[None]
    Z = hopfield_pool(_pool_store(X[0, :1], cfg), cfg, X)
    # 32 * <e0, e0> vs 0 leaves residual weight ~3 * exp(-32)
    assert np.allclose(Z.value[0, 0], X[0, 0], atol=1e-9 * 1e3)
    assert abs(Z.value[0, 0, 0] - 1.0) < 4 * np.exp(-32) + 1e-15


def test_pool_memory_limit():
    cfg = CRIDConfig(memory=3, pool_projections=False)
    with pytest.raises(ConfigError):
        hopfield_pool(_pool_store(np.zeros((3, 2)), cfg), cfg, np.zeros((1, 11, 2)))
    with pytest.raises(ConfigError):
        CRIDConfig(memory=0)


@given(hnp.arrays(np.float64, (1, 12, 3), elements=st.floats(-5, 5)), st.integers(0, 1000))
def test_pool_convexity_and_joint_permutation(X, seed):
    cfg = CRIDConfig(memory=3, pool_projections=False)
    rng = np.random.default_rng(seed)
    store = _pool_store(rng.normal(size=(3, 3)), cfg)
    Z = hopfield_pool(store, cfg, X).value
    lo, hi = X.min(axis=1, keepdims=True), X.max(axis=1, keepdims=True)
    assert np.all(Z >= lo - 1e-9) and np.all(Z <= hi + 1e-9)
    perm = rng.permutation(12)
    assert np.allclose(hopfield_pool(store, cfg, X[:, perm]).value, Z, atol=1e-12)


# --- interaction -----------------------------------------------------------


def test_default_context_and_shapes():
    cfg = CRIDConfig()
    assert cfg.context_length(16, 64) == 85
    assert attention_cost_ratio(cfg, 16, 64) == 85 / 8
    store = _store(cfg)
    rng = np.random.default_rng(2)
    P = rng.normal(size=(1, 16, 32))
    out, parts = cmi_forward(store, cfg, P, rng.normal(size=(1, 64, 32)), return_parts=True)
    assert parts["X"].shape == (1, 85, 32) and parts["Z"].shape == (1, 8, 32)
    assert out.shape == (1, 16, 32)


def test_zero_output_projection_is_residual_identity():
    cfg = CRIDConfig()
    store = _store(cfg)
    store["crid.mha.wo"] = np.zeros_like(store["crid.mha.wo"])
    P = np.random.default_rng(3).normal(size=(2, 16, 32))
    _, parts = cmi_forward(store, cfg, P, np.random.default_rng(4).normal(size=(2, 64, 32)), return_parts=True)
    assert parts["P_hat"].value.tobytes() == P.tobytes()
    id_cfg = CRIDConfig(identity_decoder=True)
    store2 = _store(id_cfg)
    store2["crid.mha.wo"] = np.zeros_like(store2["crid.mha.wo"])
    assert cmi_forward(store2, id_cfg, P, np.ones((2, 64, 32))).value.tobytes() == P.tobytes()


def test_cmi_shape_mismatch():
    cfg = CRIDConfig()
    with pytest.raises(ShapeError):
        cmi_forward(_store(cfg), cfg, np.zeros((1, 16, 32)), np.zeros((1, 64, 31)))


def _inputs(B=1, seed=5):
    rng = np.random.default_rng(seed)
    store = _store()
    P, C = encode(store, BB, patchify(rng.normal(size=(B, 4, 16, 16)), 4))
    return store, P, C


def test_predict_grid_shape_and_null_prompt():
    store, P, C = _inputs()
    T = FrozenTextEncoder().encode("")[None]  # null token padded to 64
    out = crid_predict(store, BB, CRIDConfig(), P, C, T)
    assert out.shape == (1, 4, 16, 16)
    assert np.all(np.isfinite(out.value))


@pytest.mark.parametrize("flag", ["use_region", "use_hopfield", "use_cmg"])
def test_ablation_switches_run(flag):
    cfg = CRIDConfig(**{flag: False})
    store = _store(cfg)
    rng = np.random.default_rng(6)
    P, C = encode(store, BB, patchify(rng.normal(size=(1, 4, 16, 16)), 4))
    T = FrozenTextEncoder().encode("z: strong maximum +2.3 near south-west")[None]
    assert crid_predict(store, BB, cfg, P, C, T).shape == (1, 4, 16, 16)


def test_predict_deterministic():
    store, P, C = _inputs(B=2)
    T = np.random.default_rng(7).normal(size=(2, 64, 48))
    a = crid_predict(store, BB, CRIDConfig(), P, C, T).value
    b = crid_predict(store, BB, CRIDConfig(), P, C, T).value
    assert a.tobytes() == b.tobytes()


def test_ablation_variants_share_initial_tensors():
    full = _store(CRIDConfig())
    for flag in ("use_region", "use_hopfield", "use_cmg"):
        other = _store(CRIDConfig(**{flag: False}))
        assert set(other.names()) <= set(full.names())
        for n in other.names():
            assert other[n].tobytes() == full[n].tobytes()


def test_gate_rescale():
    rng = np.random.default_rng(8)
    T, C = rng.normal(size=(1, 10, 48)), rng.normal(size=(1, 1, 32))
    store = _store(CRIDConfig())
    lit = cmg_forward(store, CRIDConfig(gate_rescale=False), T, C)
    res = cmg_forward(store, CRIDConfig(), T, C)
    assert np.allclose(res.t_tilde.value, lit.t_tilde.value * 10 * 32, rtol=1e-14)
    assert np.array_equal(res.alpha, lit.alpha) and np.array_equal(res.beta, lit.beta)
