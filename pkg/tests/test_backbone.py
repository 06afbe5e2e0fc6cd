import numpy as np
import pytest

from agcd import numcore as nc
from agcd.backbone import (
    BackboneConfig,
    baseline_head,
    encode,
    init_backbone,
    init_baseline_head,
    patchify,
    unpatchify,
    unpatchify_array,
)
from agcd.errors import ShapeError

SMALL = BackboneConfig(H=8, W=8, n_vars=2, patch=4, d=8, heads=2, depth=2, mlp_ratio=2)


def _params(cfg, seed=0, head=True):
    store = nc.ParamStore()
    rng = np.random.default_rng(seed)
    init_backbone(store, cfg, rng)
    if head:
        init_baseline_head(store, cfg, rng)
    return store


def test_patchify_shapes_and_layout():
    x = np.arange(4 * 16 * 16, dtype=float).reshape(4, 16, 16)
    t = patchify(x, 4)
    assert t.shape == (16, 64)
    # second patch is the block at rows 0..3, cols 4..7; layout [variable][row][col]
    assert t[1, 0] == x[0, 0, 4] and t[1, 1] == x[0, 0, 5] and t[1, 4] == x[0, 1, 4] and t[1, 16] == x[1, 0, 4]


def test_patchify_constant_and_inverse():
    assert np.all(patchify(np.full((4, 16, 16), 3.0), 4) == 3.0)
    x = np.random.default_rng(0).normal(size=(3, 4, 16, 16))
    t = patchify(x, 4)
    assert unpatchify_array(t, 4, 4, 16, 16).tobytes() == x.tobytes()
    assert unpatchify(nc.Var(t), 4, 4, 16, 16).value.tobytes() == x.tobytes()


def test_patchify_indivisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((4, 16, 16)), 5)


def test_encode_default_shapes():
    cfg = BackboneConfig()
    P, C = encode(_params(cfg), cfg, patchify(np.zeros((2, 4, 16, 16)), 4))
    assert P.shape == (2, 16, 32) and C.shape == (2, 1, 32)


def test_encode_shape_mismatch():
    cfg = BackboneConfig()
    with pytest.raises(ShapeError):
        encode(_params(cfg), cfg, np.zeros((1, 15, 64)))


def test_zero_network_trace():
    cfg = BackboneConfig()
    store = _params(cfg)
    cls = store["bb.cls"].copy()
    for name in store.names():
        if name != "bb.cls":
            store[name] = np.zeros_like(store[name])
    x = np.random.default_rng(1).normal(size=(2, 4, 16, 16))
    P, C = encode(store, cfg, patchify(x, 4))
    assert np.all(P.value == 0.0)
    assert np.array_equal(C.value[0], cls) and np.array_equal(C.value[1], cls)


def test_encode_deterministic():
    cfg = SMALL
    store = _params(cfg)
    x = patchify(np.random.default_rng(2).normal(size=(2, 2, 8, 8)), 4)
    a = encode(store, cfg, x)[0].value
    b = encode(_params(cfg), cfg, x)[0].value
    assert a.tobytes() == b.tobytes()


def test_permutation_equivariance_without_positions():
    cfg = BackboneConfig()
    store = _params(cfg)
    store["bb.pos"] = np.zeros_like(store["bb.pos"])
    x = patchify(np.random.default_rng(3).normal(size=(1, 4, 16, 16)), 4)
    perm = np.random.default_rng(4).permutation(16)
    P, C = encode(store, cfg, x)
    Pp, Cp = encode(store, cfg, x[:, perm])
    assert np.allclose(Pp.value, P.value[:, perm], atol=1e-12)
    assert np.allclose(Cp.value, C.value, atol=1e-12)


def test_baseline_head_zero_and_shape():
    cfg = BackboneConfig()
    store = _params(cfg)
    store["head.b"] = np.zeros_like(store["head.b"])
    out = baseline_head(store, cfg, np.zeros((2, 16, 32)))
    assert out.shape == (2, 4, 16, 16) and np.all(out.value == 0)


def test_gradient_check_backbone_and_head():
    store = _params(SMALL)
    rng = np.random.default_rng(5)
    x = patchify(rng.normal(size=(3, 2, 8, 8)), 4)
    probe = rng.normal(size=(3, 2, 8, 8))

    def loss():
        P, _ = encode(store, SMALL, x)
        return nc.mean_all(nc.mul(baseline_head(store, SMALL, P), probe))

    with nc.Tape() as tape:
        tape.backward(loss())
    rep = nc.grad_check(lambda _: float(loss().value), store, eps=1e-5, tol=1e-4)
    assert rep.passed, rep.worst


def test_autoencoding_smoke_reconstructs_patch_means():
    cfg = SMALL
    store = _params(cfg)
    store["head.w"] = store["bb.patch.w"].T.copy()
    rng = np.random.default_rng(6)
    x = rng.normal(size=(64, 2, 8, 8))
    # smooth fields so patch means carry the signal
    x = (x + np.roll(x, 1, -1) + np.roll(x, 1, -2) + np.roll(x, (1, 1), (-2, -1))) / 4
    xp = patchify(x, 4)
    target_means = xp.reshape(64, 4, 2, 16).mean(axis=-1)
    state = nc.AdamState()

    def patch_means():
        P, _ = encode(store, cfg, xp)
        return baseline_head(store, cfg, P).value

    before = np.mean((patchify(patch_means(), 4).reshape(64, 4, 2, 16).mean(-1) - target_means) ** 2)
    for _ in range(300):
        with nc.Tape() as tape:
            P, _ = encode(store, cfg, xp)
            loss = nc.mean_all(nc.square(nc.sub(baseline_head(store, cfg, P), x)))
            tape.backward(loss)
        nc.adam_step(store, state, 5e-3)
        store.zero_grad()
    after = np.mean((patchify(patch_means(), 4).reshape(64, 4, 2, 16).mean(-1) - target_means) ** 2)
    assert after < 0.1 * np.var(target_means) and after < before
