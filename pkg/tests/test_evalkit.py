import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from agcd.backbone import BackboneConfig
from agcd.crid import CRIDConfig
from agcd.errors import ConfigError, ContractError, CorruptionError, DataError, FormatError, ShapeError
from agcd.evalkit.metrics import (
    METRICS_HEADER,
    acc,
    acc_reference,
    lat_rmse,
    lat_rmse_reference,
    read_metrics_csv,
    score_fields,
    write_metrics_csv,
)
from agcd.evalkit.model import ModelSpec, init_forecaster, load_checkpoint, save_checkpoint
from agcd.evalkit.rollout import FutureLeakStub, audit_causality, first_violation, rollout, rollout_many
from agcd.evalkit.train import TrainConfig, derangement, learning_rate, make_pairs, narrative_texts, train
from agcd.evalkit.experiments import CRID_ABLATIONS, ExperimentConfig, Workbench, run_ablation
from agcd.fieldgrid import GridSpec, NormStats, gen_synthetic, latitude_weights
from agcd.mmnp.backends import MockBackend
from agcd.mmnp.cache import NarrationCache
from agcd.mmnp.narrate import narrate_dataset
from agcd.mmnp.text import Narrative

VARS = ("z", "t", "u", "v")


# --- metrics -----------------------------------------------------------------


def test_rmse_hand_example():
    w = latitude_weights(GridSpec((60.0, 0.0), (0.0,), ("z",)))
    assert np.allclose(w, [2 / 3, 4 / 3])
    pred = np.array([[3.0], [0.0]])
    assert math.isclose(lat_rmse(pred, np.zeros((2, 1)), w), math.sqrt(3), rel_tol=1e-12)


def test_rmse_zero_and_uniform_weights(rng):
    a, b = rng.normal(size=(2, 5, 7))
    assert lat_rmse(a, a, np.ones(5)) == 0.0
    assert abs(lat_rmse(a, b, np.ones(5)) - np.sqrt(np.mean((a - b) ** 2))) < 1e-12


def test_rmse_shape_errors():
    with pytest.raises(ShapeError):
        lat_rmse(np.zeros((2, 3)), np.zeros((3, 2)), np.ones(2))
    with pytest.raises(ShapeError):
        lat_rmse(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(3))


def test_acc_cases(rng):
    clim = rng.normal(size=(4, 6))
    anom = rng.normal(size=(4, 6))
    w = np.linspace(0.5, 1.5, 4)
    assert math.isclose(acc(clim + anom, clim + anom, clim, w), 1.0, rel_tol=1e-12)
    assert math.isclose(acc(clim - anom, clim + anom, clim, w), -1.0, rel_tol=1e-12)
    assert acc(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.zeros((1, 2)), np.ones(1)) == 0.0
    # zero anomalies hit the floored denominator instead of dividing by zero
    assert acc(clim, clim, clim, w) == 0.0


@given(st.integers(0, 10_000))
def test_metrics_match_double_loop(seed):
    r = np.random.default_rng(seed)
    H, W = int(r.integers(1, 6)), int(r.integers(1, 6))
    p, t, c = r.normal(size=(3, H, W))
    w = r.uniform(0.1, 2.0, H)
    assert abs(lat_rmse(p, t, w) - lat_rmse_reference(p.tolist(), t.tolist(), w.tolist())) < 1e-12
    assert abs(acc(p, t, c, w) - acc_reference(p.tolist(), t.tolist(), c.tolist(), w.tolist())) < 1e-12


@given(st.integers(0, 10_000))
def test_acc_bounded(seed):
    r = np.random.default_rng(seed)
    p, t, c = r.normal(size=(3, 3, 4))
    assert -1 - 1e-12 <= acc(p, t, c, r.uniform(0.1, 2, 3)) <= 1 + 1e-12


def test_score_fields_and_csv(tmp_path, rng):
    pred, truth = rng.normal(size=(2, 3, 4, 5, 6))
    rows = score_fields(pred, truth, np.zeros((4, 5, 6)), np.ones(5), VARS, 6)
    assert [r.variable for r in rows] == list(VARS) and all(r.lead_hours == 6 for r in rows)
    path = tmp_path / "m.csv"
    write_metrics_csv(path, rows)
    assert path.read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    back = read_metrics_csv(path)
    assert [float(r["rmse"]) for r in back] == [r.rmse for r in rows]


# --- training ------------------------------------------------------------------


@given(st.integers(2, 200), st.integers(0, 10_000))
def test_derangement_has_no_fixed_points(n, seed):
    perm = derangement(n, np.random.default_rng(seed))
    assert sorted(perm) == list(range(n))
    assert np.all(perm != np.arange(n))


def test_derangement_too_small():
    with pytest.raises(ContractError):
        derangement(1, np.random.default_rng(0))


def test_learning_rate_schedule():
    cfg = TrainConfig(steps=101, lr=2e-3, final_lr_fraction=0.1)
    assert learning_rate(cfg, 1) == pytest.approx(2e-3)
    assert learning_rate(cfg, 101) == pytest.approx(2e-4)
    assert learning_rate(cfg, 51) == pytest.approx(1.1e-3)


@pytest.fixture(scope="module")
def small_world():
    spec = GridSpec.regular(16, 16, VARS)
    tr = gen_synthetic(3, 48, spec, 1)
    te = gen_synthetic(4, 6, spec, 8, prefix="te")
    cache = NarrationCache(None)
    narrate_dataset(tr, MockBackend(), cache, steps=[0])
    narrate_dataset(te, MockBackend(), cache, steps=[0])
    stats = NormStats.fit(tr.states(), VARS)
    return spec, tr, te, cache, stats


def test_text_modes(small_world):
    spec, tr, te, cache, stats = small_world
    pairs = make_pairs(tr)
    matched = narrative_texts(pairs, cache, "matched")
    shuffled = narrative_texts(pairs, cache, "shuffled", seed=1)
    assert narrative_texts(pairs, cache, "empty") == [""] * len(pairs)
    assert sorted(matched) == sorted(shuffled)
    perm = derangement(len(pairs), np.random.default_rng(1))
    assert shuffled == [matched[j] for j in perm]
    with pytest.raises(DataError):
        narrative_texts(pairs, NarrationCache(None), "matched")
    with pytest.raises(ContractError):
        narrative_texts(pairs, cache, "noise")


def test_training_reduces_loss_default_model():
    losses_1, losses_100 = [], []
    spec = GridSpec.regular()
    for seed in range(5):
        tr = gen_synthetic(100 + seed, 128, spec, 1)
        cache = NarrationCache(None)
        narrate_dataset(tr, MockBackend(), cache, steps=[0])
        pairs = make_pairs(tr)
        m = init_forecaster(ModelSpec(), NormStats.fit(tr.states(), VARS), VARS, seed)
        res = train(m, pairs, narrative_texts(pairs, cache, "matched"), TrainConfig(steps=100, seed=seed),
                    latitude_weights(spec))
        losses_1.append(res.losses[0])
        losses_100.append(res.losses[-1])
    assert np.median(losses_100) < np.median(losses_1)


def test_training_deterministic_and_csv(small_world, tmp_path):
    spec, tr, te, cache, stats = small_world
    pairs = make_pairs(tr)
    cfg = TrainConfig(steps=5, batch=8)
    runs = []
    for i in range(2):
        m = init_forecaster(ModelSpec("baseline"), stats, VARS, 0)
        train(m, pairs, None, cfg, loss_csv=tmp_path / f"l{i}.csv")
        runs.append(m)
    assert (tmp_path / "l0.csv").read_bytes() == (tmp_path / "l1.csv").read_bytes()
    assert (tmp_path / "l0.csv").read_text().splitlines()[0] == "step,loss"
    for n in runs[0].params.names():
        assert runs[0].params[n].tobytes() == runs[1].params[n].tobytes()


def test_training_input_errors(small_world):
    spec, tr, te, cache, stats = small_world
    pairs = make_pairs(tr)
    m = init_forecaster(ModelSpec(), stats, VARS, 0)
    with pytest.raises(DataError):
        train(m, pairs, None, TrainConfig(steps=1))
    with pytest.raises(DataError):
        train(m, make_pairs(gen_synthetic(0, 0, spec, 1)), [], TrainConfig(steps=1))


def test_unknown_variant():
    with pytest.raises(ConfigError):
        ModelSpec("hybrid")


# --- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip(small_world, tmp_path):
    spec, tr, te, cache, stats = small_world
    m = init_forecaster(ModelSpec(), stats, VARS, 2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m)
    m2 = load_checkpoint(path)
    assert m2.spec == m.spec and m2.variables == m.variables
    x = np.stack([s.stack(VARS) for s in tr.states()])[:3]
    texts = ["z: strong maximum +2.3 near south-west"] * 3
    assert m.predict_arrays(x, texts).tobytes() == m2.predict_arrays(x, texts).tobytes()


def test_checkpoint_corruption_and_format(small_world, tmp_path):
    spec, tr, te, cache, stats = small_world
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, init_forecaster(ModelSpec("baseline"), stats, VARS, 0))
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        load_checkpoint(bad)
    bad.write_bytes(bytes(raw[:-16]))
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    bad.write_bytes(b"NOT-A-CKPT 1\n{}\n")
    with pytest.raises(FormatError):
        load_checkpoint(bad)


# --- rollout ---------------------------------------------------------------


@pytest.fixture(scope="module")
def rollout_setup(small_world):
    spec, tr, te, cache, stats = small_world
    m = init_forecaster(ModelSpec(), stats, VARS, 0)
    states0 = [seq[0] for seq in te.sequences]
    narr0 = [Narrative.from_text(cache.get(s.sample_id, 0).narrative) for s in states0]
    truths = [seq[1:] for seq in te.sequences]
    return m, states0, narr0, truths


def test_rollout_zero_steps(rollout_setup):
    m, states0, narr0, truths = rollout_setup
    tr = rollout(m, MockBackend(), states0[0], narr0[0], 0)
    assert tr.steps == 0 and tr.narratives == [narr0[0]] and tr.initial is states0[0]
    assert audit_causality(tr)


def test_rollout_eight_steps(rollout_setup):
    m, states0, narr0, truths = rollout_setup
    tr = rollout(m, MockBackend(), states0[0], narr0[0], 8, truths[0])
    assert tr.steps == 8 and len(tr.narratives) == 9
    assert [p.time_index for p in tr.predictions] == list(range(1, 9))
    assert audit_causality(tr) and first_violation(tr) is None
    # every step reads only its predecessor's state and narrative
    predict = [r for r in tr.provenance if r.purpose == "predict"]
    assert predict[0].consumed == ["state:0", "narr:0"]
    assert predict[4].consumed == ["pred:4", "narr:4"]


def test_rollout_negative_steps(rollout_setup):
    m, states0, narr0, truths = rollout_setup
    with pytest.raises(ContractError):
        rollout(m, MockBackend(), states0[0], narr0[0], -1)


def test_leak_is_detected_at_its_step(rollout_setup):
    m, states0, narr0, truths = rollout_setup
    tr = rollout(FutureLeakStub(m, 3), MockBackend(), states0[0], narr0[0], 8, truths[0])
    assert not audit_causality(tr)
    assert first_violation(tr) == (3, "truth:3")


def test_batched_rollout_matches_single(rollout_setup):
    m, states0, narr0, truths = rollout_setup
    many = rollout_many(m, MockBackend(), states0[:3], narr0[:3], 4)
    for i in range(3):
        assert many[i].fingerprint() == rollout(m, MockBackend(), states0[i], narr0[i], 4).fingerprint()


def test_rollout_deterministic(rollout_setup):
    m, states0, narr0, truths = rollout_setup
    a = rollout_many(m, MockBackend(), states0, narr0, 3)
    b = rollout_many(m, MockBackend(), states0, narr0, 3)
    assert [t.fingerprint() for t in a] == [t.fingerprint() for t in b]


# --- experiment plumbing -----------------------------------------------------


def _tiny_bench():
    cfg = ExperimentConfig(seeds=(0,), n_train=16, n_test=4, rollout_steps=2, train=TrainConfig(steps=2, batch=4),
                           backbone=BackboneConfig(), crid=CRIDConfig())
    return Workbench(cfg)


def test_crid_suite_shape_and_cost_ratio():
    res = run_ablation(_tiny_bench(), "crid")
    assert set(res.per_seed) == set(CRID_ABLATIONS)
    for name in CRID_ABLATIONS:
        assert [r.variable for r in res.per_seed[name][0]] == list(VARS)
    assert res.notes["attention_cost_ratio"] == "85/8"


def test_unknown_suite():
    with pytest.raises(ConfigError):
        run_ablation(_tiny_bench(), "everything")


def test_workbench_eval_deterministic():
    b = _tiny_bench()
    m = b.model(0, "agcd")
    assert b.one_step(0, m) == b.one_step(0, m)
    assert len(b.rollout_rows(0, m)) == 2 * len(VARS)
