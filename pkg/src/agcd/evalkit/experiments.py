"""Semantic-control, ablation and rollout experiment suites at desk scale.

A :class:`Workbench` owns the per-seed data, narration caches and trained
models so that suites sharing a configuration reuse the same training runs.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..crid import CRIDConfig, attention_cost_ratio
from ..errors import ConfigError
from ..fieldgrid import Dataset, GeneratorParams, GridSpec, NormStats, compute_climatology, gen_synthetic, latitude_weights
from ..mmnp.backends import MockBackend
from ..mmnp.cache import NarrationCache
from ..mmnp.narrate import narrate_dataset
from ..mmnp.text import Narrative
from ..backbone import BackboneConfig
from .metrics import MetricRow, score_fields
from .model import Forecaster, ModelSpec, init_forecaster
from .rollout import rollout_many
from .train import PairSet, TrainConfig, make_pairs, narrative_texts, train

log = logging.getLogger(__name__)

STEP_HOURS = 6
SUITES = ("crid", "mmnp", "agents")
CRID_ABLATIONS = ("no_region", "no_hopfield", "no_cmg", "full")
MMNP_STRATEGIES = ("single_agent", "no_evaluator", "full")
# describer enabling order; the four toy variables stand in for
# 2 m temperature, 10 m wind (two components) and 500 hPa geopotential
AGENT_ORDER = ("t", "u", "v", "z")


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_train: int = 2048
    n_test: int = 256
    H: int = 16
    W: int = 16
    variables: tuple[str, ...] = ("z", "t", "u", "v")
    rollout_steps: int = 8
    max_start: int = 0
    rounds: int = 2
    narrator_defect_rate: float = 0.0
    ablation_defect_rate: float = 0.25
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    crid: CRIDConfig = field(default_factory=CRIDConfig)

    def generator(self) -> GeneratorParams:
        return GeneratorParams(max_start=self.max_start)

    def grid(self) -> GridSpec:
        return GridSpec.regular(self.H, self.W, self.variables)


@dataclass
class SeedData:
    seed: int
    train_set: Dataset
    test_set: Dataset
    train_pairs: PairSet
    test_pairs: PairSet
    cache: NarrationCache
    stats: NormStats
    weights: np.ndarray
    climatology: np.ndarray  # (V, H, W), training split only


def _crid_variant(base: CRIDConfig, name: str) -> CRIDConfig:
    if name == "full":
        return base
    if name == "no_region":
        return dataclasses.replace(base, use_region=False)
    if name == "no_hopfield":
        return dataclasses.replace(base, use_hopfield=False)
    if name == "no_cmg":
        return dataclasses.replace(base, use_cmg=False)
    raise ConfigError(f"unknown CRID ablation {name!r}")


class Workbench:
    """Memoizing runner; every artefact is a pure function of (config, seed, key)."""

    def __init__(self, config: ExperimentConfig | None = None):
        self.config = config or ExperimentConfig()
        self._data: dict[int, SeedData] = {}
        self._models: dict[tuple, Forecaster] = {}
        self._caches: dict[tuple, NarrationCache] = {}
        self.timings: dict[tuple, float] = {}

    # -- data ----------------------------------------------------------
    def data(self, seed: int) -> SeedData:
        if seed not in self._data:
            cfg = self.config
            spec = cfg.grid()
            gp = cfg.generator()
            tr = gen_synthetic(10_000 + seed, cfg.n_train, spec, 1, gp, prefix="tr")
            # rollout truth starts from step 0 regardless of the training offsets
            te = gen_synthetic(20_000 + seed, cfg.n_test, spec, cfg.rollout_steps, GeneratorParams(), prefix="te")
            cache = NarrationCache(None)
            backend = MockBackend(cfg.narrator_defect_rate, salt=f"seed{seed}")
            narrate_dataset(tr, backend, cache, cfg.rounds, steps=[0])
            narrate_dataset(te, backend, cache, cfg.rounds, steps=[0])
            stats = NormStats.fit(tr.states(), spec.variables)
            clim_tab = compute_climatology(tr)
            clim = np.stack([clim_tab.fields[v] for v in spec.variables])
            self._data[seed] = SeedData(seed, tr, te, make_pairs(tr), make_pairs(te, first_only=True), cache, stats,
                                        latitude_weights(spec), clim)
        return self._data[seed]

    def cache_for(self, seed: int, strategy: str = "full", variables: Sequence[str] | None = None,
                  defect_rate: float | None = None) -> NarrationCache:
        """Narrations under a non-default strategy or describer subset."""
        cfg = self.config
        rate = cfg.narrator_defect_rate if defect_rate is None else defect_rate
        vs = tuple(variables) if variables is not None else cfg.variables
        if strategy == "full" and vs == cfg.variables and rate == cfg.narrator_defect_rate:
            return self.data(seed).cache
        key = (seed, strategy, vs, rate)
        if key not in self._caches:
            d = self.data(seed)
            cache = NarrationCache(None)
            backend = MockBackend(rate, salt=f"seed{seed}")
            for ds in (d.train_set, d.test_set):
                narrate_dataset(ds, backend, cache, cfg.rounds, strategy, variables=vs, steps=[0])
            self._caches[key] = cache
        return self._caches[key]

    # -- models --------------------------------------------------------
    def model(self, seed: int, variant: str = "agcd", crid: str = "full", text: str = "matched",
              cache_key: tuple = ()) -> Forecaster:
        key = (seed, variant, crid if variant == "agcd" else "", text if variant == "agcd" else "", cache_key)
        if key not in self._models:
            cfg = self.config
            d = self.data(seed)
            spec = ModelSpec(variant, cfg.backbone, _crid_variant(cfg.crid, crid))
            m = init_forecaster(spec, d.stats, cfg.variables, seed)
            texts = None
            if m.uses_text:
                cache = self.cache_for(seed, *cache_key) if cache_key else d.cache
                texts = narrative_texts(d.train_pairs, cache, text, seed)
            t0 = time.perf_counter()
            train(m, d.train_pairs, texts, dataclasses.replace(cfg.train, seed=seed), d.weights)
            self.timings[key] = time.perf_counter() - t0
            log.info("trained %s in %.1fs", key, self.timings[key])
            self._models[key] = m
        return self._models[key]

    # -- evaluation ----------------------------------------------------
    def one_step(self, seed: int, model: Forecaster, text: str = "matched", cache: NarrationCache | None = None) -> list[MetricRow]:
        d = self.data(seed)
        texts = narrative_texts(d.test_pairs, cache or d.cache, text, seed) if model.uses_text else None
        pred = model.predict_arrays(d.test_pairs.x, texts)
        return score_fields(pred, d.test_pairs.y, d.climatology, d.weights, self.config.variables, STEP_HOURS)

    def rollout_rows(self, seed: int, model: Forecaster, editor=None, steps: int | None = None) -> list[MetricRow]:
        d = self.data(seed)
        K = self.config.rollout_steps if steps is None else steps
        states0 = [seq[0] for seq in d.test_set.sequences]
        narr0 = [Narrative.from_text(d.cache.get(s.sample_id, s.time_index).narrative) for s in states0]
        traces = rollout_many(model, editor or MockBackend(), states0, narr0, K)
        vs = self.config.variables
        rows = []
        for k in range(1, K + 1):
            pred = np.stack([tr.predictions[k - 1].stack(vs) for tr in traces])
            truth = np.stack([seq[k].stack(vs) for seq in d.test_set.sequences])
            rows += score_fields(pred, truth, d.climatology, d.weights, vs, STEP_HOURS * k)
        return rows


# ---------------------------------------------------------------------------
# suites


def median_rmse(per_seed: dict[int, list[MetricRow]]) -> dict[tuple[int, str], float]:
    """Median RMSE over seeds for each (lead_hours, variable)."""
    bucket: dict[tuple[int, str], list[float]] = {}
    for rows in per_seed.values():
        for r in rows:
            bucket.setdefault((r.lead_hours, r.variable), []).append(r.rmse)
    return {k: float(np.median(v)) for k, v in bucket.items()}


def _median_rows(per_seed: dict[int, list[MetricRow]]) -> list[MetricRow]:
    acc_b: dict[tuple[int, str], list[float]] = {}
    for rows in per_seed.values():
        for r in rows:
            acc_b.setdefault((r.lead_hours, r.variable), []).append(r.acc)
    med = median_rmse(per_seed)
    return [MetricRow(lead, var, med[(lead, var)], float(np.median(acc_b[(lead, var)]))) for lead, var in med]


@dataclass
class SuiteResult:
    """Per-seed rows for each setting plus median rows for the combined CSV."""

    suite: str
    per_seed: dict[str, dict[int, list[MetricRow]]] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def medians(self, setting: str) -> dict[tuple[int, str], float]:
        return median_rmse(self.per_seed[setting])

    def table(self) -> list[tuple[tuple[str, str], MetricRow]]:
        return [((self.suite, s), r) for s, per in self.per_seed.items() for r in _median_rows(per)]


CONTROL_SETTINGS = ("vision_only", "matched", "shuffled", "empty")


def run_control(bench: Workbench) -> SuiteResult:
    """Vision-only plus the three text settings; only the text input changes."""
    res = SuiteResult("control", {s: {} for s in CONTROL_SETTINGS})
    for seed in bench.config.seeds:
        base = bench.model(seed, "baseline")
        res.per_seed["vision_only"][seed] = bench.one_step(seed, base)
        m = bench.model(seed, "agcd")
        for mode in ("matched", "shuffled", "empty"):
            res.per_seed[mode][seed] = bench.one_step(seed, m, mode)
    return res


def run_ablation(bench: Workbench, suite: str) -> SuiteResult:
    if suite not in SUITES:
        raise ConfigError(f"unknown ablation suite {suite!r}; expected one of {SUITES}")
    cfg = bench.config
    if suite == "crid":
        res = SuiteResult("crid", {s: {} for s in CRID_ABLATIONS})
        ratio = attention_cost_ratio(cfg.crid, cfg.backbone.n_patches, cfg.crid.max_tokens)
        res.notes["attention_cost_ratio"] = f"{cfg.crid.context_length(cfg.backbone.n_patches, cfg.crid.max_tokens)}/{cfg.crid.memory}"
        log.info("no_hopfield attends over all L tokens: cost ratio L/M = %s = %.3f", res.notes["attention_cost_ratio"], ratio)
        for seed in cfg.seeds:
            for name in CRID_ABLATIONS:
                res.per_seed[name][seed] = bench.one_step(seed, bench.model(seed, "agcd", name))
        return res
    if suite == "mmnp":
        res = SuiteResult("mmnp", {s: {} for s in MMNP_STRATEGIES})
        rate = cfg.ablation_defect_rate
        for seed in cfg.seeds:
            for strat in MMNP_STRATEGIES:
                key = (strat, None, rate)
                m = bench.model(seed, "agcd", cache_key=key)
                res.per_seed[strat][seed] = bench.one_step(seed, m, cache=bench.cache_for(seed, *key))
        return res
    settings = ["none"] + [f"+{v}" for v in AGENT_ORDER]
    res = SuiteResult("agents", {s: {} for s in settings})
    for seed in cfg.seeds:
        for n_on, name in enumerate(settings):
            key = ("full", AGENT_ORDER[:n_on], None)
            m = bench.model(seed, "agcd", cache_key=key)
            res.per_seed[name][seed] = bench.one_step(seed, m, cache=bench.cache_for(seed, *key))
    return res


def run_rollout_suite(bench: Workbench) -> SuiteResult:
    res = SuiteResult("rollout", {"baseline": {}, "agcd": {}})
    for seed in bench.config.seeds:
        res.per_seed["baseline"][seed] = bench.rollout_rows(seed, bench.model(seed, "baseline"))
        res.per_seed["agcd"][seed] = bench.rollout_rows(seed, bench.model(seed, "agcd"))
    return res
