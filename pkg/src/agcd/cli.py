"""Command-line entry point: ``agcd <command> [flags]``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .errors import AgcdError, ConfigError, DataError
from .evalkit.experiments import SUITES, STEP_HOURS, Workbench, run_ablation
from .evalkit.metrics import score_fields, write_metrics_csv
from .evalkit.model import VARIANTS, init_forecaster, load_checkpoint, save_checkpoint
from .evalkit.rollout import audit_causality, first_violation, rollout_many
from .evalkit.train import TEXT_MODES, make_pairs, narrative_texts, train
from .fieldgrid import (
    AtmosphericState,
    Dataset,
    NormStats,
    OracleAnnotation,
    compute_climatology,
    gen_synthetic,
    latitude_weights,
    read_grid_file,
    write_grid_file,
)
from .heatmap import ColormapSpec, render_field, write_ppm
from .mmnp.backends import HttpBackend, MockBackend
from .mmnp.cache import NarrationCache
from .mmnp.narrate import narrate_dataset
from .mmnp.text import Narrative

log = logging.getLogger("agcd")

DATA_FILE = "data.agcd"
ANNOTATIONS_FILE = "annotations.jsonl"
CLIMATOLOGY_FILE = "climatology.agcd"


# ---------------------------------------------------------------------------
# helpers


def _load_dataset(data_dir: str | Path) -> Dataset:
    data_dir = Path(data_dir)
    path = data_dir / DATA_FILE
    if not path.exists():
        raise DataError(f"no dataset at {path}; run gen-data first")
    ds = read_grid_file(path)
    ann_path = data_dir / ANNOTATIONS_FILE
    if ann_path.exists():
        by_key = {}
        for line in ann_path.read_text().splitlines():
            if line.strip():
                a = OracleAnnotation.from_json(json.loads(line))
                by_key[(a.sample_id, a.time_index)] = a
        ds.annotations = [[by_key[(s.sample_id, s.time_index)] for s in seq] for seq in ds.sequences]
    return ds


def _cache_path(args) -> Path:
    return Path(args.cache) if args.cache else Path(args.data) / "narratives.jsonl"


def _backend(cfg: Config, name: str, url: str | None):
    if name == "http":
        if not (url or cfg.mmnp.url):
            raise DataError("http backend needs --url or mmnp.url")
        return HttpBackend(url or cfg.mmnp.url, cfg.mmnp.retries, cfg.mmnp.backoff, cfg.mmnp.timeout)
    return MockBackend(cfg.mmnp.defect_rate)


def _write_config(cfg: Config, out_dir: Path) -> None:
    cfg.dump(out_dir / "config.json")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: Config) -> int:
    out = Path(args.out)
    seed = cfg.data.seed if args.seed is None else args.seed
    n = cfg.data.samples if args.samples is None else args.samples
    horizon = cfg.data.horizon if args.horizon is None else args.horizon
    ds = gen_synthetic(seed, n, cfg.grid(), horizon, cfg.generator(), prefix=args.prefix)
    out.mkdir(parents=True, exist_ok=True)
    write_grid_file(out / DATA_FILE, ds)
    with open(out / ANNOTATIONS_FILE, "w", encoding="utf-8") as fh:
        for seq in ds.annotations:
            for a in seq:
                fh.write(json.dumps(a.to_json(), sort_keys=True) + "\n")
    _write_config(cfg, out)
    print(f"wrote {n} samples x {horizon + 1} states to {out / DATA_FILE}")
    return 0


def cmd_narrate(args, cfg: Config) -> int:
    ds = _load_dataset(args.data)
    cache = NarrationCache(_cache_path(args))
    backend = _backend(cfg, args.backend, args.url)
    if args.defect_rate is not None and isinstance(backend, MockBackend):
        backend = MockBackend(args.defect_rate)
    rounds = cfg.mmnp.rounds if args.rounds is None else args.rounds
    cmap = None
    if cfg.mmnp.render_images or args.backend == "http":
        cmap = ColormapSpec.from_stats(NormStats.fit(ds.states(), ds.spec.variables))
    steps = None if args.all_steps else [0]
    summary = narrate_dataset(ds, backend, cache, rounds, cfg.mmnp.strategy, cmap, steps=steps)
    print(summary.line())
    print(f"backend calls={backend.calls}")
    return 0


def cmd_train(args, cfg: Config) -> int:
    ds = _load_dataset(args.data)
    out = Path(args.out)
    # narrations are cached for each sequence's initial state, so pairs start there
    pairs = make_pairs(ds, first_only=True)
    stats = NormStats.fit(ds.states(), ds.spec.variables)
    seed = cfg.train.seed if args.seed is None else args.seed
    model = init_forecaster(cfg.model_spec(args.variant), stats, ds.spec.variables, seed)
    texts = None
    if model.uses_text:
        cache = NarrationCache(_cache_path(args)) if (args.text != "empty") else None
        if cache is not None and len(cache) == 0:
            raise DataError(f"narration cache {_cache_path(args)} is empty; run narrate first")
        texts = narrative_texts(pairs, cache, args.text, seed)
    tcfg = cfg.train_config(args.steps)
    tcfg = type(tcfg)(tcfg.steps, tcfg.batch, tcfg.lr, tcfg.final_lr_fraction, seed)
    result = train(model, pairs, texts, tcfg, latitude_weights(ds.spec), out / "loss.csv")
    digest = save_checkpoint(out / "model.ckpt", model)
    clim = compute_climatology(ds)
    write_grid_file(out / CLIMATOLOGY_FILE, Dataset(ds.spec, [[AtmosphericState("climatology", 0, clim.fields)]]))
    _write_config(cfg, out)
    print(f"trained {args.variant} for {len(result.losses)} steps; final loss {result.losses[-1]:.6f}; checkpoint {digest[:12]}")
    return 0


def _load_climatology(ckpt: Path, variables) -> np.ndarray:
    path = ckpt.parent / CLIMATOLOGY_FILE
    if not path.exists():
        raise DataError(f"no training climatology next to {ckpt}")
    state = read_grid_file(path).sequences[0][0]
    return state.stack(variables)


def cmd_eval(args, cfg: Config) -> int:
    ds = _load_dataset(args.data)
    ckpt = Path(args.ckpt)
    model = load_checkpoint(ckpt)
    pairs = make_pairs(ds, first_only=True)
    texts = None
    if model.uses_text:
        cache = NarrationCache(_cache_path(args)) if args.text != "empty" else None
        texts = narrative_texts(pairs, cache, args.text, cfg.train.seed)
    pred = model.predict_arrays(pairs.x, texts)
    clim = _load_climatology(ckpt, model.variables)
    rows = score_fields(pred, pairs.y, clim, latitude_weights(ds.spec), model.variables, STEP_HOURS)
    write_metrics_csv(args.out, rows)
    for r in rows:
        print(f"{r.variable}: rmse={r.rmse:.5f} acc={r.acc:.4f}")
    return 0


def cmd_rollout(args, cfg: Config) -> int:
    ds = _load_dataset(args.data)
    ckpt = Path(args.ckpt)
    model = load_checkpoint(ckpt)
    K = cfg.eval.rollout_steps if args.steps is None else args.steps
    if any(len(seq) < K + 1 for seq in ds.sequences):
        raise DataError(f"dataset horizon is shorter than {K} steps")
    states0 = [seq[0] for seq in ds.sequences]
    narr0 = None
    if model.uses_text:
        cache = NarrationCache(_cache_path(args))
        narr0 = []
        for s in states0:
            try:
                narr0.append(Narrative.from_text(cache.get(s.sample_id, s.time_index).narrative))
            except KeyError:
                raise DataError(f"no cached narrative for {s.sample_id!r}; run narrate first") from None
    traces = rollout_many(model, _backend(cfg, args.backend, args.url), states0, narr0, K)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clim = _load_climatology(ckpt, model.variables)
    w = latitude_weights(ds.spec)
    rows = []
    for k in range(1, K + 1):
        pred = np.stack([t.predictions[k - 1].stack(model.variables) for t in traces])
        truth = np.stack([seq[k].stack(model.variables) for seq in ds.sequences])
        rows += score_fields(pred, truth, clim, w, model.variables, STEP_HOURS * k)
    write_metrics_csv(out / "metrics.csv", rows)
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps({
                "sample_id": t.initial.sample_id,
                "narratives": [n.text for n in t.narratives],
                "provenance": [{"step": r.step, "purpose": r.purpose, "consumed": r.consumed, "produced": r.produced}
                               for r in t.provenance],
            }, sort_keys=True) + "\n")
    _write_config(cfg, out)
    print(f"rolled out {len(traces)} samples for {K} steps")
    if args.audit:
        bad = [(t.initial.sample_id, first_violation(t)) for t in traces if not audit_causality(t)]
        if bad:
            sid, (step, ident) = bad[0]
            print(f"audit FAIL: {sid} step {step} consumed {ident}")
            return 1
        print("audit PASS")
    return 0


def cmd_render(args, cfg: Config) -> int:
    ds = _load_dataset(args.data)
    stats = NormStats.fit(ds.states(), ds.spec.variables)
    cmap = ColormapSpec.from_stats(stats)
    match = [s for s in ds.states() if s.sample_id == args.sample and s.time_index == args.step]
    if not match:
        raise DataError(f"sample {args.sample!r} step {args.step} not in dataset")
    state = match[0]
    variables = [args.var] if args.var else list(ds.spec.variables)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in variables:
        if v not in state.fields:
            raise DataError(f"unknown variable {v!r}")
        path = out / f"{state.sample_id}_{state.time_index}_{v}.ppm"
        write_ppm(render_field(state.fields[v], cmap, v), path)
        print(path)
    return 0


def cmd_ablate(args, cfg: Config) -> int:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    exp = cfg.experiment(seeds, args.steps)
    if args.samples is not None:
        exp = type(exp)(**{**exp.__dict__, "n_train": args.samples, "n_test": max(2, args.samples // 8)})
    bench = Workbench(exp)
    result = run_ablation(bench, args.suite)
    write_metrics_csv(args.out, result.table(), extra=("suite", "configuration"))
    for k, v in result.notes.items():
        print(f"{k}: {v}")
    print(f"wrote {len(result.table())} rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agcd", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int)
    g.add_argument("--samples", type=int)
    g.add_argument("--horizon", type=int)
    g.add_argument("--prefix", default="s")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    n = sub.add_parser("narrate", help="narrate a dataset into the cache")
    n.add_argument("--data", required=True)
    n.add_argument("--backend", choices=("mock", "http"), default="mock")
    n.add_argument("--url")
    n.add_argument("--cache")
    n.add_argument("--rounds", type=int)
    n.add_argument("--defect-rate", type=float, dest="defect_rate")
    n.add_argument("--all-steps", action="store_true", dest="all_steps")
    n.set_defaults(func=cmd_narrate)

    t = sub.add_parser("train", help="train a forecaster")
    t.add_argument("--data", required=True)
    t.add_argument("--cache")
    t.add_argument("--variant", choices=VARIANTS, default="agcd")
    t.add_argument("--text", choices=TEXT_MODES, default="matched")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="one-step metrics for a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--cache")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--text", choices=TEXT_MODES, default="matched")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="autoregressive rollout with narrative editing")
    r.add_argument("--data", required=True)
    r.add_argument("--cache")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--steps", type=int)
    r.add_argument("--backend", choices=("mock", "http"), default="mock")
    r.add_argument("--url")
    r.add_argument("--audit", action="store_true")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    d = sub.add_parser("render", help="write PPM heatmaps for one state")
    d.add_argument("--data", required=True)
    d.add_argument("--sample", required=True)
    d.add_argument("--step", type=int, default=0)
    d.add_argument("--var")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_render)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--suite", choices=SUITES, required=True)
    a.add_argument("--seeds", help="comma-separated seeds (default from config)")
    a.add_argument("--steps", type=int, help="training steps per run")
    a.add_argument("--samples", type=int, help="training samples per seed")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except AgcdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
