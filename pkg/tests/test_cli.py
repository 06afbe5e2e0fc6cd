import json

import pytest

from agcd.cli import main

FAST = {"train": {"steps": 3, "batch": 4}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(FAST))
    assert main(["gen-data", "--seed", "1", "--samples", "6", "--horizon", "3", "--out", str(d / "data")]) == 0
    assert main(["narrate", "--data", str(d / "data")]) == 0
    assert main(["--config", str(cfg), "train", "--data", str(d / "data"), "--out", str(d / "run")]) == 0
    return d


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--seed", "3", "--samples", "2", "--out", str(tmp_path / name)]) == 0
    for f in ("data.agcd", "annotations.jsonl", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_data_empty(tmp_path):
    assert main(["gen-data", "--samples", "0", "--out", str(tmp_path)]) == 0
    from agcd.fieldgrid import read_grid_file
    assert len(read_grid_file(tmp_path / "data.agcd")) == 0


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--bogus", "--out", "x"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"train": {"nope": 1}}')
    assert main(["--config", str(cfg), "gen-data", "--out", str(tmp_path / "d")]) == 2


def test_missing_dataset_exits_1(tmp_path):
    assert main(["narrate", "--data", str(tmp_path / "nothing")]) == 1


def test_narrate_warm_cache(workdir, capsys):
    assert main(["narrate", "--data", str(workdir / "data")]) == 0
    out = capsys.readouterr().out
    assert "cached=6" in out and "backend calls=0" in out


def test_narrate_fallback_with_zero_rounds(tmp_path, capsys):
    assert main(["gen-data", "--samples", "8", "--out", str(tmp_path / "d")]) == 0
    capsys.readouterr()
    assert main(["narrate", "--data", str(tmp_path / "d"), "--rounds", "0", "--defect-rate", "1.0"]) == 0
    out = capsys.readouterr().out
    fallback = int(out.split("fallback=")[1].split()[0])
    assert fallback > 0


def test_train_without_cache_exits_1(tmp_path):
    assert main(["gen-data", "--samples", "4", "--out", str(tmp_path / "d")]) == 0
    assert main(["train", "--data", str(tmp_path / "d"), "--steps", "1", "--out", str(tmp_path / "r")]) == 1


def test_train_outputs(workdir):
    run = workdir / "run"
    for f in ("model.ckpt", "loss.csv", "climatology.agcd", "config.json"):
        assert (run / f).exists()
    assert len((run / "loss.csv").read_text().splitlines()) == 4


def test_eval_csv_and_determinism(workdir):
    args = ["eval", "--data", str(workdir / "data"), "--ckpt", str(workdir / "run" / "model.ckpt")]
    assert main(args + ["--out", str(workdir / "m1.csv")]) == 0
    assert main(args + ["--out", str(workdir / "m2.csv")]) == 0
    a, b = (workdir / "m1.csv").read_bytes(), (workdir / "m2.csv").read_bytes()
    assert a == b
    assert a.decode().splitlines()[0] == "lead_hours,variable,rmse,acc"
    assert main(args + ["--text", "shuffled", "--out", str(workdir / "m3.csv")]) == 0
    assert (workdir / "m3.csv").read_bytes() != a


def test_rollout_audit_pass(workdir, capsys):
    out = workdir / "roll"
    assert main(["rollout", "--data", str(workdir / "data"), "--ckpt", str(workdir / "run" / "model.ckpt"),
                 "--steps", "3", "--audit", "--out", str(out)]) == 0
    assert "audit PASS" in capsys.readouterr().out
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 4
    assert len((out / "trace.jsonl").read_text().splitlines()) == 6


def test_rollout_beyond_horizon_exits_1(workdir):
    assert main(["rollout", "--data", str(workdir / "data"), "--ckpt", str(workdir / "run" / "model.ckpt"),
                 "--steps", "8", "--out", str(workdir / "r2")]) == 1


def test_render_deterministic(workdir, tmp_path):
    for name in ("a", "b"):
        assert main(["render", "--data", str(workdir / "data"), "--sample", "s00000", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == [f"s00000_0_{v}.ppm" for v in sorted("ztuv")]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["render", "--data", str(workdir / "data"), "--sample", "zz", "--out", str(tmp_path)]) == 1


def test_ablate_unknown_suite_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--suite", "all", "--out", "x.csv"])
    assert exc.value.code == 2


@pytest.mark.parametrize("suite,settings", [("crid", 4), ("agents", 5)])
def test_ablate_row_counts(tmp_path, suite, settings):
    out = tmp_path / "a.csv"
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**FAST, "eval": {"seeds": [0]}}))
    assert main(["--config", str(cfg), "ablate", "--suite", suite, "--samples", "16", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "suite,configuration,lead_hours,variable,rmse,acc"
    assert len(lines) == 1 + settings * 4
