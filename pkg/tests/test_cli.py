import json
import time
from pathlib import Path

import numpy as np
import pytest

from fesurrogate import fesolver, kernels
from fesurrogate.io import read_dataset, read_prediction
from _clipipeline import CONFIG, digests as artifact_digests, run, run_pipeline


@pytest.fixture(autouse=True)
def _single_worker(monkeypatch):
    monkeypatch.setenv("BMS_THREADS", "1")


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    Path("cfg.json").write_text(json.dumps(CONFIG))
    return tmp_path


def test_phantom_writes_mesh(workdir):
    assert run("phantom", "--config", "cfg.json", "--out", "ph") == 0
    assert (workdir / "ph" / "mesh.bmsh").stat().st_size > 0
    manifest = json.loads((workdir / "ph" / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["phantom"]["seed"] == 1
    assert manifest["n_nodes"] == 216


def test_seed_override_recorded(workdir):
    assert run("phantom", "--config", "cfg.json", "--out", "ph", "--seed", 9) == 0
    manifest = json.loads((workdir / "ph" / "manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["phantom"]["seed"] == 9


def test_malformed_json_exit_2(workdir, capsys):
    Path("bad.json").write_text('{"seed": 1,\n  "phantom": {"jitter": }\n}')
    assert run("phantom", "--config", "bad.json", "--out", "ph") == 2
    err = capsys.readouterr().err
    assert "bad.json:2:" in err and "JSON parse error" in err
    assert not (workdir / "ph").exists()


def test_unknown_field_exit_2(workdir, capsys):
    Path("bad.json").write_text(json.dumps({"seed": 1, "phantom": {"resolution": 5}}))
    assert run("phantom", "--config", "bad.json", "--out", "ph") == 2
    assert "resolution" in capsys.readouterr().err


def test_missing_config_exit_2(workdir):
    assert run("phantom", "--config", "nope.json", "--out", "ph") == 2


def test_infeasible_phantom_exit_2(workdir):
    cfg = dict(CONFIG, phantom={"cz_radii": [0.05, 0.05, 0.05]})
    Path("cfg2.json").write_text(json.dumps(cfg))
    assert run("phantom", "--config", "cfg2.json", "--out", "ph") == 2


def test_simulate_zero_scale_single_sample(workdir):
    run("phantom", "--config", "cfg.json", "--out", "ph")
    assert run("simulate", "--config", "cfg.json", "--mesh", "ph", "--n", 1, "--scale", 0,
               "--out", "z") == 0
    ds = read_dataset(workdir / "z")
    assert len(ds.samples) == 1
    assert np.all(ds.samples[0].displacements == 0.0)
    manifest = json.loads((workdir / "z" / "manifest.json").read_text())
    assert manifest["mean_displacement"] == 0.0 and manifest["max_displacement"] == 0.0


def test_simulate_manifest_bookkeeping(workdir):
    run("phantom", "--config", "cfg.json", "--out", "ph")
    assert run("simulate", "--config", "cfg.json", "--mesh", "ph", "--out", "d") == 0
    manifest = json.loads((workdir / "d" / "manifest.json").read_text())
    ds = read_dataset(workdir / "d")
    mags = np.concatenate([np.linalg.norm(s.displacements, axis=1) for s in ds.samples])
    assert manifest["n_samples"] == 3 and manifest["n_failed"] == 0
    assert manifest["mean_displacement"] == pytest.approx(mags.mean(), rel=1e-12)
    assert manifest["max_displacement"] == pytest.approx(mags.max(), rel=1e-12)
    # write-then-rename leaves no temporary files behind
    assert not list((workdir / "d").glob(".*tmp"))


def test_simulate_majority_failure_exit_3(workdir, monkeypatch):
    run("phantom", "--config", "cfg.json", "--out", "ph")

    def broken(*a, **kw):
        raise fesolver.ConvergenceError(1.0, 1, 30)

    monkeypatch.setattr(fesolver, "solve_static", broken)
    assert run("simulate", "--config", "cfg.json", "--mesh", "ph", "--out", "d") == 3
    assert not (workdir / "d" / "manifest.json").exists()


def test_interrupted_simulate_leaves_no_partial_samples(workdir, monkeypatch):
    run("phantom", "--config", "cfg.json", "--out", "ph")
    import fesurrogate.io as fio
    real = fio.encode_sample
    calls = []

    def flaky(sample):
        calls.append(1)
        if len(calls) == 2:
            raise KeyboardInterrupt
        return real(sample)

    monkeypatch.setattr(fio, "encode_sample", flaky)
    with pytest.raises(KeyboardInterrupt):
        run("simulate", "--config", "cfg.json", "--mesh", "ph", "--out", "d")
    files = sorted(p.name for p in (workdir / "d").iterdir())
    assert "manifest.json" not in files
    assert not [f for f in files if f.endswith(".tmp")]
    for f in files:
        if f.endswith(".bmsd"):
            fio.read_sample(workdir / "d" / f)


@pytest.mark.slow
def test_every_command_reproducible(tmp_path, monkeypatch):
    digests = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        (root / "cfg.json").write_text(json.dumps(CONFIG))
        monkeypatch.chdir(root)
        run_pipeline(root)
        digests.append(artifact_digests(root))
    assert digests[0].keys() == digests[1].keys()
    assert len(digests[0]) > 15
    diff = [k for k in digests[0] if digests[0][k] != digests[1][k]]
    assert diff == []
    # the excluded fields really are timing: they differ or are at least present
    disp, counts, ms = read_prediction(tmp_path / "a" / "pr" / "prediction_00000.bmpr")
    assert counts.min() >= 1 and ms >= 0.0
    report = (tmp_path / "a" / "ev" / "report.txt").read_text()
    assert "Tetrahedral Mesh" in report and "Tessellation" in report


def test_predict_feature_mode_mismatch_exit_4(workdir, capsys):
    run("phantom", "--config", "cfg.json", "--out", "ph")
    run("simulate", "--config", "cfg.json", "--mesh", "ph", "--out", "tr", "--phantom-id", 1)
    run("simulate", "--config", "cfg.json", "--mesh", "ph", "--out", "pb", "--phantom-id", 1,
        "--features", "pb")
    assert run("train", "--config", "cfg.json", "--data", "tr", "--out", "m", "--epochs", 1) == 0
    capsys.readouterr()
    assert run("predict", "--model", "m/model.bmck", "--data", "pb", "--out", "pr") == 4
    err = capsys.readouterr().err
    assert "pbk" in err and "pb features" in err


def test_train_pb_on_pbk_data_runs_ablation_path(workdir):
    run("phantom", "--config", "cfg.json", "--out", "ph")
    run("simulate", "--config", "cfg.json", "--mesh", "ph", "--out", "tr", "--phantom-id", 1)
    assert run("train", "--config", "cfg.json", "--data", "tr", "--out", "m", "--features", "pb",
               "--epochs", 1) == 0
    manifest = json.loads((workdir / "m" / "manifest.json").read_text())
    assert manifest["network"]["input_dim"] == 7
    assert manifest["training"]["feature_mode"] == "pb"


def test_train_pbk_on_pb_data_exit_4(workdir):
    run("phantom", "--config", "cfg.json", "--out", "ph")
    run("simulate", "--config", "cfg.json", "--mesh", "ph", "--out", "pb", "--phantom-id", 1,
        "--features", "pb")
    assert run("train", "--config", "cfg.json", "--data", "pb", "--out", "m") == 4


def test_evaluate_rejects_non_holdout(workdir, capsys):
    run("phantom", "--config", "cfg.json", "--out", "ph")
    run("simulate", "--config", "cfg.json", "--mesh", "ph", "--out", "tr", "--phantom-id", 1)
    run("train", "--config", "cfg.json", "--data", "tr", "--out", "m", "--epochs", 1)
    assert run("evaluate", "--config", "cfg.json", "--model", "m/model.bmck", "--data", "tr",
               "--out", "ev") == 2
    assert "holdout" in capsys.readouterr().err


def test_ablate_bad_values_exit_2(workdir):
    assert run("ablate", "--axis", "gfv", "--values", "a,b", "--data", "x", "--eval", "y",
               "--out", "ab") == 2


def test_verify_fe_passes_within_budget(capsys):
    t0 = time.process_time()
    assert run("verify-fe") == 0
    assert time.process_time() - t0 < 60.0
    out = capsys.readouterr().out
    assert out.count("PASS") == 7 and "FAIL" not in out


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_verify_fe_each_backend(backend, capsys):
    if backend == "cython" and kernels.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    assert run("verify-fe", "--backend", backend) == 0


def test_verify_fe_detects_sign_error(monkeypatch, capsys):
    real = kernels.element_response

    def flipped(dNdX, vol, ue, G, K, order=2, backend=None):
        return real(dNdX, vol, ue, G, -np.asarray(K, dtype=float), order, backend)

    monkeypatch.setattr(kernels, "element_response", flipped)
    assert run("verify-fe") == 3
    lines = capsys.readouterr().out.splitlines()
    uniaxial = [l for l in lines if l.startswith("uniaxial")]
    assert uniaxial and all("FAIL" in l for l in uniaxial)


@pytest.mark.parametrize("name", ["desk.json", "smoke.json"])
def test_shipped_configs_parse(name):
    from fesurrogate.config import load_config
    cfg = load_config(Path(__file__).parent.parent / "configs" / name)
    assert cfg.training.network_config().input_dim == 9


def test_desk_config_matches_acceptance_profile():
    from fesurrogate.config import load_config
    from test_acceptance import desk_config
    cfg = load_config(Path(__file__).parent.parent / "configs" / "desk.json")
    assert cfg.training == desk_config()


def test_config_diagnostics():
    from fesurrogate.config import ConfigError, parse_config
    with pytest.raises(ConfigError, match="top-level"):
        parse_config('{"sede": 1}')
    with pytest.raises(ConfigError, match="integer"):
        parse_config('{"seed": "1"}')
    with pytest.raises(ConfigError, match="training"):
        parse_config('{"training": {"minibatch": 0}}')


def test_config_seed_inheritance():
    from fesurrogate.config import parse_config
    cfg = parse_config('{"seed": 7, "training": {"seed": 3}}')
    assert cfg.phantom.seed == 7 and cfg.training.seed == 3
    cfg = cfg.with_seed(11)
    assert cfg.seed == cfg.phantom.seed == cfg.training.seed == 11
