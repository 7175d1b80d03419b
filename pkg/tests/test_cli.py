import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mixedcbm.cli import (
    ArtifactError,
    ConfigError,
    RunConfig,
    cmd_fit,
    cmd_run,
    cmd_sweep,
    cmd_synth,
    main,
)
from mixedcbm.data import SynthSpec, load_dataset
from mixedcbm.predictor import TrainHyper, write_probabilities

SMALL = SynthSpec(n_samples=400, n_factors=3, bins_per_factor=2, revealed=(0, 1), feature_dim=4)
FAST = TrainHyper(epochs=2, hidden=(8,))


def _cfg(tmp_path, **kw):
    return RunConfig(**{"synth": SMALL, "hyper": FAST, "msl": 10, "out": str(tmp_path / "run"), **kw})


def test_config_validation():
    with pytest.raises(ConfigError, match="^calibration:"):
        RunConfig(mode="joint", calibration="platt-temp")
    with pytest.raises(ConfigError, match="^msl:"):
        RunConfig(msl=0)
    with pytest.raises(ConfigError, match="^fractions:"):
        RunConfig(fractions=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigError, match="^bogus:"):
        RunConfig.from_dict({"bogus": 1})
    assert RunConfig().calibration == "platt-temp" and RunConfig(mode="joint").calibration == "none"


def test_seed_drives_every_random_stream():
    cfg = RunConfig(seed=7)
    assert cfg.synth.seed == 7 and cfg.hyper.seed == 7


def test_hash_ignores_output_location_only():
    a, b = RunConfig(out="x"), RunConfig(out="y")
    assert a.hash() == b.hash()
    assert a.hash() != RunConfig(msl=31).hash()
    assert RunConfig.from_dict(json.loads(json.dumps(a.to_dict()))).hash() == a.hash()


def test_missing_upstream_artifact(tmp_path):
    cfg = _cfg(tmp_path)
    cmd_synth(cfg)
    with pytest.raises(ArtifactError, match="predictor.json.*mixedcbm train"):
        cmd_fit(cfg)


def test_main_reports_errors_with_exit_code(tmp_path, capsys):
    out = str(tmp_path / "nothing")
    assert main(["fit", "--out", out]) == 2
    assert "missing upstream artifact" in capsys.readouterr().err
    assert main(["train", "--mode", "joint", "--calibration", "platt-temp", "--out", out]) == 2


def _json_files(d: Path):
    return sorted(p for p in d.iterdir() if p.suffix == ".json" and p.name != "manifest.json")


def test_full_run_outputs_and_provenance(tmp_path):
    cfg = _cfg(tmp_path)
    paths = cmd_run(cfg)
    names = {p.name for p in paths}
    assert {"data.csv", "schema.json", "predictor.json", "calibration.json", "mcbm.json", "baselines.json",
            "metrics.json", "report.json", "report.txt", "global_tree.dot", "merged_tree.dot"} <= names
    run = Path(cfg.out)
    for p in _json_files(run):
        assert json.loads(p.read_text())["provenance"] == {"config_hash": cfg.hash(), "seed": cfg.seed}, p.name
    manifest = json.loads((run / "manifest.json").read_text())["files"]
    assert manifest["data.csv"]["config_hash"] == cfg.hash()
    metrics = json.loads((run / "metrics.json").read_text())["models"]
    assert set(metrics) == {"mcbm", "hard", "independent", "sequential_soft"}
    assert all(m["fidelity"] == 1.0 for m in metrics.values())
    cal = json.loads((run / "calibration.json").read_text())["calibration_split"]
    assert cal["nll_after"] <= cal["nll_before"] + 1e-9


def test_rerun_is_byte_identical(tmp_path):
    a = cmd_run(_cfg(tmp_path, out=str(tmp_path / "a")))
    b = cmd_run(_cfg(tmp_path, out=str(tmp_path / "b")))
    for pa, pb in zip(a, b):
        assert pa.name == pb.name and pa.read_bytes() == pb.read_bytes(), pa.name
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_full_completeness_run_reports_no_leakage(tmp_path):
    spec = SynthSpec(n_samples=600, n_factors=2, bins_per_factor=2, revealed=(0, 1), feature_dim=4,
                     feature_noise_sigma=0.05)
    cfg = _cfg(tmp_path, synth=spec)
    cmd_run(cfg)
    report = json.loads((Path(cfg.out) / "report.json").read_text())
    assert report["totals"]["total_leakage_bits"] == 0.0
    assert report["totals"]["n_extended_paths"] == 0


def test_joint_mode_run(tmp_path):
    cfg = _cfg(tmp_path, mode="joint")
    names = {p.name for p in cmd_run(cfg)}
    assert "calibration.json" not in names
    assert json.loads((Path(cfg.out) / "mcbm.json").read_text())["mode"] == "joint"


def test_external_probability_file(tmp_path):
    cfg = _cfg(tmp_path)
    cmd_synth(cfg)
    run = Path(cfg.out)
    ds = load_dataset(run / "data.csv", run / "schema.json")
    P = np.clip(ds.C * 0.8 + 0.1, 0, 1).astype(float)
    write_probabilities(tmp_path / "p.csv", ds.ids, P, ds.schema)
    ext = replace(cfg, probabilities=str(tmp_path / "p.csv"), calibration="none")
    names = {p.name for p in cmd_run(ext)}
    assert "predictor.json" not in names and "metrics.json" in names
    assert json.loads((run / "mcbm.json").read_text())["prob_source_ref"] == str(tmp_path / "p.csv")


def test_sweep_csvs_carry_hash(tmp_path):
    cfg = _cfg(tmp_path, sweep_levels=(1, 3), sweep_seeds=(0,), sweep_msls=(5, 20))
    paths = cmd_sweep(cfg)
    run = Path(cfg.out)
    curve = (run / "sweep_completeness_curve.csv").read_text().splitlines()
    assert curve[0].startswith("config_hash,level") and len(curve) == 3
    assert all(line.startswith(cfg.hash()) for line in curve[1:])
    msl_rows = (run / "sweep_msl.csv").read_text().splitlines()
    assert len(msl_rows) == 3
    manifest = json.loads((run / "manifest.json").read_text())["files"]
    assert {"sweep_completeness.csv", "sweep_completeness_curve.csv", "sweep_msl.csv"} <= set(manifest)
    assert {p.name for p in paths} >= {"sweep_completeness.json", "sweep_msl.csv"}


def test_main_run_via_config_file(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    cfile = tmp_path / "cfg.json"
    cfile.write_text(json.dumps(cfg.to_dict()))
    assert main(["run", "--config", str(cfile), "--msl", "12"]) == 0
    printed = capsys.readouterr().out.split()
    assert any(p.endswith("metrics.json") for p in printed)
    assert json.loads((Path(cfg.out) / "mcbm.json").read_text())["msl"] == 12
