import json
import shutil

import numpy as np
import pytest
import yaml

from aviarytrack.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from aviarytrack.config import (OUT_ENV, STAGES, PipelineConfig, config_from_dict, derive_seed, load_config,
                                parse_stages, save_config)
from aviarytrack.errors import ConfigError, StageIOError
from aviarytrack.ethogram import read_birds, read_songs, read_timelines
from aviarytrack.geometry import load_calibration
from aviarytrack.pipeline import run_pipeline
from aviarytrack.reconstruction import read_clusters
from aviarytrack.retracking import read_tracks, read_trees
from aviarytrack.simulator import read_detections, read_ground_truth
from aviarytrack.tracking import read_tracklets
from aviarytrack.wild import load_manifest

SMALL = {
    "simulator": {"n_birds": 3, "n_males": 1, "duration": 3.0, "min_separation": 0.55,
                  "songs_per_minute": 30.0},
    "reconstruction": {"mask_cap": 8},
    "rng_seed": 11,
}


def small_config(out, **extra):
    d = json.loads(json.dumps(SMALL))
    d.update(extra)
    d["paths"] = {"out_dir": str(out)}
    return d


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = config_from_dict(small_config(out))
    run_pipeline(cfg)
    return cfg, out


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = config_from_dict({})
    assert cfg.reconstruction.mask_cap == 400 and cfg.tracker.gate == 0.25
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()
    assert back.config_hash() == cfg.config_hash()


def test_unknown_key_names_its_path():
    with pytest.raises(ConfigError, match="tracker"):
        config_from_dict({"tracker": {"gaet": 0.3}})
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"bogus": 1})


def test_type_and_range_errors():
    with pytest.raises(ConfigError, match="tracker.gate"):
        config_from_dict({"tracker": {"gate": "wide"}})
    with pytest.raises(ConfigError):
        config_from_dict({"tracker": {"gate": -1.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"evaluation": {"thresholds": [0.5, 0.1]}})
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.yaml")


def test_parse_stages():
    assert parse_stages(None) == STAGES
    assert parse_stages("reconstruct:evaluate") == ("reconstruct", "track", "retrack", "evaluate")
    assert parse_stages("track") == ("track",)
    for bad in ("evaluate:track", "nope:track", "a:b:c"):
        with pytest.raises(ConfigError):
            parse_stages(bad)


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "simulate") == derive_seed(0, "simulate")
    seeds = {derive_seed(s, st) for s in range(5) for st in STAGES}
    assert len(seeds) == 5 * len(STAGES)
    assert all(0 <= x < 2**63 for x in seeds)


def test_every_stage_output_loads(small_run):
    cfg, out = small_run
    cams = load_calibration(out / "calibration.json")
    assert len(cams) == 8
    assert len(list(read_detections(out / "detections.jsonl.gz", cams))) == 120
    c, _ = read_ground_truth(out / "ground_truth.csv")
    assert c.shape == (120, 3, 3)
    assert read_clusters(out / "clusters.jsonl")
    assert read_tracklets(out / "tracklets.jsonl")
    assert read_tracks(out / "tracks.jsonl")
    assert read_trees(out / "trees.json")
    load_manifest(out / "wild_manifest.json")
    birds = read_birds(out / "birds.csv")
    P, _ = read_timelines(out / "timelines.csv", birds)
    assert P.shape[1] == 3
    read_songs(out / "songs.csv")
    for name in ("eval_greedy.txt", "eval_greedy.json", "eval_oracle.txt", "eval_report.png",
                 "ethogram/events.csv", "ethogram/pairwise.png", "ethogram/transitions.png"):
        assert (out / name).exists(), name
    man = json.loads((out / "manifest.json").read_text())
    assert man["config_hash"] == cfg.config_hash()
    assert man["stages"] == list(STAGES)
    assert "clusters.jsonl" in man["files"]


def test_noiseless_small_run_tracks_every_bird(small_run):
    _, out = small_run
    summary = json.loads((out / "eval_summary.json").read_text())
    assert summary["identity_switches"] == 0
    truth, _ = read_ground_truth(out / "ground_truth.csv")
    P, _ = read_timelines(out / "timelines.csv")
    covered = np.isfinite(P[..., 0]).mean()
    err = np.nanmax(np.linalg.norm(P - truth[:len(P)], axis=2))
    assert covered > 0.9 and err < 0.1


def test_stage_range_skips_simulator(small_run, tmp_path):
    _, src = small_run
    out = tmp_path / "partial"
    out.mkdir()
    for name in ("calibration.json", "detections.jsonl.gz", "wild_manifest.json", "ground_truth.csv"):
        shutil.copy(src / name, out / name)
    cfg = config_from_dict(small_config(out))
    run_pipeline(cfg, "reconstruct:evaluate")
    assert not (out / "birds.csv").exists() and not (out / "songs.csv").exists()
    assert (out / "clusters.jsonl").read_bytes() == (src / "clusters.jsonl").read_bytes()
    assert (out / "eval_greedy.json").read_bytes() == (src / "eval_greedy.json").read_bytes()


def test_missing_calibration_names_path(tmp_path):
    cal = tmp_path / "nowhere" / "cal.json"
    d = small_config(tmp_path / "o")
    d["paths"]["calibration"] = str(cal)
    cfg = config_from_dict(d)
    with pytest.raises(StageIOError, match="cal.json") as info:
        run_pipeline(cfg, "reconstruct:reconstruct")
    assert info.value.stage == "reconstruct"


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"tracker": {"nope": 1}}))
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert "nope" in capsys.readouterr().err
    assert main(["track", "--out", str(tmp_path / "empty")]) == EXIT_DATA
    assert "clusters" in capsys.readouterr().err
    assert main(["run", "--stages", "ethogram:track", "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_cli_env_overrides_out(tmp_path, monkeypatch, small_run):
    _, src = small_run
    target = tmp_path / "from_env"
    monkeypatch.setenv(OUT_ENV, str(target))
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text(yaml.safe_dump(small_config(tmp_path / "ignored")))
    code = main(["evaluate", "--config", str(cfg_file), "--manifest", str(src / "wild_manifest.json"),
                 "--tracks", str(src / "tracks.jsonl"), "--tracklets", str(src / "tracklets.jsonl"),
                 "--trees", str(src / "trees.json"), "--oracle"])
    assert code == EXIT_OK
    assert (target / "eval_greedy.txt").exists() and (target / "eval_oracle.txt").exists()
    assert not (tmp_path / "ignored").exists()


def test_pipeline_config_workers_knob():
    with pytest.raises(ConfigError):
        config_from_dict({"workers": 0})
    assert PipelineConfig().workers == 1
