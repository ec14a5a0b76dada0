"""Stage runner: simulate -> reconstruct -> track -> retrack -> evaluate -> ethogram.

Every stage reads its inputs from files and writes its outputs into the output
directory, so any contiguous run of stages can be executed on its own.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import STAGES, PipelineConfig, parse_stages
from .errors import DataError, StageIOError
from .ethogram import (BirdMeta, EthogramConfig, read_birds, read_songs, read_timelines, run_ethogram,
                       save_ethogram, write_birds, write_songs, write_timelines)
from .evaluation import (EvalConfig, evaluate, identified_timelines, identify_tracks, identity_switches,
                         oracle_evaluate)
from .geometry import load_calibration, save_calibration
from .reconstruction import ReconstructionConfig, read_clusters, reconstruct_stream, write_clusters
from .retracking import RetrackConfig, build_hypothesis_tree, link_tracklets, read_tracks, read_trees, \
    write_tracks, write_trees
from .simulator import (MotionStats, NoiseModel, SceneConfig, aviary_cameras, export_wild, generate_scene,
                        read_detections, read_ground_truth, render_detections, write_detections,
                        write_ground_truth)
from .tracking import TrackerConfig, read_tracklets, track_clusters, write_tracklets
from .wild import load_manifest, save_manifest

log = logging.getLogger(__name__)

STAGE_VERSIONS = {"simulate": "1", "reconstruct": "1", "track": "1", "retrack": "1",
                  "evaluate": "1", "ethogram": "1"}

DEFAULT_FILES = {
    "calibration": "calibration.json",
    "ground_truth": "ground_truth.csv",
    "manifest": "wild_manifest.json",
    "clusters": "clusters.jsonl",
    "tracklets": "tracklets.jsonl",
    "tracks": "tracks.jsonl",
    "trees": "trees.json",
    "timelines": "timelines.csv",
    "songs": "songs.csv",
    "birds": "birds.csv",
}


class Stage:
    """Resolved paths and parameters shared by the stage functions."""

    def __init__(self, cfg: PipelineConfig, out: Path):
        self.cfg = cfg
        self.out = out

    def output(self, name: str) -> Path:
        """Where a stage writes ``name``: always inside the output directory."""
        if name == "detections":
            gz = self.cfg.simulator.gzip_detections
            return self.out / ("detections.jsonl.gz" if gz else "detections.jsonl")
        return self.out / DEFAULT_FILES[name]

    def path(self, name: str) -> Path:
        """Where a stage reads ``name``: the configured path, else the stage output."""
        explicit = getattr(self.cfg.paths, name)
        return Path(explicit) if explicit else self.output(name)

    @property
    def dt(self) -> float:
        return 1.0 / self.cfg.simulator.fps

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise StageIOError(f"missing input {name}: {p}", path=str(p))
        return p


def _scene_config(cfg: PipelineConfig) -> SceneConfig:
    s = cfg.simulator
    ms = s.motion_stats
    return SceneConfig(
        n_birds=s.n_birds, fps=s.fps, duration=s.duration, min_separation=s.min_separation,
        stationary_jitter=s.stationary_jitter, rng_seed=cfg.stage_seed("simulate"),
        motion_stats=MotionStats(stationary_s=tuple(ms.stationary_s), motion_frames=tuple(ms.motion_frames),
                                 peak_speed=tuple(ms.peak_speed), max_pause_s=ms.max_pause_s,
                                 floor_prob=ms.floor_prob))


def noise_model(cfg: PipelineConfig) -> NoiseModel:
    n = cfg.simulator.noise
    return NoiseModel(miss_rate=n.miss_rate, false_positive_rate=n.false_positive_rate,
                      centroid_jitter=n.centroid_jitter, merge_occlusions=n.merge_occlusions,
                      blackouts=[tuple(b) for b in n.blackouts])


def flock(cfg: PipelineConfig) -> list[BirdMeta]:
    s = cfg.simulator
    return [BirdMeta(i, "M" if i < s.n_males else "F", f"{'M' if i < s.n_males else 'F'}{i}")
            for i in range(s.n_birds)]


def simulate_songs(cfg: PipelineConfig, birds, duration: float) -> list[tuple[float, int]]:
    rng = np.random.default_rng(cfg.stage_seed("songs"))
    rate = cfg.simulator.songs_per_minute / 60.0
    songs = []
    for b in birds:
        if b.sex != "M":
            continue
        n = rng.poisson(rate * duration)
        songs += [(round(float(t), 4), b.id) for t in rng.uniform(0, duration, n)]
    return sorted(songs)


def stage_simulate(st: Stage) -> None:
    cfg = st.cfg
    scene = generate_scene(_scene_config(cfg))
    if cfg.paths.calibration and Path(cfg.paths.calibration).exists():
        cams = load_calibration(cfg.paths.calibration)
    else:
        cams = aviary_cameras()
    save_calibration(cams, st.output("calibration"))
    write_ground_truth(scene, st.output("ground_truth"))
    save_manifest(export_wild(scene), st.output("manifest"))
    birds = flock(cfg)
    write_birds(birds, st.output("birds"))
    write_songs(simulate_songs(cfg, birds, scene.n_frames / scene.fps), st.output("songs"))
    dets = render_detections(scene, cams, noise_model(cfg), seed=cfg.stage_seed("render"))
    write_detections(dets, st.output("detections"))


def stage_reconstruct(st: Stage) -> None:
    cfg = st.cfg
    r = cfg.reconstruction
    cams = load_calibration(st.require("calibration"))
    rc = ReconstructionConfig(eps_px=r.eps_px, trifocal_tol=r.trifocal_tol,
                              trifocal_min_views=r.trifocal_min_views, trifocal_slack=r.trifocal_slack,
                              ghost_window=r.ghost_window,
                              ghost_radius=r.ghost_radius, dbscan_eps=r.dbscan_eps, min_pts=r.min_pts,
                              mask_cap=r.mask_cap, bounds=cfg.volume_bounds(),
                              bounds_margin=r.bounds_margin, seed=cfg.stage_seed("reconstruct"))
    dets = read_detections(st.require("detections"), cams)
    write_clusters(reconstruct_stream(dets, cams, rc, cfg.workers), st.output("clusters"))


def tracker_config(cfg: PipelineConfig) -> TrackerConfig:
    t = cfg.tracker
    return TrackerConfig(dt=1.0 / cfg.simulator.fps, gate=t.gate, init_gate=t.init_gate,
                         smooth_sigma=t.smooth_sigma, smooth_radius=t.smooth_radius)


def retrack_config(cfg: PipelineConfig) -> RetrackConfig:
    r = cfg.retracking
    return RetrackConfig(max_gap=r.max_gap, join_dist=r.join_dist, vel_tol=r.vel_tol,
                         min_length=r.min_length, dt=1.0 / cfg.simulator.fps)


def stage_track(st: Stage) -> None:
    clusters = read_clusters(st.require("clusters"))
    n = max(clusters, default=-1) + 1
    frames = ((f, clusters.get(f, np.zeros((0, 3)))) for f in range(n))
    write_tracklets(track_clusters(frames, tracker_config(st.cfg)), st.output("tracklets"))


def stage_retrack(st: Stage) -> None:
    tracklets = read_tracklets(st.require("tracklets"))
    rc = retrack_config(st.cfg)
    write_tracks(link_tracklets(tracklets, rc), st.output("tracks"))
    write_trees(build_hypothesis_tree(tracklets, rc), st.output("trees"))


def stage_evaluate(st: Stage) -> None:
    cfg = st.cfg
    e = cfg.evaluation
    manifest = load_manifest(st.require("manifest"))
    tracks = read_tracks(st.require("tracks"))
    ec = EvalConfig(tuple(e.thresholds), e.head_scoring)
    reports = [evaluate(manifest, tracks, ec)]
    reports[0].save(st.out / "eval_greedy")
    if e.oracle:
        tracklets = read_tracklets(st.require("tracklets"))
        trees = read_trees(st.require("trees"))
        reports.append(oracle_evaluate(manifest, tracks, tracklets, trees, ec, st.dt))
        reports[1].save(st.out / "eval_oracle")
    summary = {"examples": len(manifest), "tracks": len(tracks)}
    gt_path = st.path("ground_truth")
    if gt_path.exists():
        truth, _ = read_ground_truth(gt_path)
        summary["identity_switches"] = identity_switches(tracks, truth, e.identity_radius)
        labels = identify_tracks(tracks, truth, e.identity_radius)
        P = identified_timelines(tracks, labels, truth.shape[0], truth.shape[1])
        write_timelines(P, list(range(truth.shape[1])), st.output("timelines"))
    (st.out / "eval_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    if e.figures:
        from .plotting import plot_eval_report

        plot_eval_report(reports, st.out / "eval_report.png")


def stage_ethogram(st: Stage) -> None:
    cfg = st.cfg
    g = cfg.ethogram
    birds = read_birds(st.require("birds"))
    P, _ = read_timelines(st.require("timelines"), birds)
    songs = read_songs(st.require("songs"))
    res = run_ethogram(P, cfg.simulator.fps, songs, birds,
                       EthogramConfig(g.d_int, g.stay_wait, g.flight_speed, g.dyad_window))
    out = st.out / "ethogram"
    save_ethogram(res, out)
    if g.figures:
        from .plotting import plot_pairwise, plot_transitions

        plot_pairwise(res.matrices, [b.label or str(b.id) for b in birds], out / "pairwise.png")
        plot_transitions(res.bonded, res.nonbonded, res.difference, out / "transitions.png")


STAGE_FUNCS: dict[str, Callable[[Stage], None]] = {
    "simulate": stage_simulate,
    "reconstruct": stage_reconstruct,
    "track": stage_track,
    "retrack": stage_retrack,
    "evaluate": stage_evaluate,
    "ethogram": stage_ethogram,
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(cfg: PipelineConfig, out: Path, stages) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    doc = {
        "package_version": __version__,
        "config_hash": cfg.config_hash(),
        "rng_seed": cfg.rng_seed,
        "stages": list(stages),
        "stage_versions": {s: STAGE_VERSIONS[s] for s in stages},
        "stage_seeds": {s: cfg.stage_seed(s) for s in STAGES},
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def run_pipeline(cfg: PipelineConfig, stages: str | tuple[str, ...] | None = None) -> Path:
    """Run a contiguous chain of stages; returns the output directory."""
    cfg.validate()
    chain = parse_stages(stages) if stages is None or isinstance(stages, str) else tuple(stages)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    st = Stage(cfg, out)
    for name in chain:
        log.info("stage %s", name)
        try:
            STAGE_FUNCS[name](st)
        except DataError as exc:
            if exc.stage is None:
                raise type(exc)(str(exc), stage=name, path=exc.path) from exc
            raise
    write_run_manifest(cfg, out, chain)
    return out
