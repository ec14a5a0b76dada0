"""WILD challenge scoring: start association, endpoint distance, AC by length bucket."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .retracking import HypothesisTree, JoinGraph, Track
from .tracking import Tracklet
from .wild import BUCKETS, WildExample

THRESHOLDS = (0.1, 0.3, 0.5, 1.0)


def _label(t: float) -> str:
    return f"{t:.1f}" if round(t, 1) == t else f"{t:g}"


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = THRESHOLDS
    head_scoring: bool = False


def associate_start(tracks: Sequence[Track], start, frame_start: int) -> int | None:
    """Index of the track nearest to ``start`` at ``frame_start``; None if no track is alive."""
    best, best_d = None, math.inf
    start = np.asarray(start, dtype=float)
    for i, tr in enumerate(tracks):
        p = tr.state_at(frame_start)
        if p is None:
            continue
        d = float(np.linalg.norm(p - start))
        if d < best_d:
            best, best_d = i, d
    return best


def score_example(example: WildExample, hypothesis_end, head: bool = False) -> float | None:
    """Distance from the hypothesis end to the annotated end; None is a miss."""
    if hypothesis_end is None:
        return None
    return float(np.linalg.norm(np.asarray(hypothesis_end, dtype=float) - example.end_point(head)))


def ac_values(distances: Sequence[float | None], thresholds=THRESHOLDS) -> list[float]:
    """Fraction of examples within each threshold; misses count as failures."""
    n = len(distances)
    if n == 0:
        return [math.nan] * len(thresholds)
    d = np.array([math.inf if x is None else x for x in distances])
    return [float(np.count_nonzero(d <= t)) / n for t in thresholds]


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    mode: str
    distances: list[tuple[int, str, float | None]] = field(default_factory=list)

    def bucket_distances(self, bucket: str | None) -> list[float | None]:
        return [d for _, b, d in self.distances if bucket is None or b == bucket]

    def counts(self) -> dict[str, int]:
        return {b: len(self.bucket_distances(b)) for b in BUCKETS}

    def ac(self, bucket: str | None = None) -> list[float]:
        return ac_values(self.bucket_distances(bucket), self.thresholds)

    def table(self) -> dict[str, dict]:
        rows = {b: {"segment_count": len(self.bucket_distances(b)), "ac": self.ac(b)} for b in BUCKETS}
        rows["all"] = {"segment_count": len(self.distances), "ac": self.ac(None)}
        return rows

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else round(x, 6)

        return {
            "mode": self.mode,
            "thresholds": list(self.thresholds),
            "rows": {b: {"segment_count": r["segment_count"],
                         "ac": {_label(t): clean(a) for t, a in zip(self.thresholds, r["ac"])}}
                     for b, r in self.table().items()},
            "examples": [{"index": i, "bucket": b, "distance": None if d is None else round(d, 6)}
                         for i, b, d in self.distances],
        }

    def to_text(self) -> str:
        head = f"{'Length':<10}{'Segments':>10}" + "".join(f"{'AC' + _label(t):>9}" for t in self.thresholds)
        lines = [f"# {self.mode}", head]
        for b, r in self.table().items():
            acs = "".join(f"{'-':>9}" if math.isnan(a) else f"{a:9.3f}" for a in r["ac"])
            lines.append(f"{b:<10}{r['segment_count']:>10}{acs}")
        return "\n".join(lines) + "\n"

    def save(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        txt = stem.with_suffix(".txt")
        js = stem.with_suffix(".json")
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return txt, js


def evaluate(manifest: Sequence[WildExample], tracks: Sequence[Track],
             cfg: EvalConfig | None = None) -> EvalReport:
    cfg = cfg or EvalConfig()
    rep = EvalReport(tuple(cfg.thresholds), "greedy")
    for ex in manifest:
        ex.validate()
        i = associate_start(tracks, ex.start_point(cfg.head_scoring), ex.frame_start)
        end = None if i is None else tracks[i].position_clamped(ex.frame_end)
        rep.distances.append((ex.index, ex.bucket, score_example(ex, end, cfg.head_scoring)))
    return rep


def _oracle_node(track: Track, frame: int) -> int:
    """Tracklet of ``track`` at ``frame``, or the one before the gap covering it."""
    k = frame - track.start
    src = track.source[:k + 1]
    real = src[src >= 0]
    return int(real[-1])


def oracle_evaluate(manifest: Sequence[WildExample], tracks: Sequence[Track],
                    tracklets: Sequence[Tracklet], trees: Sequence[HypothesisTree],
                    cfg: EvalConfig | None = None, dt: float = 1.0 / 40.0) -> EvalReport:
    """Success if any continuation through the hypothesis graph lands close enough.

    The start is associated exactly as in :func:`evaluate`; the greedy track's
    own endpoint is always one of the candidates. When no track is alive at
    the start frame, the nearest live tracklet is used instead.
    """
    cfg = cfg or EvalConfig()
    graph = JoinGraph(tracklets, trees, dt)
    rep = EvalReport(tuple(cfg.thresholds), "oracle")
    for ex in manifest:
        ex.validate()
        start = ex.start_point(cfg.head_scoring)
        goal = ex.end_point(cfg.head_scoring)
        cands = []
        i = associate_start(tracks, start, ex.frame_start)
        if i is not None:
            cands.append(tracks[i].position_clamped(ex.frame_end)[None])
            node = _oracle_node(tracks[i], ex.frame_start)
        else:
            node, best = None, math.inf
            for t in tracklets:
                p = t.state_at(ex.frame_start)
                if p is not None and np.linalg.norm(p - start) < best:
                    node, best = t.id, float(np.linalg.norm(p - start))
        if node is not None:
            cands.append(graph.leaf_positions(node, ex.frame_end))
        if cands:
            d = float(np.linalg.norm(np.vstack(cands) - goal, axis=1).min())
        else:
            d = None
        rep.distances.append((ex.index, ex.bucket, d))
    return rep


def survival_projection(ac100: float, horizon_frames: float) -> float:
    """Chance a track survives ``horizon_frames`` if each 100 frames succeed independently."""
    if not 0.0 <= ac100 <= 1.0:
        raise ValueError("ac100 must lie in [0, 1]")
    return float(ac100 ** (horizon_frames / 100.0))


def identity_switches(tracks: Sequence[Track], truth: np.ndarray, radius: float = 0.1) -> int:
    """Times a track's nearest ground-truth bird changes along its observed states.

    ``truth`` is ``(n_frames, n_birds, 3)``. States farther than ``radius`` from
    every bird, and gap-filled states, are ignored.
    """
    switches = 0
    for tr in tracks:
        last = None
        for f, p, g in zip(tr.frames, tr.positions, tr.gap_filled):
            if g or f >= len(truth):
                continue
            d = np.linalg.norm(truth[f] - p, axis=1)
            d = np.where(np.isnan(d), np.inf, d)
            b = int(np.argmin(d))
            if d[b] > radius:
                continue
            if last is not None and b != last:
                switches += 1
            last = b
    return switches


def identify_tracks(tracks: Sequence[Track], truth: np.ndarray, radius: float = 0.1) -> dict[int, int]:
    """Ground-truth bird for each track by majority vote of nearby observed states; -1 if none."""
    out = {}
    for tr in tracks:
        votes: dict[int, int] = {}
        for f, p, g in zip(tr.frames, tr.positions, tr.gap_filled):
            if g or f >= len(truth):
                continue
            d = np.linalg.norm(truth[f] - p, axis=1)
            d = np.where(np.isnan(d), np.inf, d)
            b = int(np.argmin(d))
            if d[b] <= radius:
                votes[b] = votes.get(b, 0) + 1
        out[tr.id] = max(sorted(votes), key=lambda b: votes[b]) if votes else -1
    return out


def identified_timelines(tracks: Sequence[Track], labels: dict[int, int], n_frames: int,
                         n_birds: int) -> np.ndarray:
    """``(n_frames, n_birds, 3)`` positions from labelled tracks, NaN where no track covers a bird.

    When two tracks claim the same bird and frame, the longer track wins.
    """
    P = np.full((n_frames, n_birds, 3), np.nan)
    for tr in sorted(tracks, key=lambda t: (-len(t), t.id)):
        b = labels.get(tr.id, -1)
        if b < 0 or b >= n_birds:
            continue
        f = tr.frames
        ok = (f < n_frames) & np.isnan(P[np.clip(f, 0, n_frames - 1), b, 0])
        P[f[ok], b] = tr.positions[ok]
    return P
