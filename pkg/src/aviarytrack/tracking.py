"""Predictive particle tracking: link per-frame cluster centres into tracklets.

Each tracklet predicts its next position with a constant-velocity model and
claims the nearest cluster through a gated assignment. A tracklet that sees
more than one cluster inside its gate stops, and the candidates start fresh
tracklets; re-tracking joins them afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, StageIOError

ACTIVE = "active"
STOPPED_AMBIGUOUS = "stopped_ambiguous"
STOPPED_LOST = "stopped_lost"


@dataclass
class TrackerConfig:
    dt: float = 1.0 / 40.0
    gate: float = 0.25
    init_gate: float = 0.3
    smooth_sigma: float = 1.5
    smooth_radius: int = 4

    def validate(self) -> None:
        for name in ("dt", "gate", "init_gate", "smooth_sigma", "smooth_radius"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"tracker.{name} must be positive")


@dataclass(eq=False)
class Tracklet:
    id: int
    frames: list[int] = field(default_factory=list)
    positions: list[np.ndarray] = field(default_factory=list)
    velocities: list[np.ndarray] = field(default_factory=list)
    status: str = ACTIVE

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def start(self) -> int:
        return self.frames[0]

    @property
    def end(self) -> int:
        return self.frames[-1]

    @property
    def has_velocity(self) -> bool:
        return len(self.frames) >= 2

    def pos_array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=float).reshape(-1, 3)

    def vel_array(self) -> np.ndarray:
        return np.asarray(self.velocities, dtype=float).reshape(-1, 3)

    def state_at(self, frame: int) -> np.ndarray | None:
        k = frame - self.frames[0]
        if 0 <= k < len(self.frames):
            return np.asarray(self.positions[k])
        return None

    def append(self, frame: int, pos: np.ndarray, dt: float) -> None:
        pos = np.asarray(pos, dtype=float)
        if self.frames:
            if frame != self.frames[-1] + 1:
                raise ValueError(f"tracklet {self.id}: frame {frame} does not follow {self.frames[-1]}")
            v = init_velocity(self.positions[-1], pos, dt)
            if len(self.frames) == 1:
                self.velocities[0] = v  # backfill the seed's velocity
            self.velocities.append(v)
        else:
            self.velocities.append(np.zeros(3))
        self.frames.append(int(frame))
        self.positions.append(pos)


def hungarian(cost: np.ndarray, gate: float | np.ndarray = np.inf):
    """Gated linear assignment.

    Only pairs with ``cost < gate`` may be matched (``gate`` may be a per-row
    array). Among matchings of maximum size the one with the least total cost
    is returned. Returns ``(pairs, unmatched_rows, unmatched_cols)``.
    """
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    gate = np.asarray(gate, dtype=float)
    if gate.ndim == 1:
        gate = gate[:, None]
    ok = cost < gate
    if not ok.any():
        return [], list(range(n)), list(range(m))
    valid = cost[ok]
    k = min(n, m)
    # a forbidden pair must cost more than any achievable saving among allowed ones
    big = abs(valid.max()) + k * (valid.max() - valid.min()) + 1.0
    c = np.where(ok, cost, big)
    rows, cols = linear_sum_assignment(c)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if ok[i, j]]
    mr = {i for i, _ in pairs}
    mc = {j for _, j in pairs}
    return pairs, [i for i in range(n) if i not in mr], [j for j in range(m) if j not in mc]


def predict(position, velocity, dt: float) -> np.ndarray:
    """Constant-velocity prediction ``x + v dt``."""
    return np.asarray(position, dtype=float) + np.asarray(velocity, dtype=float) * dt


def init_velocity(x1, x2, dt: float) -> np.ndarray:
    return (np.asarray(x2, dtype=float) - np.asarray(x1, dtype=float)) / dt


def _canonical_order(centers: np.ndarray) -> np.ndarray:
    if len(centers) == 0:
        return np.zeros(0, dtype=int)
    return np.lexsort(centers.T[::-1])


def step(active: Sequence[Tracklet], frame: int, centers: np.ndarray, cfg: TrackerConfig,
         next_id: int) -> tuple[list[Tracklet], list[Tracklet], list[Tracklet], int]:
    """Advance ``active`` tracklets (all ending at ``frame - 1``) by one frame.

    Returns ``(continuing, stopped, seeds, next_id)``. Clusters are processed
    in a canonical order, so the result does not depend on input order.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    order = _canonical_order(centers)
    centers = centers[order]
    active = sorted(active, key=lambda t: t.id)
    n, m = len(active), len(centers)
    claimed = np.zeros(m, dtype=bool)
    continuing, stopped = [], []
    if n and m:
        pred = np.array([predict(t.positions[-1], t.velocities[-1], cfg.dt) if t.has_velocity
                         else t.positions[-1] for t in active])
        gates = np.array([cfg.gate if t.has_velocity else cfg.init_gate for t in active])
        cost = np.linalg.norm(pred[:, None, :] - centers[None, :, :], axis=2)
        in_gate = cost < gates[:, None]
        ambiguous = in_gate.sum(axis=1) >= 2
        rows = np.flatnonzero(~ambiguous)
        pairs, _, _ = hungarian(cost[rows], gates[rows])
        matched = {}
        for i, j in pairs:
            matched[int(rows[i])] = j
            claimed[j] = True
        for i, t in enumerate(active):
            if i in matched:
                t.append(frame, centers[matched[i]], cfg.dt)
                continuing.append(t)
            else:
                t.status = STOPPED_AMBIGUOUS if ambiguous[i] else STOPPED_LOST
                stopped.append(t)
    else:
        for t in active:
            t.status = STOPPED_LOST
            stopped.append(t)
    seeds = []
    for j in np.flatnonzero(~claimed):
        t = Tracklet(next_id)
        t.append(frame, centers[j], cfg.dt)
        seeds.append(t)
        next_id += 1
    return continuing, stopped, seeds, next_id


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth_array(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = len(kernel) // 2
    n = len(a)
    num = np.zeros_like(a)
    den = np.zeros(n)
    for off, w in zip(range(-r, r + 1), kernel):
        lo, hi = max(0, -off), min(n, n - off)
        if lo >= hi:
            continue
        num[lo:hi] += w * a[lo + off:hi + off]
        den[lo:hi] += w
    return num / den[:, None]


def smooth(tracklet: Tracklet, cfg: TrackerConfig) -> Tracklet:
    """Gaussian-smoothed copy; kernels are truncated and renormalised at the ends."""
    k = gaussian_kernel(cfg.smooth_sigma, int(cfg.smooth_radius))
    out = Tracklet(tracklet.id, list(tracklet.frames), status=tracklet.status)
    if len(tracklet) == 0:
        return out
    out.positions = list(_smooth_array(tracklet.pos_array(), k))
    out.velocities = list(_smooth_array(tracklet.vel_array(), k))
    return out


class Tracker:
    """Streaming tracker; feed frames in increasing order."""

    def __init__(self, cfg: TrackerConfig | None = None):
        self.cfg = cfg or TrackerConfig()
        self.cfg.validate()
        self.active: list[Tracklet] = []
        self.finished: list[Tracklet] = []
        self.next_id = 0
        self.last_frame: int | None = None

    def update(self, frame: int, centers: np.ndarray) -> None:
        if self.last_frame is not None and frame != self.last_frame + 1:
            # a hole in the cluster stream ends everything that was running
            for t in self.active:
                t.status = STOPPED_LOST
            self.finished.extend(self.active)
            self.active = []
        cont, stopped, seeds, self.next_id = step(self.active, frame, centers, self.cfg, self.next_id)
        self.finished.extend(stopped)
        self.active = cont + seeds
        self.last_frame = frame

    def finish(self, smoothed: bool = True) -> list[Tracklet]:
        out = sorted(self.finished + self.active, key=lambda t: t.id)
        self.finished, self.active = [], []
        if smoothed:
            out = [smooth(t, self.cfg) for t in out]
        return out


def track_clusters(frames: Iterable[tuple[int, np.ndarray]], cfg: TrackerConfig | None = None,
                   smoothed: bool = True) -> list[Tracklet]:
    """Run the tracker over ``(frame, centers)`` pairs."""
    tr = Tracker(cfg)
    for frame, centers in frames:
        tr.update(int(frame), centers)
    return tr.finish(smoothed)


def write_tracklets(tracklets: Iterable[Tracklet], path) -> None:
    with open(path, "w") as fh:
        for t in tracklets:
            for f, p, v in zip(t.frames, t.positions, t.velocities):
                fh.write(json.dumps({"tracklet_id": t.id, "frame": f,
                                     "pos": [round(float(x), 9) for x in p],
                                     "vel": [round(float(x), 9) for x in v],
                                     "status": t.status}) + "\n")


def read_tracklets(path) -> list[Tracklet]:
    path = Path(path)
    if not path.exists():
        raise StageIOError(f"tracklet file not found: {path}", path=str(path))
    by_id: dict[int, Tracklet] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            t = by_id.setdefault(int(r["tracklet_id"]), Tracklet(int(r["tracklet_id"])))
            t.frames.append(int(r["frame"]))
            t.positions.append(np.asarray(r["pos"], dtype=float))
            t.velocities.append(np.asarray(r["vel"], dtype=float))
            t.status = r["status"]
    return [by_id[k] for k in sorted(by_id)]
