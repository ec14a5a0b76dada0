"""Synthetic aviary: ground-truth flock trajectories and silhouette detections.

Birds alternate between stationary periods (on a perch or the floor) and
motion sequences made of cubic Hermite flight legs that start and end at rest.
Every bird is rendered in every camera as the exact perspective outline of a
body ellipsoid, so the reconstruction stage sees realistic silhouettes.
"""

from __future__ import annotations

import csv
import gzip
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, StageIOError
from .geometry import CameraModel
from .wild import WildExample, length_bucket

VOLUME = (6.0, 2.4, 2.4)
BODY_SEMI_AXES = (0.10, 0.04, 0.04)
SHADOW_SEMI_AXES = (0.10, 0.05, 0.004)
PERCH_CLEARANCE = 0.05
FLOOR_Z = 0.05
_Z90 = 1.2815515655446004  # standard normal 90th percentile


def default_perches() -> list[tuple[tuple[float, float, float], tuple[float, float, float]]]:
    """12 central perches 40 cm and 8 side perches 50 cm below the ceiling."""
    perches = []
    for y in (0.8, 1.6):
        for xc in (0.75, 1.65, 2.55, 3.45, 4.35, 5.25):
            perches.append(((xc - 0.3, y, 2.0), (xc + 0.3, y, 2.0)))
    for y in (0.15, 2.25):
        for xc in (0.9, 2.3, 3.7, 5.1):
            perches.append(((xc - 0.4, y, 1.9), (xc + 0.4, y, 1.9)))
    return perches


def aviary_cameras(width: int = 1920, height: int = 1200, hfov_deg: float = 48.0) -> list[CameraModel]:
    """Eight corner cameras pointing inwards, four near the ceiling and four near the floor."""
    fx = (width / 2.0) / np.tan(np.radians(hfov_deg / 2.0))
    L, W, H = VOLUME
    cams = []
    i = 0
    # the bottom row sits above the floor so ground-level birds are not seen edge-on
    for z, tz in ((H - 0.05, 1.0), (0.4, 0.8)):
        for x, y in ((0.05, 0.05), (L - 0.05, 0.05), (L - 0.05, W - 0.05), (0.05, W - 0.05)):
            # aim past the middle so the far half of the volume is covered
            tx = 4.5 if x < L / 2 else L - 4.5
            cams.append(CameraModel.look_at(i, (x, y, z), (tx, W / 2, tz), fx=fx,
                                            width=width, height=height))
            i += 1
    return cams


@dataclass
class MotionStats:
    """Split log-normal duration models given by 10/50/90th percentiles."""

    stationary_s: tuple[float, float, float] = (3.7, 17.6, 165.0)
    motion_frames: tuple[float, float, float] = (35.0, 63.0, 180.0)
    min_motion_frames: int = 8
    max_motion_frames: int = 600
    min_stationary_frames: int = 4
    peak_speed: tuple[float, float] = (3.0, 8.0)
    max_pause_s: float = 2.0
    floor_prob: float = 0.25


def sample_split_lognormal(rng: np.random.Generator, p10: float, p50: float, p90: float) -> float:
    z = rng.standard_normal()
    mu = np.log(p50)
    sigma = (mu - np.log(p10)) / _Z90 if z < 0 else (np.log(p90) - mu) / _Z90
    return float(np.exp(mu + sigma * z))


@dataclass
class SceneConfig:
    n_birds: int = 15
    fps: float = 40.0
    duration: float = 60.0
    volume: tuple[float, float, float] = VOLUME
    perch_graph: list = field(default_factory=default_perches)
    motion_stats: MotionStats = field(default_factory=MotionStats)
    rng_seed: int = 0
    # 0 disables the constraint; otherwise birds keep at least this distance apart.
    min_separation: float = 0.0
    stationary_jitter: float = 0.01
    max_attempts: int = 200

    def validate(self) -> None:
        if self.n_birds < 1:
            raise ConfigError("n_birds must be >= 1")
        if not self.fps > 0:
            raise ConfigError("fps must be positive")
        if self.duration < 0:
            raise ConfigError("duration must be >= 0")
        if not self.perch_graph:
            raise ConfigError("perch_graph is empty")
        lo = np.zeros(3)
        hi = np.asarray(self.volume, dtype=float)
        for seg in self.perch_graph:
            for p in seg:
                p = np.asarray(p, dtype=float)
                if np.any(p < lo) or np.any(p > hi):
                    raise ConfigError(f"perch endpoint {p.tolist()} outside the volume")


@dataclass(frozen=True)
class SceneSequence:
    bird_id: int
    kind: str  # "stationary" | "motion"
    start: int
    end: int  # inclusive

    @property
    def n_frames(self) -> int:
        return self.end - self.start + 1


@dataclass(eq=False)
class GroundTruthScene:
    fps: float
    centroid: np.ndarray  # (n_frames, n_birds, 3)
    head: np.ndarray      # (n_frames, n_birds, 3)
    sequences: list[SceneSequence]
    volume: tuple[float, float, float] = VOLUME

    @property
    def n_frames(self) -> int:
        return self.centroid.shape[0]

    @property
    def n_birds(self) -> int:
        return self.centroid.shape[1]

    @property
    def tail(self) -> np.ndarray:
        return 2.0 * self.centroid - self.head

    def bird_sequences(self, bird: int) -> list[SceneSequence]:
        return [s for s in self.sequences if s.bird_id == bird]

    def motion_sequences(self) -> list[SceneSequence]:
        return [s for s in self.sequences if s.kind == "motion"]


def _hermite_leg(p0, p1, n):
    """n samples (s in (0, 1]) of a rest-to-rest cubic Hermite leg."""
    s = np.arange(1, n + 1) / n
    h = 3 * s**2 - 2 * s**3
    return p0 + np.outer(h, p1 - p0)


class _SceneBuilder:
    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.rng_seed)
        self.n_frames = max(1, int(round(cfg.duration * cfg.fps)))
        self.perches = [np.asarray(s, dtype=float) for s in cfg.perch_graph]
        self.placed: list[np.ndarray] = []
        self.stats = cfg.motion_stats

    def rest_spot(self) -> np.ndarray:
        L, W, _ = self.cfg.volume
        if self.rng.random() < self.stats.floor_prob:
            return np.array([self.rng.uniform(0.3, L - 0.3), self.rng.uniform(0.3, W - 0.3), FLOOR_Z])
        a, b = self.perches[self.rng.integers(len(self.perches))]
        p = a + self.rng.uniform(0.05, 0.95) * (b - a)
        p[2] += PERCH_CLEARANCE
        return p

    def mid_spot(self) -> np.ndarray:
        L, W, H = self.cfg.volume
        return np.array([self.rng.uniform(0.3, L - 0.3), self.rng.uniform(0.3, W - 0.3),
                         self.rng.uniform(0.3, H - 0.3)])

    def conflict(self, start: int, path: np.ndarray) -> int | None:
        """First frame offset at which ``path`` comes too close to a placed bird."""
        sep = self.cfg.min_separation
        if sep <= 0 or not self.placed or len(path) == 0:
            return None
        others = np.stack([b[start:start + len(path)] for b in self.placed], axis=1)
        d = np.linalg.norm(others - path[:, None, :], axis=2).min(axis=1)
        bad = np.flatnonzero(d < sep)
        return int(bad[0]) if len(bad) else None

    def stationary_path(self, pos, n) -> np.ndarray:
        path = np.repeat(pos[None], n, axis=0)
        sigma = self.cfg.stationary_jitter
        if sigma > 0 and n > 2:
            # slow wobble pinned to the anchor at both ends
            k = max(1, n // int(self.cfg.fps))
            knots = self.rng.normal(0.0, sigma, size=(k + 2, 3))
            knots[0] = knots[-1] = 0.0
            knots[:, 2] *= 0.3
            t = np.linspace(0, k + 1, n)
            wob = np.stack([np.interp(t, np.arange(k + 2), knots[:, j]) for j in range(3)], axis=1)
            taper = np.sin(np.pi * np.arange(n) / max(n - 1, 1))[:, None]
            path = path + wob * taper
            path[0] = pos
            path[-1] = pos
        return path

    def _leg_frames(self, d: float, speed: float) -> int:
        # a rest-to-rest Hermite leg peaks at 1.5x its mean speed; round up so it never exceeds ``speed``
        return max(2, int(np.ceil(1.5 * d / speed * self.cfg.fps - 1e-9)))

    def plan_motion(self, p0, n_motion):
        """Positions for n_motion frames plus the landing frame, or None.

        The flight is a chain of rest-to-rest legs. Long sequences visit mid-air
        waypoints (hovering or perching briefly, at most ``max_pause_s`` each)
        before the final leg lands on a rest spot.
        """
        fps = self.cfg.fps
        lo, hi = self.stats.peak_speed
        max_pause = int(self.stats.max_pause_s * fps)
        for _ in range(20):
            pos = p0
            remaining = n_motion + 1
            pieces, legs = [], []
            while remaining > 0:
                p1 = self.rest_spot()
                D = float(np.linalg.norm(p1 - pos))
                if D < 0.15:
                    break
                n_fast = self._leg_frames(D, 10.0)
                n_slow = self._leg_frames(D, 2.0)
                if remaining < n_fast:
                    break
                # a pause is only allowed after the first take-off
                if remaining <= n_slow + (max_pause if legs else 0):
                    # final leg, stretched to fill the budget
                    n_leg = min(remaining, n_slow)
                    pause = remaining - n_leg
                    if pause:
                        pieces.append(np.repeat(pos[None], pause, axis=0))
                    pieces.append(_hermite_leg(pos, p1, n_leg))
                    legs.append((pos, p1))
                    remaining = 0
                    break
                m = self.mid_spot()
                d1 = float(np.linalg.norm(m - pos))
                if d1 < 0.15:
                    break
                n1 = self._leg_frames(d1, self.rng.uniform(lo, hi))
                pause = int(self.rng.integers(0, max_pause + 1))
                if n1 + pause >= remaining:
                    break
                pieces.append(_hermite_leg(pos, m, n1))
                if pause:
                    pieces.append(np.repeat(m[None], pause, axis=0))
                legs.append((pos, m))
                remaining -= n1 + pause
                pos = m
            if remaining == 0:
                return np.vstack(pieces), legs
        return None

    def build_bird(self, bird: int):
        n = self.n_frames
        fps = self.cfg.fps
        for _ in range(self.cfg.max_attempts):
            path = np.zeros((n, 3))
            heading = np.zeros((n, 3))
            seqs = []
            pos = self.rest_spot()
            ang = self.rng.uniform(0, 2 * np.pi)
            hdg = np.array([np.cos(ang), np.sin(ang), 0.0])
            t = 0
            ok = True
            while True:
                s = max(self.stats.min_stationary_frames,
                        int(round(sample_split_lognormal(self.rng, *self.stats.stationary_s) * fps)))
                s = min(s, n - t)
                stay = self.stationary_path(pos, s)
                c = self.conflict(t, stay)
                if c is not None:
                    s = c - 1
                    if s < 1:
                        ok = False
                        break
                    stay = self.stationary_path(pos, s)
                    forced = True
                else:
                    forced = False
                path[t:t + s] = stay
                heading[t:t + s] = hdg
                seqs.append(SceneSequence(bird, "stationary", t, t + s - 1))
                t += s
                if t >= n:
                    break
                planned = None
                for _ in range(50):
                    nm = int(round(sample_split_lognormal(self.rng, *self.stats.motion_frames)))
                    nm = int(np.clip(nm, self.stats.min_motion_frames, self.stats.max_motion_frames))
                    if t + nm + 1 > n:
                        continue
                    plan = self.plan_motion(pos, nm)
                    if plan is None:
                        continue
                    traj, legs = plan
                    if self.conflict(t, traj) is not None:
                        continue
                    planned = (nm, traj, legs)
                    break
                if planned is None:
                    if forced:
                        ok = False
                        break
                    # no flight fits before the end: stay put for the rest of the timeline
                    rest = self.stationary_path(pos, n - t)
                    if self.conflict(t, rest) is not None:
                        ok = False
                        break
                    path[t:] = rest
                    heading[t:] = hdg
                    last = seqs.pop()
                    seqs.append(SceneSequence(bird, "stationary", last.start, n - 1))
                    t = n
                    break
                nm, traj, legs = planned
                path[t:t + nm] = traj[:-1]
                prev = pos
                for k in range(nm):
                    d = traj[k] - prev
                    if np.linalg.norm(d) > 1e-9:
                        hdg_motion = d / np.linalg.norm(d)
                        flat = np.array([d[0], d[1], 0.0])
                        if np.linalg.norm(flat) > 1e-9:
                            hdg = flat / np.linalg.norm(flat)
                    else:
                        hdg_motion = heading[t + k - 1] if k else hdg
                    heading[t + k] = hdg_motion
                    prev = traj[k]
                seqs.append(SceneSequence(bird, "motion", t, t + nm - 1))
                t += nm
                pos = traj[-1].copy()
            if ok:
                return path, heading, seqs
        raise ConfigError(f"could not place bird {bird} with min_separation="
                          f"{self.cfg.min_separation} after {self.cfg.max_attempts} attempts")


def generate_scene(cfg: SceneConfig) -> GroundTruthScene:
    """Ground-truth flock trajectories; deterministic given ``cfg.rng_seed``."""
    cfg.validate()
    b = _SceneBuilder(cfg)
    centroids, heads, seqs = [], [], []
    for bird in range(cfg.n_birds):
        path, hdg, s = b.build_bird(bird)
        b.placed.append(path)
        centroids.append(path)
        heads.append(path + BODY_SEMI_AXES[0] * hdg)
        seqs.extend(s)
    return GroundTruthScene(fps=cfg.fps, centroid=np.stack(centroids, axis=1),
                            head=np.stack(heads, axis=1), sequences=seqs,
                            volume=tuple(cfg.volume))


def scene_from_paths(paths: np.ndarray, fps: float = 40.0, speed_eps: float = 1e-6) -> GroundTruthScene:
    """Wrap hand-built ``(n_frames, n_birds, 3)`` trajectories as a scene.

    Frames where a bird does not move are stationary, the rest motion. The head
    points along the most recent direction of travel.
    """
    paths = np.asarray(paths, dtype=float)
    n, nb, _ = paths.shape
    heads = np.empty_like(paths)
    seqs = []
    for b in range(nb):
        hdg = np.array([1.0, 0.0, 0.0])
        moving = np.zeros(n, dtype=bool)
        for f in range(n):
            if f + 1 < n:
                d = paths[f + 1, b] - paths[f, b]
                if np.linalg.norm(d) > speed_eps:
                    moving[f + 1] = True
                    hdg = d / np.linalg.norm(d)
            heads[f, b] = paths[f, b] + BODY_SEMI_AXES[0] * hdg
        start = 0
        for f in range(1, n + 1):
            if f == n or moving[f] != moving[start]:
                seqs.append(SceneSequence(b, "motion" if moving[start] else "stationary", start, f - 1))
                start = f
        # a motion run includes the landing frame; hand it to the next stationary run
        fixed = []
        for s in seqs:
            if s.bird_id == b and s.kind == "motion" and s.end < n - 1:
                fixed.append(SceneSequence(b, "motion", s.start, s.end - 1))
            elif s.bird_id == b and s.kind == "stationary" and fixed and fixed[-1].kind == "motion":
                fixed.append(SceneSequence(b, "stationary", s.start - 1, s.end))
            elif s.bird_id == b:
                fixed.append(s)
        seqs = [s for s in seqs if s.bird_id != b] + [s for s in fixed if s.n_frames > 0]
    return GroundTruthScene(fps=fps, centroid=paths, head=heads, sequences=seqs)


def _integrate(x0: float, schedule, dt: float) -> list[float]:
    """Positions along one axis for ``(n_frames, v_from, v_to)`` smoothstep velocity ramps."""
    xs, x = [], x0
    for n, v0, v1 in schedule:
        s = np.arange(1, n + 1) / n
        for v in v0 + (v1 - v0) * (3 * s**2 - 2 * s**3):
            x += v * dt
            xs.append(x)
    return xs


def bounce_scene(fps: float = 40.0, speed: float = 3.0, blackout: tuple[int, int] = (70, 79),
                 ) -> tuple[GroundTruthScene, tuple[int, int]]:
    """Two birds meet head-on during a blackout and turn back.

    The gap is laid out so that flying straight through is exactly as
    consistent as turning back, and straight through has the better velocity
    match. A greedy linker therefore swaps the two identities while the true
    continuation stays in the hypothesis graph. Bird 0 then keeps flying,
    with hovers, for more than 300 frames. Returns the scene and the
    blackout range to pass to :class:`NoiseModel`.
    """
    dt = 1.0 / fps
    b0, b1 = blackout
    gap = b1 - b0 + 2            # frames between the last state before and the first after
    half = speed * gap * dt / 2  # distance each bird would cover to the meeting point
    lead = 20
    # bird 0: rest, ramp up, cruise into the blackout
    x0 = [0.8] * lead + _integrate(0.8, [(lead, 0.0, speed), (b0 - 2 * lead, speed, speed)], dt)
    x_meet0 = x0[-1]
    # bird 1 mirrors bird 0 across the meeting point
    x_meet1 = x_meet0 + 2 * half
    ramp1 = _integrate(0.0, [(lead, 0.0, -speed)], dt)
    x1 = [x_meet1 - ramp1[-1]] * (b0 - lead) + [x_meet1 - ramp1[-1] + r for r in ramp1]
    for j in range(1, gap):
        k = min(j, gap - j)
        x0.append(x_meet0 + speed * dt * k)
        x1.append(x_meet1 - speed * dt * k)
    x0.append(x_meet0)
    x1.append(x_meet1)
    x0 += _integrate(x_meet0, [(29, -speed, -speed), (lead, -speed, 0.0), (80, 0.0, 0.0),
                               (lead, 0.0, speed), (10, speed, speed), (lead, speed, 0.0), (60, 0.0, 0.0),
                               (lead, 0.0, -speed), (lead, -speed, 0.0)], dt)
    land0 = len(x0) - 1
    x1 += _integrate(x_meet1, [(lead, speed, 0.0)], dt)
    land1 = len(x1) - 1
    n = len(x0) + lead
    x0 += [x0[-1]] * (n - len(x0))
    x1 += [x1[-1]] * (n - len(x1))
    paths = np.zeros((n, 2, 3))
    paths[:, 0] = np.c_[x0, np.full(n, 1.2), np.full(n, 1.5)]
    paths[:, 1] = np.c_[x1, np.full(n, 1.3), np.full(n, 1.5)]
    scene = scene_from_paths(paths, fps)
    # hovers belong to the surrounding flight, so spell out the sequences
    seqs = [SceneSequence(0, "stationary", 0, lead - 1), SceneSequence(0, "motion", lead, land0 - 1),
            SceneSequence(0, "stationary", land0, n - 1),
            SceneSequence(1, "stationary", 0, b0 - lead - 1), SceneSequence(1, "motion", b0 - lead, land1 - 1),
            SceneSequence(1, "stationary", land1, n - 1)]
    return GroundTruthScene(fps=fps, centroid=scene.centroid, head=scene.head, sequences=seqs), blackout


# ---------------------------------------------------------------------------
# Detections
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Mask:
    """A binary silhouette stored on its bounding box."""

    camera: int
    u0: int
    v0: int
    data: np.ndarray  # bool (h, w), row = v, column = u

    @property
    def area(self) -> int:
        return int(self.data.sum())

    def pixels(self) -> np.ndarray:
        """``(N, 2)`` integer pixel coordinates ``(u, v)``."""
        vs, us = np.nonzero(self.data)
        return np.column_stack([us + self.u0, vs + self.v0]).astype(float)

    @property
    def centroid(self) -> np.ndarray:
        return self.pixels().mean(axis=0)

    def to_rle(self) -> dict:
        flat = self.data.ravel().astype(np.int8)
        change = np.flatnonzero(np.diff(np.concatenate([[0], flat, [1 - flat[-1] if len(flat) else 0]])))
        counts = np.diff(np.concatenate([[0], change]))
        if len(flat) and counts[-1] == 0:
            counts = counts[:-1]
        return {"origin": [self.u0, self.v0], "size": list(self.data.shape),
                "counts": [int(c) for c in counts]}

    @classmethod
    def from_rle(cls, camera: int, rle: dict) -> "Mask":
        h, w = rle["size"]
        flat = np.zeros(h * w, dtype=bool)
        pos = 0
        val = False
        for c in rle["counts"]:
            if val:
                flat[pos:pos + c] = True
            pos += c
            val = not val
        return cls(camera=camera, u0=int(rle["origin"][0]), v0=int(rle["origin"][1]),
                   data=flat.reshape(h, w))


@dataclass(eq=False)
class DetectionSet:
    frame: int
    masks: dict[int, list[Mask]]

    def all_masks(self) -> list[Mask]:
        return [m for cam in sorted(self.masks) for m in self.masks[cam]]


@dataclass
class NoiseModel:
    miss_rate: float = 0.0
    false_positive_rate: float = 0.0
    centroid_jitter: float = 0.0
    merge_occlusions: bool = True
    # frames (inclusive ranges) where every detection is dropped
    blackouts: list = field(default_factory=list)
    # sun direction used to place shadow false positives on the floor
    shadow_direction: tuple[float, float] = (0.35, 0.15)

    def validate(self) -> None:
        if not (0.0 <= self.miss_rate <= 1.0):
            raise ConfigError("miss_rate must be in [0, 1]")
        if not (0.0 <= self.false_positive_rate <= 1.0):
            raise ConfigError("false_positive_rate must be in [0, 1]")
        if self.centroid_jitter < 0:
            raise ConfigError("centroid_jitter must be >= 0")


def _ellipsoid_dual(center, axes_dirs, semi_axes):
    H = np.eye(4)
    H[:3, :3] = axes_dirs
    H[:3, 3] = center
    D = np.diag([semi_axes[0] ** 2, semi_axes[1] ** 2, semi_axes[2] ** 2, -1.0])
    return H @ D @ H.T


def _frame_from_heading(heading):
    e1 = np.asarray(heading, dtype=float)
    e1 = e1 / np.linalg.norm(e1)
    ref = np.array([0.0, 0.0, 1.0]) if abs(e1[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e2 = np.cross(ref, e1)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    return np.column_stack([e1, e2, e3])


def render_ellipsoid(camera: CameraModel, center, axes_dirs, semi_axes, min_depth=0.05) -> Mask | None:
    """Rasterise the silhouette of an ellipsoid as seen by ``camera``."""
    center = np.asarray(center, dtype=float)
    pc = camera.to_camera(center[None])[0]
    if pc[2] <= max(semi_axes) + min_depth:
        return None
    Qd = _ellipsoid_dual(center, axes_dirs, semi_axes)
    P = camera.P
    Cd = P @ Qd @ P.T
    if Cd[2, 2] >= 0:
        return None
    disc_u = Cd[0, 2] ** 2 - Cd[0, 0] * Cd[2, 2]
    disc_v = Cd[1, 2] ** 2 - Cd[1, 1] * Cd[2, 2]
    if disc_u < 0 or disc_v < 0:
        return None
    us = sorted(((Cd[0, 2] - np.sqrt(disc_u)) / Cd[2, 2], (Cd[0, 2] + np.sqrt(disc_u)) / Cd[2, 2]))
    vs = sorted(((Cd[1, 2] - np.sqrt(disc_v)) / Cd[2, 2], (Cd[1, 2] + np.sqrt(disc_v)) / Cd[2, 2]))
    u0 = max(0, int(np.ceil(us[0])))
    u1 = min(camera.image_width - 1, int(np.floor(us[1])))
    v0 = max(0, int(np.ceil(vs[0])))
    v1 = min(camera.image_height - 1, int(np.floor(vs[1])))
    if u1 < u0 or v1 < v0:
        return None
    C = np.linalg.inv(Cd)
    uu = np.arange(u0, u1 + 1, dtype=float)
    vv = np.arange(v0, v1 + 1, dtype=float)[:, None]
    q = (C[0, 0] * uu**2 + 2 * C[0, 1] * uu * vv + C[1, 1] * vv**2
         + 2 * C[0, 2] * uu + 2 * C[1, 2] * vv + C[2, 2])
    centre = Cd[:2, 2] / Cd[2, 2]
    cq = (C[0, 0] * centre[0] ** 2 + 2 * C[0, 1] * centre[0] * centre[1] + C[1, 1] * centre[1] ** 2
          + 2 * C[0, 2] * centre[0] + 2 * C[1, 2] * centre[1] + C[2, 2])
    inside = (q * np.sign(cq)) > 0
    if not inside.any():
        return None
    rows = np.flatnonzero(inside.any(axis=1))
    cols = np.flatnonzero(inside.any(axis=0))
    data = inside[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return Mask(camera=camera.id, u0=u0 + int(cols[0]), v0=v0 + int(rows[0]), data=data.copy())


def _union(masks: list[Mask], camera: int) -> Mask:
    u0 = min(m.u0 for m in masks)
    v0 = min(m.v0 for m in masks)
    u1 = max(m.u0 + m.data.shape[1] for m in masks)
    v1 = max(m.v0 + m.data.shape[0] for m in masks)
    data = np.zeros((v1 - v0, u1 - u0), dtype=bool)
    for m in masks:
        h, w = m.data.shape
        data[m.v0 - v0:m.v0 - v0 + h, m.u0 - u0:m.u0 - u0 + w] |= m.data
    return Mask(camera=camera, u0=u0, v0=v0, data=data)


def _overlap(a: Mask, b: Mask) -> bool:
    u0 = max(a.u0, b.u0)
    v0 = max(a.v0, b.v0)
    u1 = min(a.u0 + a.data.shape[1], b.u0 + b.data.shape[1])
    v1 = min(a.v0 + a.data.shape[0], b.v0 + b.data.shape[0])
    if u1 <= u0 or v1 <= v0:
        return False
    sa = a.data[v0 - a.v0:v1 - a.v0, u0 - a.u0:u1 - a.u0]
    sb = b.data[v0 - b.v0:v1 - b.v0, u0 - b.u0:u1 - b.u0]
    return bool((sa & sb).any())


def merge_overlapping(masks: list[Mask], camera: int) -> list[Mask]:
    """Replace every group of mutually overlapping masks by their union."""
    parent = list(range(len(masks)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if find(i) != find(j) and _overlap(masks[i], masks[j]):
                parent[find(j)] = find(i)
    groups: dict[int, list[int]] = {}
    for i in range(len(masks)):
        groups.setdefault(find(i), []).append(i)
    out = []
    for root in sorted(groups):
        idx = groups[root]
        out.append(masks[idx[0]] if len(idx) == 1 else _union([masks[i] for i in idx], camera))
    return out


def _shift(mask: Mask, du: int, dv: int, camera: CameraModel) -> Mask | None:
    u0, v0 = mask.u0 + du, mask.v0 + dv
    h, w = mask.data.shape
    cu0, cv0 = max(u0, 0), max(v0, 0)
    cu1, cv1 = min(u0 + w, camera.image_width), min(v0 + h, camera.image_height)
    if cu1 <= cu0 or cv1 <= cv0:
        return None
    data = mask.data[cv0 - v0:cv1 - v0, cu0 - u0:cu1 - u0]
    if not data.any():
        return None
    return Mask(camera=mask.camera, u0=cu0, v0=cv0, data=data.copy())


def frame_rng(seed: int, frame: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame), int(stream)])


def render_frame(scene: GroundTruthScene, frame: int, cameras: Sequence[CameraModel],
                 noise: NoiseModel | None = None, seed: int = 0) -> DetectionSet:
    """Silhouette detections for one frame in every camera."""
    noise = noise or NoiseModel()
    rng = frame_rng(seed, frame, 1)
    blacked = any(a <= frame <= b for a, b in noise.blackouts)
    centers = scene.centroid[frame]
    heads = scene.head[frame]
    frames_ = [_frame_from_heading(h - c) for h, c in zip(heads, centers)]
    out: dict[int, list[Mask]] = {}
    sx, sy = noise.shadow_direction
    for cam in cameras:
        masks = []
        for b in range(scene.n_birds):
            keep = rng.random() >= noise.miss_rate
            du, dv = np.rint(rng.normal(0.0, noise.centroid_jitter, 2)) if noise.centroid_jitter > 0 else (0, 0)
            if not keep or blacked:
                continue
            m = render_ellipsoid(cam, centers[b], frames_[b], BODY_SEMI_AXES)
            if m is None:
                continue
            if du or dv:
                m = _shift(m, int(du), int(dv), cam)
                if m is None:
                    continue
            masks.append(m)
        n_fp = rng.poisson(noise.false_positive_rate) if noise.false_positive_rate > 0 else 0
        for _ in range(n_fp):
            b = int(rng.integers(scene.n_birds))
            c = centers[b]
            shadow = np.array([c[0] + sx * c[2], c[1] + sy * c[2], SHADOW_SEMI_AXES[2]])
            shadow[0] = np.clip(shadow[0], 0.0, scene.volume[0])
            shadow[1] = np.clip(shadow[1], 0.0, scene.volume[1])
            h = heads[b] - c
            h[2] = 0.0
            if np.linalg.norm(h) < 1e-9:
                h = np.array([1.0, 0.0, 0.0])
            if blacked:
                continue
            m = render_ellipsoid(cam, shadow, _frame_from_heading(h), SHADOW_SEMI_AXES)
            if m is not None:
                masks.append(m)
        if noise.merge_occlusions and len(masks) > 1:
            masks = merge_overlapping(masks, cam.id)
        out[cam.id] = masks
    return DetectionSet(frame=frame, masks=out)


def render_detections(scene: GroundTruthScene, cameras: Sequence[CameraModel],
                      noise: NoiseModel | None = None, seed: int = 0,
                      frames: range | None = None) -> Iterator[DetectionSet]:
    """Lazily render every frame; each frame uses its own seeded stream."""
    noise = noise or NoiseModel()
    noise.validate()
    for f in frames if frames is not None else range(scene.n_frames):
        yield render_frame(scene, f, cameras, noise, seed)


def export_wild(scene: GroundTruthScene) -> list[WildExample]:
    """One WILD example per motion sequence, ordered by start frame then bird.

    Sequences touching the first or last frame have no annotated endpoint and
    are skipped.
    """
    examples = []
    tail = scene.tail
    for s in sorted(scene.motion_sequences(), key=lambda s: (s.start, s.bird_id)):
        if s.start < 1 or s.end >= scene.n_frames - 1:
            continue
        fs, fe = s.start - 1, s.end + 1
        b = s.bird_id
        examples.append(WildExample(
            index=len(examples), frame_start=fs, frame_end=fe,
            start_head=scene.head[fs, b].copy(), start_tail=tail[fs, b].copy(),
            end_head=scene.head[fe, b].copy(), end_tail=tail[fe, b].copy(),
            target_id=b, bucket=length_bucket(s.n_frames)))
    return examples


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_detections(detections, path) -> None:
    """Line-delimited JSON, one record per (frame, camera, mask)."""
    path = Path(path)
    gz = path.suffix == ".gz"
    fh = gzip.GzipFile(filename="", mode="wb", fileobj=open(path, "wb"), mtime=0) if gz else \
        open(path, "w", encoding="utf-8")
    with fh:
        for ds in detections:
            for cam in sorted(ds.masks):
                for k, m in enumerate(ds.masks[cam]):
                    c = m.centroid
                    rec = {"frame": ds.frame, "camera": cam, "mask_id": k,
                           "centroid": [float(c[0]), float(c[1])], "area": m.area,
                           "rle": m.to_rle()}
                    line = json.dumps(rec, separators=(",", ":")) + "\n"
                    fh.write(line.encode() if gz else line)


def read_detections(path, cameras: Sequence[CameraModel] | None = None) -> Iterator[DetectionSet]:
    """Stream detection sets frame by frame; frames with no masks are still yielded."""
    path = Path(path)
    if not path.exists():
        raise StageIOError(f"detections file not found: {path}", path=str(path))
    cam_ids = sorted(c.id for c in cameras) if cameras is not None else None
    opener = gzip.open(path, "rt", encoding="utf-8") if path.suffix == ".gz" else \
        open(path, encoding="utf-8")
    current = None
    with opener as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                frame = int(rec["frame"])
                mask = Mask.from_rle(int(rec["camera"]), rec["rle"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise StageIOError(f"{path}:{lineno}: bad detection record ({exc})",
                                   path=str(path)) from None
            if current is None or frame != current.frame:
                if current is not None:
                    if frame < current.frame:
                        raise StageIOError(f"{path}:{lineno}: frames out of order", path=str(path))
                    yield current
                    for f in range(current.frame + 1, frame):
                        yield DetectionSet(f, {c: [] for c in cam_ids or []})
                current = DetectionSet(frame, {c: [] for c in cam_ids or []})
            current.masks.setdefault(mask.camera, []).append(mask)
    if current is not None:
        yield current


def write_ground_truth(scene: GroundTruthScene, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "bird_id", "x", "y", "z", "head_x", "head_y", "head_z"])
        for f in range(scene.n_frames):
            for b in range(scene.n_birds):
                c = scene.centroid[f, b]
                h = scene.head[f, b]
                w.writerow([f, b, *(repr(float(x)) for x in c), *(repr(float(x)) for x in h)])


def read_ground_truth(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(centroid, head)`` arrays of shape (n_frames, n_birds, 3), NaN where absent."""
    path = Path(path)
    if not path.exists():
        raise StageIOError(f"ground-truth/track CSV not found: {path}", path=str(path))
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.size == 0:
        return np.zeros((0, 0, 3)), np.zeros((0, 0, 3))
    frames = rows[:, 0].astype(int)
    birds = rows[:, 1].astype(int)
    n_f, n_b = frames.max() + 1, birds.max() + 1
    cen = np.full((n_f, n_b, 3), np.nan)
    head = np.full((n_f, n_b, 3), np.nan)
    cen[frames, birds] = rows[:, 2:5]
    if rows.shape[1] >= 8:
        head[frames, birds] = rows[:, 5:8]
    return cen, head
