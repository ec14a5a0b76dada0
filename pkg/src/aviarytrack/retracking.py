"""Join tracklets across stops and short gaps into tracks.

A tracklet ``A`` can be continued by ``B`` when ``B`` starts 1..max_gap frames
after ``A`` ends and the constant-velocity projections of ``A``'s end (forward)
and ``B``'s start (backward) meet at the midpoint time within ``join_dist``.
The greedy linker keeps one continuation per endpoint; the hypothesis graph
keeps all of them.
"""

from __future__ import annotations

import json
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, StageIOError
from .tracking import Tracklet


@dataclass
class RetrackConfig:
    max_gap: int = 20
    join_dist: float = 0.3
    vel_tol: float = float("inf")
    min_length: int = 10
    dt: float = 1.0 / 40.0

    def validate(self) -> None:
        if self.max_gap < 1:
            raise ConfigError("retracking.max_gap must be >= 1")
        if not (self.join_dist > 0 and self.vel_tol > 0 and self.dt > 0):
            raise ConfigError("retracking.join_dist, vel_tol and dt must be positive")
        if self.min_length < 1:
            raise ConfigError("retracking.min_length must be >= 1")


@dataclass(frozen=True)
class Join:
    parent: int
    child: int
    vel_diff: float
    mid_dist: float


@dataclass(eq=False)
class Track:
    id: int
    tracklet_ids: list[int]
    frames: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    gap_filled: np.ndarray
    source: np.ndarray  # tracklet id per state, -1 inside gaps

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def start(self) -> int:
        return int(self.frames[0])

    @property
    def end(self) -> int:
        return int(self.frames[-1])

    def state_at(self, frame: int) -> np.ndarray | None:
        k = frame - self.start
        if 0 <= k < len(self.frames):
            return self.positions[k]
        return None

    def position_clamped(self, frame: int) -> np.ndarray:
        """Position at ``frame``, or the last known one if the track ended earlier."""
        k = min(frame, self.end) - self.start
        return self.positions[max(k, 0)]


def _endpoints(tracklets: Sequence[Tracklet]):
    ends = np.array([t.end for t in tracklets])
    starts = np.array([t.start for t in tracklets])
    pe = np.array([t.positions[-1] for t in tracklets]).reshape(-1, 3)
    ve = np.array([t.velocities[-1] for t in tracklets]).reshape(-1, 3)
    ps = np.array([t.positions[0] for t in tracklets]).reshape(-1, 3)
    vs = np.array([t.velocities[0] for t in tracklets]).reshape(-1, 3)
    return starts, ends, ps, vs, pe, ve


def feasible_joins(tracklets: Sequence[Tracklet], cfg: RetrackConfig) -> list[Join]:
    """Every feasible (parent, child) pair, by tracklet id."""
    if not tracklets:
        return []
    starts, ends, ps, vs, pe, ve = _endpoints(tracklets)
    order = np.argsort(starts, kind="stable")
    sorted_starts = starts[order]
    out = []
    for a in range(len(tracklets)):
        lo = bisect_left(sorted_starts, ends[a] + 1)
        hi = bisect_right(sorted_starts, ends[a] + cfg.max_gap)
        if lo >= hi:
            continue
        b = order[lo:hi]
        gap = (starts[b] - ends[a]) * cfg.dt
        half = 0.5 * gap[:, None]
        fwd = pe[a] + ve[a] * half
        bwd = ps[b] - vs[b] * half
        d = np.linalg.norm(fwd - bwd, axis=1)
        dv = np.linalg.norm(vs[b] - ve[a], axis=1)
        ok = (d < cfg.join_dist) & (dv <= cfg.vel_tol)
        for k in np.flatnonzero(ok):
            out.append(Join(tracklets[a].id, tracklets[b[k]].id, float(dv[k]), float(d[k])))
    out.sort(key=lambda j: (j.parent, j.child))
    return out


def gap_fill(end_frame: int, p_end, v_end, start_frame: int, p_start, v_start, dt: float):
    """Frames strictly inside the gap, with blended forward/backward extrapolation."""
    frames = np.arange(end_frame + 1, start_frame)
    if len(frames) == 0:
        return frames, np.zeros((0, 3)), np.zeros((0, 3))
    w = ((frames - end_frame) / (start_frame - end_frame))[:, None]
    fwd = p_end + np.outer((frames - end_frame) * dt, v_end)
    bwd = p_start + np.outer((frames - start_frame) * dt, v_start)
    pos = (1 - w) * fwd + w * bwd
    vel = (1 - w) * v_end + w * v_start
    return frames, pos, vel


def select_joins(joins: Sequence[Join]) -> dict[int, int]:
    """Globally greedy selection: parent -> child, each endpoint used once."""
    chosen: dict[int, int] = {}
    taken: set[int] = set()
    for j in sorted(joins, key=lambda j: (j.vel_diff, j.mid_dist, j.parent, j.child)):
        if j.parent in chosen or j.child in taken:
            continue
        chosen[j.parent] = j.child
        taken.add(j.child)
    return chosen


def assemble(chain: Sequence[Tracklet], track_id: int, dt: float) -> Track:
    frames, pos, vel, gap, src = [], [], [], [], []
    prev = None
    for t in chain:
        if prev is not None:
            f, p, v = gap_fill(prev.end, prev.positions[-1], prev.velocities[-1],
                               t.start, t.positions[0], t.velocities[0], dt)
            frames.append(f)
            pos.append(p)
            vel.append(v)
            gap.append(np.ones(len(f), dtype=bool))
            src.append(np.full(len(f), -1))
        frames.append(np.asarray(t.frames))
        pos.append(t.pos_array())
        vel.append(t.vel_array())
        gap.append(np.zeros(len(t), dtype=bool))
        src.append(np.full(len(t), t.id))
        prev = t
    return Track(track_id, [t.id for t in chain], np.concatenate(frames).astype(int),
                 np.vstack(pos), np.vstack(vel), np.concatenate(gap), np.concatenate(src))


def link_tracklets(tracklets: Sequence[Tracklet], cfg: RetrackConfig | None = None) -> list[Track]:
    """Greedy re-tracking; tracks shorter than ``min_length`` frames are dropped."""
    cfg = cfg or RetrackConfig()
    cfg.validate()
    by_id = {t.id: t for t in tracklets if len(t)}
    chosen = select_joins(feasible_joins(list(by_id.values()), cfg))
    has_parent = set(chosen.values())
    heads = sorted((t for t in by_id.values() if t.id not in has_parent),
                   key=lambda t: (t.start, t.id))
    tracks = []
    for h in heads:
        chain = [h]
        while chain[-1].id in chosen:
            chain.append(by_id[chosen[chain[-1].id]])
        if chain[-1].end - chain[0].start + 1 < cfg.min_length:
            continue
        tracks.append(assemble(chain, len(tracks), cfg.dt))
    return tracks


@dataclass(eq=False)
class HypothesisTree:
    """All feasible continuations reachable from one root tracklet.

    ``edges`` maps a tracklet id to its feasible children. The graph is a DAG,
    so a tracklet can be reached along several join sequences; ``n_leaves``
    counts the unfolded tree's leaves, one per root-to-leaf join sequence.
    """

    root: int
    edges: dict[int, list[int]] = field(default_factory=dict)

    def nodes(self) -> list[int]:
        seen = {self.root}
        stack = [self.root]
        while stack:
            for c in self.edges.get(stack.pop(), []):
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return sorted(seen)

    @property
    def leaves(self) -> list[int]:
        return [n for n in self.nodes() if not self.edges.get(n)]

    @property
    def n_leaves(self) -> int:
        memo: dict[int, int] = {}

        def count(n):
            if n not in memo:
                kids = self.edges.get(n, [])
                memo[n] = sum(count(c) for c in kids) if kids else 1
            return memo[n]

        for n in sorted(self.nodes(), key=lambda n: -n):
            count(n)
        return count(self.root)

    def to_dict(self) -> dict:
        return {"root": self.root,
                "edges": {str(k): list(v) for k, v in sorted(self.edges.items()) if v},
                "leaves": self.leaves}

    @classmethod
    def from_dict(cls, d: dict) -> "HypothesisTree":
        return cls(int(d["root"]), {int(k): [int(c) for c in v] for k, v in d["edges"].items()})


def build_hypothesis_tree(tracklets: Sequence[Tracklet], cfg: RetrackConfig | None = None
                          ) -> list[HypothesisTree]:
    """One tree per tracklet that has no feasible parent; every feasible child is kept."""
    cfg = cfg or RetrackConfig()
    cfg.validate()
    tracklets = [t for t in tracklets if len(t)]
    children: dict[int, list[int]] = {}
    has_parent = set()
    for j in feasible_joins(tracklets, cfg):
        children.setdefault(j.parent, []).append(j.child)
        has_parent.add(j.child)
    trees = []
    for t in sorted(tracklets, key=lambda t: (t.start, t.id)):
        if t.id in has_parent:
            continue
        tree = HypothesisTree(t.id)
        for n in tree_nodes(t.id, children):
            if n in children:
                tree.edges[n] = list(children[n])
        trees.append(tree)
    return trees


def tree_nodes(root: int, children: dict[int, list[int]]) -> list[int]:
    return HypothesisTree(root, children).nodes()


class JoinGraph:
    """Tracklets plus every feasible join; answers "where can this hypothesis be at frame f"."""

    def __init__(self, tracklets: Sequence[Tracklet], trees: Sequence[HypothesisTree], dt: float):
        self.tracklets = {t.id: t for t in tracklets}
        self.children: dict[int, list[int]] = {}
        for tree in trees:
            for k, v in tree.edges.items():
                self.children.setdefault(k, [])
                for c in v:
                    if c not in self.children[k]:
                        self.children[k].append(c)
        self.dt = dt
        self._memo: dict[tuple[int, int], np.ndarray] = {}

    def leaf_positions(self, node: int, frame: int) -> np.ndarray:
        """Positions at ``frame`` over every join sequence continuing from ``node``.

        A sequence that ends before ``frame`` contributes its last position;
        a sequence whose gap spans ``frame`` contributes the gap-fill estimate.
        """
        key = (node, frame)
        if key in self._memo:
            return self._memo[key]
        t = self.tracklets[node]
        if frame <= t.end:
            out = np.asarray(t.positions[max(frame, t.start) - t.start])[None]
        elif not self.children.get(node):
            out = np.asarray(t.positions[-1])[None]
        else:
            parts = []
            for c in self.children[node]:
                ct = self.tracklets[c]
                if ct.start > frame:
                    _, p, _ = gap_fill(t.end, t.positions[-1], t.velocities[-1],
                                       ct.start, ct.positions[0], ct.velocities[0], self.dt)
                    parts.append(p[frame - t.end - 1][None])
                else:
                    parts.append(self.leaf_positions(c, frame))
            out = np.unique(np.vstack(parts), axis=0)
        self._memo[key] = out
        return out


def write_tracks(tracks: Sequence[Track], path) -> None:
    with open(path, "w") as fh:
        for tr in tracks:
            for k in range(len(tr)):
                fh.write(json.dumps({
                    "track_id": tr.id, "frame": int(tr.frames[k]),
                    "pos": [round(float(x), 9) for x in tr.positions[k]],
                    "vel": [round(float(x), 9) for x in tr.velocities[k]],
                    "gap_filled": bool(tr.gap_filled[k]),
                    "tracklet_id": int(tr.source[k]),
                }) + "\n")


def read_tracks(path) -> list[Track]:
    path = Path(path)
    if not path.exists():
        raise StageIOError(f"track file not found: {path}", path=str(path))
    rows: dict[int, list[dict]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                rows.setdefault(int(r["track_id"]), []).append(r)
    tracks = []
    for tid in sorted(rows):
        rs = sorted(rows[tid], key=lambda r: r["frame"])
        src = np.array([int(r.get("tracklet_id", -1)) for r in rs])
        ids = []
        for s in src:
            if s >= 0 and (not ids or ids[-1] != s):
                ids.append(int(s))
        tracks.append(Track(tid, ids, np.array([r["frame"] for r in rs], dtype=int),
                            np.array([r["pos"] for r in rs], dtype=float),
                            np.array([r["vel"] for r in rs], dtype=float),
                            np.array([bool(r["gap_filled"]) for r in rs]), src))
    return tracks


def write_trees(trees: Sequence[HypothesisTree], path) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in trees], indent=1) + "\n")


def read_trees(path) -> list[HypothesisTree]:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise StageIOError(f"tree file not found: {path}", path=str(path)) from None
    return [HypothesisTree.from_dict(d) for d in data]
