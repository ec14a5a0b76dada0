"""Per-frame point-cloud reconstruction: match, triangulate, de-ghost, cluster.

Active pixels from pairs of views are matched on symmetric epipolar distance,
confirmed against a third covering view, triangulated, filtered against
neighbouring frames and grouped with DBSCAN. Cluster centres feed the tracker.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations, islice
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import StageIOError
from .geometry import (BEHIND_DEPTH, CameraModel, dlt_rows, epipolar_distance_matrix,
                       fundamental_matrix, solve_dlt)
from .simulator import DetectionSet, Mask, frame_rng


@dataclass
class ReconstructionConfig:
    eps_px: float = 3.0
    trifocal_tol: float = 3.0
    # third views that must confirm a pair (capped by how many views cover it),
    # less up to ``trifocal_slack`` covering views allowed to have missed the bird
    trifocal_min_views: int = 2
    trifocal_slack: int = 1
    ghost_window: int = 2
    ghost_radius: float = 0.15
    dbscan_eps: float = 0.12
    min_pts: int = 4
    mask_cap: int = 400
    # points outside the box grown by this margin are dropped; None keeps all
    bounds: tuple[float, float, float] | None = None
    bounds_margin: float = 0.2
    seed: int = 0


@dataclass(eq=False)
class RawPointSet:
    frame: int
    points: np.ndarray                       # (N, 3)
    cameras: np.ndarray = None               # (N, 2) contributing camera ids
    pixels: np.ndarray = None                # (N, 2, 2) pixel (u, v) per view

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        if self.cameras is None:
            self.cameras = np.zeros((n, 2), dtype=int)
        if self.pixels is None:
            self.pixels = np.zeros((n, 2, 2))

    def __len__(self):
        return len(self.points)

    def subset(self, keep: np.ndarray) -> "RawPointSet":
        return RawPointSet(self.frame, self.points[keep], self.cameras[keep], self.pixels[keep])


@dataclass(eq=False)
class Cluster:
    frame: int
    center: np.ndarray
    members: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_points(self) -> int:
        return len(self.members)


def subsample_mask(mask: Mask, cap: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """All pixels of ``mask``, or a uniform random subset of ``cap`` of them."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    px = mask.pixels()
    if len(px) <= cap:
        return px
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = np.sort(rng.choice(len(px), size=cap, replace=False))
    return px[idx]


class _ActiveImage:
    """Foreground lookup for one camera: is there an active pixel within tol of (u, v)?"""

    def __init__(self, camera: CameraModel, masks: Sequence[Mask]):
        self.camera = camera
        self.fg = np.zeros((camera.image_height, camera.image_width), dtype=bool)
        for m in masks:
            h, w = m.data.shape
            self.fg[m.v0:m.v0 + h, m.u0:m.u0 + w] |= m.data

    def near(self, uv: np.ndarray, tol: float) -> np.ndarray:
        r = int(np.ceil(tol + 0.5))
        off = np.arange(-r, r + 1)
        du, dv = np.meshgrid(off, off)
        # rounding moves the centre by at most 1/sqrt(2) px
        near = du**2 + dv**2 <= (tol + 0.7072) ** 2
        du, dv = du[near], dv[near]
        ru = np.rint(uv[:, 0]).astype(int)
        rv = np.rint(uv[:, 1]).astype(int)
        cu = ru[:, None] + du[None]
        cv = rv[:, None] + dv[None]
        H, W = self.fg.shape
        inb = (cu >= 0) & (cu < W) & (cv >= 0) & (cv < H)
        act = np.zeros(cu.shape, dtype=bool)
        act[inb] = self.fg[cv[inb], cu[inb]]
        d2 = (cu - uv[:, 0:1]) ** 2 + (cv - uv[:, 1:2]) ** 2
        return np.any(act & (d2 <= tol * tol), axis=1)


def _wrap_pi(a):
    return (a + np.pi / 2) % np.pi - np.pi / 2


class _PairMatcher:
    """Epipolar matching between two views with a mask-level angular pre-filter.

    Every epipolar line in view B passes through the epipole. A mask pair can
    only hold matches if the angular span (about the epipole) of the A pixels'
    lines comes within ``2 * eps`` pixels of the B mask's angular span.
    """

    def __init__(self, camA: CameraModel, camB: CameraModel):
        self.camA, self.camB = camA, camB
        self.F = fundamental_matrix(camA, camB)
        _, _, vt = np.linalg.svd(self.F.T)
        eB = vt[-1]
        self.eB = eB / np.linalg.norm(eB)
        self.finite = abs(self.eB[2]) > 1e-9

    def compatible(self, groupsA, groupsB, eps) -> np.ndarray:
        """Boolean (len(groupsA), len(groupsB)) matrix of mask pairs worth testing."""
        nA, nB = len(groupsA), len(groupsB)
        if not self.finite:
            return np.ones((nA, nB), dtype=bool)
        ptsA = np.vstack(groupsA)
        ptsB = np.vstack(groupsB)
        lines = np.column_stack([ptsA, np.ones(len(ptsA))]) @ self.F.T
        ang_l = np.arctan2(-lines[:, 0], lines[:, 1])
        ep = self.eB[:2] / self.eB[2]
        dB = ptsB - ep
        ang_p = np.arctan2(dB[:, 1], dB[:, 0])
        rad = np.hypot(dB[:, 0], dB[:, 1])
        startA = np.cumsum([0] + [len(g) for g in groupsA])[:-1]
        startB = np.cumsum([0] + [len(g) for g in groupsB])[:-1]
        ref = ang_p[startB]                                   # one reference per B mask
        relB = _wrap_pi(ang_p - np.repeat(ref, [len(g) for g in groupsB]))
        loB = np.minimum.reduceat(relB, startB)
        hiB = np.maximum.reduceat(relB, startB)
        rminB = np.minimum.reduceat(rad, startB)
        relL = _wrap_pi(ang_l[:, None] - ref[None, :])       # (N_A, nB)
        loL = np.minimum.reduceat(relL, startA, axis=0)
        hiL = np.maximum.reduceat(relL, startA, axis=0)
        gap = np.maximum(0.0, np.maximum(loL - hiB[None], loB[None] - hiL))
        wide = (hiL - loL) > np.pi / 2
        return wide | (rminB[None] * np.sin(np.minimum(gap, np.pi / 2)) <= 2.0 * eps)

    def match(self, groupsA, groupsB, eps, dense_limit=250_000):
        """Index pairs (into the concatenated pixel arrays) with distance < eps."""
        ptsA = np.vstack(groupsA)
        ptsB = np.vstack(groupsB)
        if len(ptsA) * len(ptsB) <= dense_limit:
            return np.nonzero(epipolar_distance_matrix(self.F, ptsA, ptsB) < eps)
        offA = np.cumsum([0] + [len(g) for g in groupsA])
        offB = np.cumsum([0] + [len(g) for g in groupsB])
        ia, ib = [], []
        for i, j in zip(*np.nonzero(self.compatible(groupsA, groupsB, eps))):
            D = epipolar_distance_matrix(self.F, groupsA[i], groupsB[j])
            a, b = np.nonzero(D < eps)
            ia.append(a + offA[i])
            ib.append(b + offB[j])
        if not ia:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        return np.concatenate(ia), np.concatenate(ib)


class Reconstructor:
    """Holds per-camera-pair state so repeated frames reuse fundamental matrices."""

    def __init__(self, cameras: Sequence[CameraModel], cfg: ReconstructionConfig | None = None):
        self.cameras = {c.id: c for c in cameras}
        self.cfg = cfg or ReconstructionConfig()
        self._pairs: dict[tuple[int, int], _PairMatcher] = {}

    def _pair(self, a, b):
        key = (a, b)
        if key not in self._pairs:
            self._pairs[key] = _PairMatcher(self.cameras[a], self.cameras[b])
        return self._pairs[key]

    def match_and_triangulate(self, detections: DetectionSet) -> RawPointSet:
        cfg = self.cfg
        groups: dict[int, list[np.ndarray]] = {}
        active: dict[int, _ActiveImage] = {}
        for cam_id in sorted(detections.masks):
            masks = detections.masks[cam_id]
            if cam_id not in self.cameras or not masks:
                continue
            rng = frame_rng(cfg.seed, detections.frame, 1000 + cam_id)
            groups[cam_id] = [subsample_mask(m, cfg.mask_cap, rng) for m in masks]
            active[cam_id] = _ActiveImage(self.cameras[cam_id], masks)
        cams = sorted(groups)
        pts, pair_cams, pix = [], [], []
        for a, b in combinations(cams, 2):
            ia, ib = self._pair(a, b).match(groups[a], groups[b], cfg.eps_px)
            if len(ia) == 0:
                continue
            uvA = np.vstack(groups[a])[ia]
            uvB = np.vstack(groups[b])[ib]
            pts.append(np.concatenate([dlt_rows(self.cameras[a], uvA),
                                       dlt_rows(self.cameras[b], uvB)], axis=1))
            pair_cams.append(np.tile([a, b], (len(ia), 1)))
            pix.append(np.stack([uvA, uvB], axis=1))
        if not pts:
            return RawPointSet(detections.frame, np.zeros((0, 3)))
        X = solve_dlt(np.vstack(pts))
        pair_cams = np.vstack(pair_cams)
        pix = np.vstack(pix)
        ok = np.all(np.isfinite(X), axis=1)
        X = np.where(ok[:, None], X, 0.0)
        for cid in self.cameras:
            _, depth = self.cameras[cid].project_points(X)
            mine = (pair_cams == cid).any(axis=1)
            ok &= ~mine | (depth > BEHIND_DEPTH)
        if cfg.bounds is not None:
            lo = -cfg.bounds_margin
            hi = np.asarray(cfg.bounds) + cfg.bounds_margin
            ok &= np.all((X >= lo) & (X <= hi), axis=1)
        X, pair_cams, pix = X[ok], pair_cams[ok], pix[ok]
        covered = np.zeros(len(X), dtype=int)
        confirmed = np.zeros(len(X), dtype=int)
        need = cfg.trifocal_min_views
        for c, cam in self.cameras.items():
            uv, depth = cam.project_points(X)
            cov = (depth > BEHIND_DEPTH) & cam.in_image(uv) & ~(pair_cams == c).any(axis=1)
            covered += cov
            if c in active:
                idx = np.flatnonzero(cov)
                if len(idx):
                    confirmed[idx] += active[c].near(uv[idx], cfg.trifocal_tol)
        # tolerate up to ``trifocal_slack`` covering views that missed the bird
        req = np.minimum(need, np.maximum(covered - cfg.trifocal_slack, np.minimum(covered, 1)))
        keep = confirmed >= req
        return RawPointSet(detections.frame, X[keep], pair_cams[keep], pix[keep])


def match_and_triangulate(detections: DetectionSet, cameras: Sequence[CameraModel],
                          eps_px: float = 3.0, trifocal_tol: float = 3.0, **kw) -> RawPointSet:
    cfg = ReconstructionConfig(eps_px=eps_px, trifocal_tol=trifocal_tol, **kw)
    return Reconstructor(cameras, cfg).match_and_triangulate(detections)


def filter_ghosts(point_sets: Sequence[RawPointSet], t: int, radius: float) -> RawPointSet:
    """Keep points of frame ``t`` that have a neighbour within ``radius`` in another frame.

    ``point_sets`` is the window of frames around ``t`` (any order, gaps allowed).
    """
    target = next((ps for ps in point_sets if ps.frame == t), None)
    if target is None:
        raise ValueError(f"frame {t} not in the window")
    if len(target) == 0:
        return target
    keep = np.zeros(len(target), dtype=bool)
    for ps in point_sets:
        if ps.frame == t or len(ps) == 0:
            continue
        d, _ = cKDTree(ps.points).query(target.points, k=1, distance_upper_bound=radius)
        keep |= d <= radius
    return target.subset(keep)


# below this many points the explicit neighbour pair list is small enough to build
_PAIR_LIMIT = 2000


def _cells_linked(tree: cKDTree, pts: np.ndarray, eps: float, chunk: int = 256) -> bool:
    """Whether any point of ``pts`` lies within ``eps`` of the tree's points."""
    for k in range(0, len(pts), chunk):
        d, _ = tree.query(pts[k:k + chunk], k=1, distance_upper_bound=eps)
        if np.any(d <= eps):
            return True
    return False


def dbscan_labels(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (-1 = noise); neighbourhoods include the point itself.

    Core points connected through core neighbourhoods form a cluster. A border
    point joins the cluster of its lowest-indexed core neighbour. Clusters are
    numbered in order of their lowest-indexed core point.

    Small sets use the explicit neighbour pair list. Larger ones run on a grid
    of side eps/sqrt(3): core points sharing a cell are always neighbours, so
    dense blobs never enumerate their quadratic pair set.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be > 0 and min_pts >= 1")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    labels = np.full(n, -1, dtype=int)
    if n == 0:
        return labels
    tree = cKDTree(points)
    # inclusive radius: the k-th neighbour (self counted) must lie within eps
    reach = np.nextafter(eps, np.inf)
    if min_pts == 1:
        core = np.ones(n, dtype=bool)
    else:
        d, _ = tree.query(points, k=min(min_pts, n), distance_upper_bound=reach)
        core = d[:, -1] <= eps if n >= min_pts else np.zeros(n, dtype=bool)
    core_idx = np.flatnonzero(core)
    if len(core_idx) == 0:
        return labels
    if n <= _PAIR_LIMIT:
        pairs = tree.query_pairs(eps, output_type="ndarray")
        keep = core[pairs[:, 0]] & core[pairs[:, 1]]
        ei, ej = pairs[keep, 0], pairs[keep, 1]
        graph = csr_matrix((np.ones(len(ei), dtype=np.int8), (ei, ej)), shape=(n, n))
        comp = connected_components(graph, directed=False)[1][core_idx]
        return _label_components(points, core, core_idx, comp, eps, labels)
    side = eps / np.sqrt(3.0)
    keys = np.floor(points[core_idx] / side).astype(np.int64)
    cells, cell_of = np.unique(keys, axis=0, return_inverse=True)
    cell_of = cell_of.ravel()
    order = np.argsort(cell_of, kind="stable")
    bounds = np.searchsorted(cell_of[order], np.arange(len(cells) + 1))
    members = [core_idx[order[bounds[c]:bounds[c + 1]]] for c in range(len(cells))]
    lookup = {tuple(k): c for c, k in enumerate(cells)}
    span = int(np.ceil(np.sqrt(3.0)))
    offsets = [o for o in np.ndindex(*(2 * span + 1,) * 3)]
    trees: dict[int, cKDTree] = {}
    ei, ej = [], []
    for c, key in enumerate(cells):
        for o in offsets:
            nb = lookup.get((key[0] + o[0] - span, key[1] + o[1] - span, key[2] + o[2] - span))
            if nb is None or nb <= c:
                continue
            small, big = (c, nb) if len(members[c]) <= len(members[nb]) else (nb, c)
            if big not in trees:
                trees[big] = cKDTree(points[members[big]])
            if _cells_linked(trees[big], points[members[small]], eps):
                ei.append(c)
                ej.append(nb)
    graph = csr_matrix((np.ones(len(ei), dtype=np.int8), (ei, ej)), shape=(len(cells), len(cells)))
    _, comp_of_cell = connected_components(graph, directed=False)
    comp = comp_of_cell[cell_of]
    return _label_components(points, core, core_idx, comp, eps, labels)


def _label_components(points, core, core_idx, comp, eps, labels):
    n = len(points)
    # number components by their lowest core index
    lowest = np.full(comp.max() + 1, n, dtype=int)
    np.minimum.at(lowest, comp, core_idx)
    rank = np.empty(len(lowest), dtype=int)
    rank[np.argsort(lowest)] = np.arange(len(lowest))
    labels[core_idx] = rank[comp]
    # border points have fewer than min_pts neighbours, so these lookups stay small
    rest = np.flatnonzero(~core)
    if len(rest):
        core_tree = cKDTree(points[core_idx])
        for i, nbrs in zip(rest, core_tree.query_ball_point(points[rest], eps)):
            if nbrs:
                labels[i] = labels[core_idx[min(nbrs)]]
    return labels


def cluster_points(points: RawPointSet, eps: float = 0.12, min_pts: int = 4) -> list[Cluster]:
    """DBSCAN clusters of a frame's point cloud; noise is discarded."""
    labels = dbscan_labels(points.points, eps, min_pts)
    out = []
    for k in range(labels.max() + 1 if len(labels) else 0):
        members = np.flatnonzero(labels == k)
        out.append(Cluster(points.frame, points.points[members].mean(axis=0), members))
    return out


def _raw_points(rec: Reconstructor, detections: Iterable[DetectionSet], workers: int,
                batch: int = 64) -> Iterator[RawPointSet]:
    """Per-frame matching, optionally fanned out to worker processes in frame order."""
    if workers <= 1:
        for ds in detections:
            yield rec.match_and_triangulate(ds)
        return
    from concurrent.futures import ProcessPoolExecutor

    it = iter(detections)
    with ProcessPoolExecutor(workers) as pool:
        while chunk := list(islice(it, batch * workers)):
            yield from pool.map(rec.match_and_triangulate, chunk, chunksize=batch)


def reconstruct_stream(detections: Iterable[DetectionSet], cameras: Sequence[CameraModel],
                       cfg: ReconstructionConfig | None = None,
                       workers: int = 1) -> Iterator[tuple[int, list[Cluster]]]:
    """Streaming reconstruction with a +-w frame look-ahead for the ghost filter.

    Output does not depend on ``workers``: every frame draws from its own seeded stream.
    """
    cfg = cfg or ReconstructionConfig()
    rec = Reconstructor(cameras, cfg)
    w = cfg.ghost_window
    window: deque[RawPointSet] = deque()
    pending: deque[int] = deque()

    def emit(t):
        ps = [p for p in window if abs(p.frame - t) <= w]
        kept = filter_ghosts(ps, t, cfg.ghost_radius) if w > 0 else next(p for p in ps if p.frame == t)
        return t, cluster_points(kept, cfg.dbscan_eps, cfg.min_pts)

    for raw in _raw_points(rec, detections, workers):
        window.append(raw)
        pending.append(raw.frame)
        while pending and pending[0] + w <= raw.frame:
            yield emit(pending.popleft())
            oldest = pending[0] - w if pending else raw.frame - w
            while window and window[0].frame < oldest:
                window.popleft()
    while pending:
        yield emit(pending.popleft())


def write_clusters(frames: Iterable[tuple[int, list[Cluster]]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame, clusters in frames:
            for k, c in enumerate(clusters):
                fh.write(json.dumps({"frame": int(frame), "cluster_id": k,
                                     "center": [float(x) for x in c.center],
                                     "n_points": c.n_points}, separators=(",", ":")) + "\n")


def read_clusters(path) -> dict[int, np.ndarray]:
    """Cluster centres per frame as ``(K, 3)`` arrays."""
    path = Path(path)
    if not path.exists():
        raise StageIOError(f"cluster file not found: {path}", path=str(path))
    out: dict[int, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.setdefault(int(rec["frame"]), []).append(rec["center"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise StageIOError(f"{path}:{lineno}: bad cluster record ({exc})", path=str(path)) from None
    return {f: np.asarray(v, dtype=float).reshape(-1, 3) for f, v in out.items()}
