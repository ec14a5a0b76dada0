import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aviarytrack.errors import StageIOError
from aviarytrack.reconstruction import (Cluster, RawPointSet, ReconstructionConfig, cluster_points,
                                        dbscan_labels, filter_ghosts, match_and_triangulate,
                                        read_clusters, reconstruct_stream, subsample_mask,
                                        write_clusters)
from aviarytrack.simulator import (BODY_SEMI_AXES, VOLUME, DetectionSet, Mask, NoiseModel, render_detections,
                                   render_frame, scene_from_paths)


def reference_dbscan(points, eps, min_pts):
    """Textbook DBSCAN with quadratic range queries and the lowest-core border rule."""
    n = len(points)
    d = np.linalg.norm(points[:, None] - points[None], axis=2)
    nbrs = [np.flatnonzero(d[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in nbrs], dtype=bool)
    labels = np.full(n, -1)
    k = 0
    for i in range(n):
        if not core[i] or labels[i] >= 0:
            continue
        stack = [i]
        labels[i] = k
        while stack:
            p = stack.pop()
            for q in nbrs[p]:
                if core[q] and labels[q] < 0:
                    labels[q] = k
                    stack.append(q)
        k += 1
    for i in range(n):
        if not core[i]:
            cores = [q for q in nbrs[i] if core[q]]
            if cores:
                labels[i] = labels[min(cores)]
    return labels


def same_partition(a, b):
    if not np.array_equal(a < 0, b < 0):
        return False
    pairs = {(x, y) for x, y in zip(a, b) if x >= 0}
    return len(pairs) == len({x for x, _ in pairs}) == len({y for _, y in pairs})


def test_subsample_small_mask_returns_all():
    m = Mask(0, 5, 7, np.ones((10, 10), dtype=bool))
    px = subsample_mask(m, 200)
    assert len(px) == 100
    assert set(map(tuple, px)) == set(map(tuple, m.pixels()))


def test_subsample_large_mask():
    m = Mask(0, 0, 0, np.ones((100, 100), dtype=bool))
    px = subsample_mask(m, 500, np.random.default_rng(3))
    assert len(px) == 500 and len(set(map(tuple, px))) == 500
    assert np.all((px >= 0) & (px < 100))
    again = subsample_mask(m, 500, np.random.default_rng(3))
    assert np.array_equal(px, again)
    with pytest.raises(ValueError):
        subsample_mask(m, 0)


def _ps(frame, pts):
    return RawPointSet(frame, np.asarray(pts, dtype=float))


def test_ghost_filter_static_and_single_frame():
    static = [0.0, 0.0, 1.0]
    window = [_ps(f, [static]) for f in range(5)]
    window[2] = _ps(2, [static, [3.0, 3.0, 1.0]])
    kept = filter_ghosts(window, 2, 0.1)
    assert np.allclose(kept.points, [static])


def test_ghost_filter_moving_point():
    window = [_ps(f, [[0.05 * f, 0.0, 1.0]]) for f in range(3)]
    assert len(filter_ghosts(window, 1, 0.1)) == 1
    # too fast for the radius
    window = [_ps(f, [[0.2 * f, 0.0, 1.0]]) for f in range(3)]
    assert len(filter_ghosts(window, 1, 0.1)) == 0


def test_ghost_filter_needs_target_frame():
    with pytest.raises(ValueError):
        filter_ghosts([_ps(0, [[0, 0, 0]])], 3, 0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.5))
def test_ghost_filter_keeps_slow_trajectories(seed, radius):
    # a continuous path moving less than radius per frame always survives
    rng = np.random.default_rng(seed)
    steps = rng.normal(size=(5, 3))
    steps *= (0.99 * radius * rng.uniform(0, 1, 5) / np.linalg.norm(steps, axis=1))[:, None]
    path = np.cumsum(steps, axis=0)
    window = [_ps(f, [path[f]]) for f in range(5)]
    assert len(filter_ghosts(window, 2, radius)) == 1


def test_two_separated_groups():
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.normal(0, 0.03, (50, 3)), rng.normal(0, 0.03, (50, 3)) + [1.0, 0, 0]])
    cl = cluster_points(_ps(0, pts), eps=0.1, min_pts=5)
    assert len(cl) == 2
    for c in cl:
        m = pts[c.members]
        assert c.n_points >= 5
        assert np.allclose(c.center, m.mean(axis=0))
        assert np.all(c.center >= m.min(axis=0)) and np.all(c.center <= m.max(axis=0))


def test_isolated_points_are_noise():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    assert cluster_points(_ps(0, pts), eps=0.1, min_pts=5) == []
    assert cluster_points(_ps(0, np.zeros((0, 3)))) == []


def test_dbscan_rejects_bad_parameters():
    with pytest.raises(ValueError):
        dbscan_labels(np.zeros((3, 3)), 0.0, 2)
    with pytest.raises(ValueError):
        dbscan_labels(np.zeros((3, 3)), 0.1, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_dbscan_matches_reference(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 120))
    k = int(rng.integers(1, 5))
    pts = rng.uniform(0, 1, (k, 3))[rng.integers(0, k, n)] + rng.normal(0, 0.05, (n, 3))
    eps = float(rng.uniform(0.03, 0.15))
    min_pts = int(rng.integers(1, 8))
    got = dbscan_labels(pts, eps, min_pts)
    assert np.array_equal(got, reference_dbscan(pts, eps, min_pts))


def test_dbscan_duplicates_and_dense_blob():
    rng = np.random.default_rng(7)
    pts = np.round(rng.uniform(0, 0.5, (150, 3)), 1)
    assert np.array_equal(dbscan_labels(pts, 0.1 + 1e-7, 3), reference_dbscan(pts, 0.1 + 1e-7, 3))
    blob = rng.normal(0, 0.02, (200_000, 3))
    labels = dbscan_labels(blob, 0.12, 4)
    assert labels.max() == 0 and (labels == 0).mean() > 0.999


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_dbscan_order_independent(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 0.6, (60, 3))
    perm = rng.permutation(60)
    a = dbscan_labels(pts, 0.1, 4)[perm]
    b = dbscan_labels(pts[perm], 0.1, 4)
    # noise and the partition of core points do not depend on input order
    deg = (np.linalg.norm(pts[perm][:, None] - pts[perm][None], axis=2) <= 0.1).sum(axis=1)
    core = deg >= 4
    assert np.array_equal(a < 0, b < 0)
    assert same_partition(a[core], b[core])


def test_single_bird_points_near_centroid(rig):
    X = np.array([3.0, 1.2, 1.3])
    sc = scene_from_paths(X[None, None])
    ds = render_frame(sc, 0, rig, NoiseModel())
    assert sum(len(m) > 0 for m in ds.masks.values()) >= 4
    ps = match_and_triangulate(ds, rig, mask_cap=50)
    assert len(ps) > 100
    # points fill the visual hull of a 20 cm body; their mean sits on the centroid
    assert np.linalg.norm(ps.points - X, axis=1).max() < 2 * BODY_SEMI_AXES[0]
    cl = cluster_points(ps)
    assert len(cl) == 1 and np.linalg.norm(cl[0].center - X) < 0.06
    assert len(ps.cameras) == len(ps) and np.all(ps.cameras[:, 0] != ps.cameras[:, 1])


def test_points_reproject_into_their_views(rig):
    X = np.array([2.0, 1.5, 1.0])
    ds = render_frame(scene_from_paths(X[None, None]), 0, rig, NoiseModel())
    cfg = ReconstructionConfig()
    ps = match_and_triangulate(ds, rig, cfg.eps_px, cfg.trifocal_tol)
    cams = {c.id: c for c in rig}
    for k in range(2):
        for cid in np.unique(ps.cameras[:, k]):
            sel = ps.cameras[:, k] == cid
            uv, _ = cams[cid].project_points(ps.points[sel])
            assert np.linalg.norm(uv - ps.pixels[sel, k], axis=1).max() < cfg.eps_px + 1


def test_single_camera_gives_nothing(rig):
    X = np.array([3.0, 1.2, 1.3])
    ds = render_frame(scene_from_paths(X[None, None]), 0, rig, NoiseModel())
    one = DetectionSet(0, {0: ds.masks[0]})
    assert len(match_and_triangulate(one, rig)) == 0
    assert len(match_and_triangulate(DetectionSet(0, {}), rig)) == 0


def test_two_far_birds_have_no_cross_matches(rig):
    A = np.array([1.5, 0.8, 1.0])
    B = np.array([4.5, 1.8, 1.6])
    ds = render_frame(scene_from_paths(np.array([[A, B]])), 0, rig, NoiseModel())
    ps = match_and_triangulate(ds, rig)
    # every surviving point lies on one of the two birds
    d = np.minimum(np.linalg.norm(ps.points - A, axis=1), np.linalg.norm(ps.points - B, axis=1))
    assert len(ps) > 0 and d.max() < 2 * BODY_SEMI_AXES[0]


def test_noiseless_single_bird_one_cluster_per_frame(rig):
    n = 120
    t = np.arange(n) / 40.0
    path = np.stack([2.0 + 2.0 * np.sin(0.5 * t), 1.2 + 0.5 * np.cos(0.7 * t), 1.2 + 0.3 * np.sin(t)], axis=1)
    sc = scene_from_paths(path[:, None])
    dets = render_detections(sc, rig, NoiseModel())
    cfg = ReconstructionConfig(mask_cap=8, bounds=VOLUME)
    frames = list(reconstruct_stream(dets, rig, cfg))
    assert [f for f, _ in frames] == list(range(n))
    one = [len(c) == 1 and np.linalg.norm(c[0].center - path[f]) < 0.06 for f, c in frames]
    assert np.mean(one) >= 0.99


def test_stream_matches_per_frame(rig):
    sc = scene_from_paths(np.array([[[2.0, 1.0, 1.0]], [[2.05, 1.0, 1.0]], [[2.1, 1.0, 1.0]]]))
    dets = list(render_detections(sc, rig, NoiseModel()))
    cfg = ReconstructionConfig(mask_cap=20)
    a = list(reconstruct_stream(dets, rig, cfg))
    b = list(reconstruct_stream(dets, rig, cfg, workers=2))
    assert [f for f, _ in a] == [0, 1, 2]
    for (_, ca), (_, cb) in zip(a, b):
        assert [c.center.tolist() for c in ca] == [c.center.tolist() for c in cb]


def test_cluster_file_round_trip(tmp_path):
    frames = [(0, [Cluster(0, np.array([1.0, 2.0, 3.0]), np.arange(5))]),
              (1, []),
              (2, [Cluster(2, np.array([0.5, 0.5, 0.5]), np.arange(4)),
                   Cluster(2, np.array([4.0, 1.0, 1.0]), np.arange(9))])]
    path = tmp_path / "clusters.jsonl"
    write_clusters(frames, path)
    back = read_clusters(path)
    assert sorted(back) == [0, 2]
    assert np.allclose(back[2], [[0.5, 0.5, 0.5], [4.0, 1.0, 1.0]])
    with pytest.raises(StageIOError, match="missing.jsonl"):
        read_clusters(tmp_path / "missing.jsonl")
    path.write_text("{not json\n")
    with pytest.raises(StageIOError, match=":1:"):
        read_clusters(path)
