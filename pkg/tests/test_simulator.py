import numpy as np
import pytest

from aviarytrack.errors import ConfigError
from aviarytrack.geometry import project
from aviarytrack.simulator import (VOLUME, NoiseModel, SceneConfig, bounce_scene, export_wild, generate_scene,
                                   read_detections, read_ground_truth, render_detections, render_frame,
                                   scene_from_paths, write_detections, write_ground_truth)
from aviarytrack.wild import length_bucket


@pytest.fixture(scope="module")
def long_scene():
    return generate_scene(SceneConfig(duration=900.0, rng_seed=3))


def test_deterministic():
    a = generate_scene(SceneConfig(duration=20.0, rng_seed=5))
    b = generate_scene(SceneConfig(duration=20.0, rng_seed=5))
    assert a.centroid.tobytes() == b.centroid.tobytes()
    assert a.head.tobytes() == b.head.tobytes()
    assert a.sequences == b.sequences


def test_zero_duration():
    sc = generate_scene(SceneConfig(duration=0.0, n_birds=4))
    assert sc.motion_sequences() == []
    assert sorted(s.bird_id for s in sc.sequences) == [0, 1, 2, 3]
    assert all(s.kind == "stationary" for s in sc.sequences)


def test_config_validation():
    with pytest.raises(ConfigError):
        generate_scene(SceneConfig(perch_graph=[]))
    with pytest.raises(ConfigError):
        generate_scene(SceneConfig(perch_graph=[((0, 0, 0), (7, 0, 0))]))
    with pytest.raises(ConfigError):
        NoiseModel(miss_rate=1.5).validate()


def test_median_motion_length(long_scene):
    lengths = [s.n_frames for s in long_scene.motion_sequences()]
    assert len(lengths) >= 200
    assert 50 <= np.median(lengths) <= 76


def test_long_sequences_exist(long_scene):
    lengths = np.array([s.n_frames for s in long_scene.motion_sequences()])
    assert (lengths > 300).sum() >= 1


def test_inside_volume_and_speed(long_scene):
    c = long_scene.centroid
    assert np.all(c >= 0) and np.all(c <= np.array(VOLUME))
    speed = np.linalg.norm(np.diff(c, axis=0), axis=2) * long_scene.fps
    assert speed.max() <= 10.0


def test_sequences_tile_each_bird(long_scene):
    for b in range(long_scene.n_birds):
        seqs = sorted(long_scene.bird_sequences(b), key=lambda s: s.start)
        assert seqs[0].start == 0 and seqs[-1].end == long_scene.n_frames - 1
        for s, t in zip(seqs, seqs[1:]):
            assert t.start == s.end + 1
            assert s.kind != t.kind
            # continuity across the junction
            assert np.linalg.norm(long_scene.centroid[t.start, b] - long_scene.centroid[s.end, b]) < 0.5


def test_flights_start_and_end_at_rest(long_scene):
    c = long_scene.centroid
    for s in long_scene.motion_sequences():
        if s.start == 0 or s.end >= long_scene.n_frames - 1:
            continue
        b = s.bird_id
        # the landing frame after a motion sequence repeats the last flight position
        assert np.linalg.norm(c[s.end + 1, b] - c[s.end, b]) < 0.05


def test_miss_rate_one_is_empty(rig):
    sc = generate_scene(SceneConfig(duration=0.2, n_birds=3))
    for ds in render_detections(sc, rig, NoiseModel(miss_rate=1.0)):
        assert all(len(m) == 0 for m in ds.masks.values())


def test_single_bird_mask_centroid(rig):
    # on the optical axis with the body across the line of sight, so the
    # silhouette is symmetric about the projected centre
    X = rig[0].center + 3.0 * rig[0].rotation[2]
    sc = scene_from_paths(np.array([[X], [X + 0.01 * rig[0].rotation[0]]]))
    ds = render_frame(sc, 0, rig, NoiseModel())
    p = project(rig[0], X)
    assert len(ds.masks[0]) == 1
    assert np.linalg.norm(ds.masks[0][0].centroid - [p.u, p.v]) < 0.5


def test_merge_occlusion(rig):
    cam = rig[0]
    axis = cam.rotation[2]
    near = cam.center + 3.0 * axis
    far = cam.center + 3.05 * axis
    sc = scene_from_paths(np.array([[near, far]]))
    merged = render_frame(sc, 0, [cam], NoiseModel(merge_occlusions=True))
    apart = render_frame(sc, 0, [cam], NoiseModel(merge_occlusions=False))
    assert len(merged.masks[cam.id]) == 1
    assert len(apart.masks[cam.id]) == 2
    union = set(map(tuple, apart.masks[cam.id][0].pixels())) | set(map(tuple, apart.masks[cam.id][1].pixels()))
    assert set(map(tuple, merged.masks[cam.id][0].pixels())) == union


def test_blackout_drops_everything(rig):
    sc = generate_scene(SceneConfig(duration=0.5, n_birds=3))
    noise = NoiseModel(false_positive_rate=1.0, blackouts=[(5, 7)])
    for ds in render_detections(sc, rig, noise, frames=range(4, 9)):
        n = sum(len(m) for m in ds.masks.values())
        assert (n == 0) == (5 <= ds.frame <= 7)


def test_render_deterministic(rig):
    sc = generate_scene(SceneConfig(duration=0.3, n_birds=4, rng_seed=1))
    noise = NoiseModel(miss_rate=0.2, false_positive_rate=0.5, centroid_jitter=1.0)
    a = [[m.to_rle() for c in sorted(d.masks) for m in d.masks[c]] for d in render_detections(sc, rig, noise, 9)]
    b = [[m.to_rle() for c in sorted(d.masks) for m in d.masks[c]] for d in render_detections(sc, rig, noise, 9)]
    assert a == b


def test_export_wild_examples():
    # three flights separated by rests; the frame reaching the rest spot is the landing
    n = 400
    x = np.zeros(n)
    for a, m in ((10, 21), (60, 101), (200, 151)):
        x[a:a + m] = np.linspace(0, 1, m + 1)[1:] + x[a - 1]
        x[a + m:] = x[a + m - 1]
    paths = np.stack([x + 0.5, np.full(n, 1.2), np.full(n, 1.5)], axis=1)[:, None]
    sc = scene_from_paths(paths)
    man = export_wild(sc)
    assert [e.n_frames for e in man] == [20, 100, 150]
    assert [e.bucket for e in man] == ["<=100", "<=100", "100-300"]
    for e in man:
        e.validate()
        assert np.allclose(e.start_point(), sc.centroid[e.frame_start, 0])
        assert np.allclose(e.end_point(), sc.centroid[e.frame_end, 0])


def test_bucket_boundaries():
    assert length_bucket(100) == "<=100"
    assert length_bucket(101) == "100-300"
    assert length_bucket(300) == "100-300"
    assert length_bucket(301) == ">300"


def test_start_is_preceding_stationary_end(long_scene):
    man = export_wild(long_scene)
    ends = {(s.bird_id, s.end) for s in long_scene.sequences if s.kind == "stationary"}
    assert man and all((e.target_id, e.frame_start) in ends for e in man)


def test_bounce_scene_layout():
    sc, (b0, b1) = bounce_scene()
    man = export_wild(sc)
    assert sorted(e.bucket for e in man) == ["<=100", ">300"]
    # before and after the blackout the birds are far apart
    for f in (b0 - 1, b1 + 1):
        assert np.linalg.norm(sc.centroid[f, 0] - sc.centroid[f, 1]) > 0.6


def test_file_round_trips(tmp_path, rig):
    sc = generate_scene(SceneConfig(duration=0.3, n_birds=3))
    write_ground_truth(sc, tmp_path / "gt.csv")
    c, h = read_ground_truth(tmp_path / "gt.csv")
    assert np.allclose(c, sc.centroid, atol=1e-6) and np.allclose(h, sc.head, atol=1e-6)
    dets = list(render_detections(sc, rig, NoiseModel()))
    write_detections(dets, tmp_path / "d.jsonl.gz")
    back = list(read_detections(tmp_path / "d.jsonl.gz", rig))
    assert len(back) == len(dets)
    for a, b in zip(dets, back):
        for cam in a.masks:
            assert [m.to_rle() for m in a.masks[cam]] == [m.to_rle() for m in b.masks[cam]]
