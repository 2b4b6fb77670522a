import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from evdnet.dataset import (
    Clip,
    IngestError,
    SceneSpec,
    Shape,
    WindowSampler,
    assign_haze_params,
    check_disjoint,
    fill_depth_holes,
    generate_toy_scene,
    ingest_rgbd,
    load_dataset,
    make_toy_clip,
    make_toy_dataset,
    read_depth,
    read_manifest,
    render_toy_scene,
    sample_window,
    save_clips,
    synthesize_dataset,
    synthesize_video,
    window_indices,
    write_depth,
    write_manifest,
    write_rgb,
)
from evdnet.haze import HazeParams, synthesize_haze, transmission_from_depth
from evdnet.tensor import ContractError


def _write_video(root, n=3, size=8, skip_depth=None):
    rng = np.random.default_rng(0)
    for t in range(n):
        write_rgb(root / "rgb" / f"{t:04d}.png", rng.uniform(size=(3, size, size)))
        if t != skip_depth:
            write_depth(root / "depth" / f"{t:04d}.png", np.full((1, size, size), 1.5))
    return root


def test_ingest_well_formed(tmp_path):
    rec = ingest_rgbd(_write_video(tmp_path / "vid"), A=0.8, beta=1.0)
    assert len(rec) == 3 and rec.id == "vid"
    assert [p.stem for p in rec.rgb_paths] == ["0000", "0001", "0002"]


def test_ingest_missing_depth_names_frame(tmp_path):
    with pytest.raises(IngestError, match="0002"):
        ingest_rgbd(_write_video(tmp_path / "vid", skip_depth=2))


def test_ingest_missing_directory(tmp_path):
    with pytest.raises(IngestError, match="depth"):
        (tmp_path / "v" / "rgb").mkdir(parents=True)
        ingest_rgbd(tmp_path / "v")


def test_unreadable_frame(tmp_path):
    root = _write_video(tmp_path / "vid")
    (root / "rgb" / "0001.png").write_bytes(b"not a png")
    rec = ingest_rgbd(root, A=0.8, beta=1.0)
    with pytest.raises(IngestError, match="0001.png"):
        synthesize_video(rec)


def test_depth_unit_conversion(tmp_path):
    Image.fromarray(np.full((4, 4), 5000, dtype=np.uint16)).save(tmp_path / "d.png")
    np.testing.assert_array_equal(read_depth(tmp_path / "d.png", 5000.0), 1.0)


def test_depth_hole_fill():
    d = np.array([[[1.0, 0.0, 0.0, 4.0]]])
    d[0, 0, 2] = np.nan
    np.testing.assert_array_equal(fill_depth_holes(d)[0, 0], [1.0, 1.0, 4.0, 4.0])
    with pytest.raises(IngestError):
        fill_depth_holes(np.zeros((1, 2, 2)))


def test_manifest_round_trip(tmp_path):
    entries = [{"id": "a", "A": 0.8, "beta": 1.25, "split": "train"},
               {"id": "b", "A": (0.7, 0.8, 0.9), "beta": 0.5, "split": "test"}]
    write_manifest(tmp_path / "m.txt", entries)
    assert read_manifest(tmp_path / "m.txt") == entries
    (tmp_path / "bad.txt").write_text("id=a beta=1\n")
    with pytest.raises(IngestError, match="bad.txt:1"):
        read_manifest(tmp_path / "bad.txt")


def test_synthesize_beta_zero_is_clean():
    clip = make_toy_clip(SceneSpec(16, 16, 1, seed=3), 4, HazeParams(0.8, 0.0))
    np.testing.assert_array_equal(clip.hazy, clip.clean)
    q = synthesize_video(clip, quantize=True)
    assert np.max(np.abs(q - clip.clean)) <= 0.5 / 255 + 1e-12


def test_synthesize_constant_depth_uniform_t():
    clean = np.random.default_rng(1).uniform(size=(2, 3, 6, 6))
    clip = Clip("c", clean, np.full((2, 1, 6, 6), 1.3), HazeParams(0.9, 0.7))
    hazy = synthesize_video(clip)
    t = (hazy - 0.9) / (clean - 0.9)
    np.testing.assert_allclose(t, np.exp(-0.7 * 1.3), rtol=1e-9)


def test_synthesize_matches_frame_oracle():
    clip = make_toy_clip(SceneSpec(16, 16, 2, seed=5), 3, HazeParams(0.7, 1.1))
    for f in range(3):
        t = transmission_from_depth(clip.depth[f:f + 1], 1.1)
        np.testing.assert_array_equal(clip.hazy[f:f + 1], synthesize_haze(clip.clean[f:f + 1], t, 0.7))


def test_window_boundaries():
    assert window_indices(10, 4, 1) == (4,)
    assert window_indices(10, 0, 5) == (0, 0, 0, 1, 2)
    assert window_indices(10, 9, 5) == (7, 8, 9, 9, 9)
    assert window_indices(10, 5, 5) == (3, 4, 5, 6, 7)
    with pytest.raises(ContractError):
        window_indices(10, 3, 4)
    frames = np.arange(6.0).reshape(6, 1, 1, 1)
    w = sample_window(frames, 1, 3, target=frames)
    assert w.indices == (0, 1, 2) and w.target.item() == 1.0 and w.size == 3


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 30), W=st.sampled_from([1, 3, 5, 7, 9]), data=st.data())
def test_window_never_leaves_sequence(n, W, data):
    c = data.draw(st.integers(0, n - 1))
    idx = window_indices(n, c, W)
    assert len(idx) == W and idx[W // 2] == c
    assert all(0 <= i < n for i in idx)
    assert list(idx) == sorted(idx)


def test_sampler_deterministic_and_shaped():
    clips = make_toy_dataset(2, 0, 6, 24, seed=1)
    a, b = WindowSampler(clips, 3, 4, 16, seed=9), WindowSampler(clips, 3, 4, 16, seed=9)
    for _ in range(3):
        (fa, ta), (fb, tb) = a.next(), b.next()
        assert len(fa) == 3 and fa[0].shape == (4, 3, 16, 16) and ta.shape == (4, 3, 16, 16)
        assert all(np.array_equal(x, y) for x, y in zip(fa, fb)) and np.array_equal(ta, tb)


def test_toy_scene_zero_shapes_static():
    clean, depth = generate_toy_scene(SceneSpec(20, 20, 0, seed=2), 4)
    assert all(np.array_equal(clean[0], clean[t]) for t in range(4))
    assert np.all(np.diff(depth[0, 0, :, 0]) < 0)  # far at the top, near at the bottom


def test_toy_scene_deterministic():
    a = render_toy_scene(SceneSpec(24, 24, 3, seed=8), 5)
    b = render_toy_scene(SceneSpec(24, 24, 3, seed=8), 5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_toy_shape_centroid_tracks_velocity():
    shape = Shape("rect", (20.0, 10.0), (3.0, 3.0), (0.0, 1.0), (1.0, 0.0, 0.0), 0.5)
    _, depth, classes = render_toy_scene(SceneSpec(40, 40, shapes=(shape,)), 6)
    xs = [np.nonzero(classes[t] == 0)[1].mean() for t in range(6)]
    np.testing.assert_allclose(np.diff(xs), 1.0, atol=1e-12)
    assert np.all(depth[:, 0][classes == 0] == 0.5)


def test_toy_speed_contract():
    with pytest.raises(ContractError):
        SceneSpec(max_speed=3.0)
    with pytest.raises(ContractError):
        SceneSpec(shapes=(Shape("disk", (5.0, 5.0), (2.0, 2.0), (2.0, 2.0), (1, 1, 1), 0.5),))


def test_assign_haze_params():
    assert assign_haze_params(3) == assign_haze_params(3)
    p = assign_haze_params(1, (0.7, 0.7), (1.2, 1.2))
    assert p.A == 0.7 and p.beta == 1.2
    samples = [assign_haze_params([5, i]) for i in range(1000)]
    assert 0.6 <= min(s.A for s in samples) and max(s.A for s in samples) <= 1.0
    assert 0.4 <= min(s.beta for s in samples) and max(s.beta for s in samples) <= 1.6
    with pytest.raises(ContractError):
        assign_haze_params(0, (0.9, 0.6))


def test_toy_dataset_split_disjoint():
    clips = make_toy_dataset(3, 2, 4, 16, seed=0)
    assert [c.split for c in clips].count("test") == 2
    check_disjoint(clips)
    clips[3].id = clips[0].id
    with pytest.raises(ContractError, match="both"):
        check_disjoint(clips)


def test_save_load_and_synthesize_dataset(tmp_path):
    clips = make_toy_dataset(1, 1, 3, 16, seed=4)
    save_clips(tmp_path / "ds", clips, write_hazy=False)
    loaded = load_dataset(tmp_path / "ds")
    assert [c.id for c in loaded] == [c.id for c in clips]
    np.testing.assert_allclose(loaded[0].clean, clips[0].clean, atol=0.5 / 255 + 1e-12)
    assert np.array_equal(loaded[0].classes, clips[0].classes)
    before = sorted(p.name for p in (tmp_path / "ds").rglob("*"))
    synthesize_dataset(tmp_path / "ds", out=tmp_path / "out")
    assert sorted(p.name for p in (tmp_path / "ds").rglob("*")) == before
    hazy = sorted((tmp_path / "out" / clips[0].id / "hazy").glob("*.png"))
    assert len(hazy) == 3 and (tmp_path / "out" / "manifest.txt").is_file()
