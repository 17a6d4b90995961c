import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqtraj.container import ContainerError, read_tokens, write_tokens
from vqtraj.data import (
    PATTERNS,
    DataFormatError,
    Dataset,
    Observations,
    Trajectory,
    denormalize,
    denormalize_points,
    extract_tracks,
    load_dataset,
    load_ethucy_text,
    normalize,
    normalize_points,
    save_dataset,
    split_dataset,
    synth_generate,
)
from vqtraj.numcore import Rng


def write_rows(path, rows):
    path.write_text("".join(f"{f} {a} {x} {y}\n" for f, a, x, y in rows))
    return path


# --- text ingestion -----------------------------------------------------------

def test_malformed_row_names_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("0 1 x y\n")
    with pytest.raises(DataFormatError, match="line 1"):
        load_ethucy_text(p)


def test_malformed_later_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("0 1 0.0 0.0\n10 1 1.0\n")
    with pytest.raises(DataFormatError, match="line 2"):
        load_ethucy_text(p)


def test_empty_file(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("")
    assert load_ethucy_text(p).tracks == {}
    assert extract_tracks(load_ethucy_text(p)) == []


def test_agents_grouped_and_sorted(tmp_path):
    rows = [(20, 2, 5.0, 5.0), (10, 1, 1.0, 0.0), (0, 1, 0.0, 0.0), (10, 2, 4.0, 5.0)]
    obs = load_ethucy_text(write_rows(tmp_path / "a.txt", rows))
    assert sorted(obs.tracks) == [1, 2]
    assert np.array_equal(obs.tracks[1][:, 0], [0, 10])
    assert obs.frame_stride == 10


def test_sliding_windows_count(tmp_path):
    # one agent, 25 contiguous frames at the ETH-style spacing of 10
    rows = [(10 * i, 7, float(i), 0.0) for i in range(25)]
    obs = load_ethucy_text(write_rows(tmp_path / "a.txt", rows))
    trajs = extract_tracks(obs, 8, 12, stride=1)
    assert len(trajs) == 6
    assert all(t.agent_id == 7 and t.points.shape == (20, 2) for t in trajs)
    assert np.array_equal(trajs[2].points[:, 0], np.arange(2, 22))
    assert len(extract_tracks(obs, 8, 12, stride=5)) == 2


def test_short_agent_contributes_nothing(tmp_path):
    rows = [(i, 1, float(i), 0.0) for i in range(19)]
    assert extract_tracks(load_ethucy_text(write_rows(tmp_path / "a.txt", rows))) == []


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=60), min_size=1, max_size=4),
       st.integers(min_value=0, max_value=2**31 - 1))
def test_windows_never_cross_gaps(run_lengths, seed):
    rng = np.random.default_rng(seed)
    frames, frame = [], 0
    for n in run_lengths:
        frames.extend(range(frame, frame + n))
        frame += n + int(rng.integers(1, 5))  # a gap of at least one missing frame
    frames = np.array(frames)
    obs_tracks = {3: np.column_stack([frames, frames * 1.0, np.zeros(len(frames))])}
    trajs = extract_tracks(Observations(obs_tracks, 1.0), 8, 12)
    expected = sum(max(0, n - 19) for n in run_lengths)
    assert len(trajs) == expected
    for t in trajs:
        # x equals the frame id here, so a crossing shows up as a jump > 1
        assert np.all(np.diff(t.points[:, 0]) == 1.0)


# --- normalization ------------------------------------------------------------

def test_translation_puts_last_observed_at_origin():
    pts = np.random.default_rng(0).normal(size=(3, 20, 2))
    normed, off, ang, fb = normalize_points(pts, 8)
    assert np.allclose(normed[:, 7], 0.0)
    assert np.array_equal(off, pts[:, 7])
    assert not fb.any() and np.all(ang == 0)


def test_rotation_aligns_velocity_with_x():
    t = np.arange(20.0)
    traj = Trajectory(0, np.column_stack([np.zeros(20), t]), 8, 12)
    normed, tf = normalize(traj, rotate=True)
    assert np.allclose(normed.points[:, 1], 0.0, atol=1e-12)
    assert np.allclose(normed.points[:, 0], t - 7, atol=1e-12)
    assert tf.rotated and not tf.rotation_fallback


def test_rotation_falls_back_on_zero_velocity():
    pts = np.ones((20, 2))
    normed, tf = normalize(Trajectory(0, pts, 8, 12), rotate=True)
    assert tf.rotation_fallback and not tf.rotated
    assert np.allclose(normed.points, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1), st.booleans())
def test_normalize_round_trip(seed, rotate):
    pts = np.random.default_rng(seed).normal(scale=50.0, size=(20, 2))
    traj = Trajectory(1, pts, 8, 12)
    normed, tf = normalize(traj, rotate)
    back = denormalize(normed, tf)
    assert np.max(np.abs(back.points - pts)) < 1e-9


def test_denormalize_sample_tensor_shapes():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(4, 20, 2))
    normed, off, ang, _ = normalize_points(pts, 8, rotate=True)
    assert np.max(np.abs(denormalize_points(normed, off, ang) - pts)) < 1e-9
    samples = np.repeat(normed[:, None], 3, axis=1)
    back = denormalize_points(samples, off, ang)
    assert back.shape == (4, 3, 20, 2)
    assert np.max(np.abs(back - pts[:, None])) < 1e-9
    assert np.max(np.abs(denormalize_points(normed[:, 7], off, ang) - pts[:, 7])) < 1e-9


# --- synthetic corpus ---------------------------------------------------------

def test_constant_velocity_noise_free_has_equal_steps():
    ds = synth_generate(Rng(3), 25, {"constant_velocity": 1.0}, sigma=0.0)
    steps = np.diff(ds.points, axis=1)
    assert np.allclose(steps, steps[:, :1], atol=1e-12)
    assert set(ds.labels) == {"constant_velocity"}


def test_empty_and_lengths():
    assert len(synth_generate(Rng(0), 0)) == 0
    ds = synth_generate(Rng(0), 80)
    assert ds.points.shape == (80, 20, 2)
    assert all(len(t.points) == 20 for t in ds)
    assert set(ds.labels) <= set(PATTERNS)


def test_regeneration_bitwise_identical():
    a = synth_generate(Rng(11).child(0), 4000)
    b = synth_generate(Rng(11).child(0), 4000)
    assert a.points.tobytes() == b.points.tobytes() and a.labels == b.labels
    assert set(a.labels) == set(PATTERNS)


def test_pattern_mix_validation():
    with pytest.raises(ValueError):
        synth_generate(Rng(0), 10, {"constant_velocity": 0.5})
    with pytest.raises(ValueError):
        synth_generate(Rng(0), 10, {"teleport": 1.0})


def test_split_sizes():
    tr, va, te = split_dataset(synth_generate(Rng(0), 100), 60, 20)
    assert (len(tr), len(va), len(te)) == (60, 20, 20)
    assert (tr.split, va.split, te.split) == ("train", "val", "test")
    with pytest.raises(ValueError):
        split_dataset(synth_generate(Rng(0), 10), 8, 5)


# --- binary containers -------------------------------------------------------------

def test_dataset_cache_round_trip(tmp_path):
    ds = synth_generate(Rng(5), 30, split="val")
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back.split == "val" and back.labels == ds.labels
    assert np.array_equal(back.agent_ids, ds.agent_ids)
    # stored as 32-bit floats
    assert np.array_equal(back.points, ds.points.astype(np.float32).astype(np.float64))
    assert (tmp_path / "d.bin").read_bytes()[:4] == b"VQTD"


def test_dataset_cache_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope" * 10)
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path / "x.bin")


def test_token_file_round_trip(tmp_path):
    toks = np.random.default_rng(0).integers(0, 300, size=(7, 10))
    write_tokens(tmp_path / "t.bin", toks, K=300, o=4)
    back, K, o, p = read_tokens(tmp_path / "t.bin")
    assert (K, o, p) == (300, 4, 6)
    assert np.array_equal(back, toks)


def test_token_file_errors(tmp_path):
    with pytest.raises(ValueError):
        write_tokens(tmp_path / "t.bin", np.zeros((2, 4), dtype=int), K=8, o=4)
    (tmp_path / "b.bin").write_bytes(b"VQTK")
    with pytest.raises(ContainerError):
        read_tokens(tmp_path / "b.bin")


def test_dataset_field_consistency():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 20, 2)), 8, 12, [0])
    with pytest.raises(ValueError):
        Trajectory(0, np.zeros((19, 2)), 8, 12)
