"""Trajectory data: ETH-UCY text ingestion, windowing, normalization, synthetic motion corpus."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .numcore import Rng

PATTERNS = (
    "constant_velocity",
    "constant_acceleration",
    "left_turn",
    "right_turn",
    "sinusoidal_weave",
    "stop_and_go",
    "u_turn",
    "stationary_jitter",
)

SPLITS = ("train", "val", "test")

_MAGIC = b"VQTD"
_VERSION = 1


class DataFormatError(ValueError):
    """Malformed input file."""


@dataclass(frozen=True)
class Trajectory:
    agent_id: int
    points: np.ndarray  # (t_obs + t_pred, 2)
    t_obs: int
    t_pred: int
    label: str | None = None

    def __post_init__(self):
        if self.points.shape != (self.t_obs + self.t_pred, 2):
            raise ValueError(
                f"trajectory has {self.points.shape[0]} points, expected {self.t_obs + self.t_pred}"
            )

    @property
    def past(self) -> np.ndarray:
        return self.points[: self.t_obs]

    @property
    def future(self) -> np.ndarray:
        return self.points[self.t_obs:]


@dataclass
class Dataset:
    """Equal-length trajectories stored as one (N, T, 2) array of raw coordinates."""

    points: np.ndarray
    t_obs: int
    t_pred: int
    agent_ids: np.ndarray
    labels: list[str | None] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, self.t_obs + self.t_pred, 2)
        self.agent_ids = np.asarray(self.agent_ids, dtype=np.int64).reshape(-1)
        if not self.labels:
            self.labels = [None] * len(self.points)
        if len(self.agent_ids) != len(self.points) or len(self.labels) != len(self.points):
            raise ValueError("dataset fields have inconsistent lengths")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(int(self.agent_ids[i]), self.points[i], self.t_obs, self.t_pred, self.labels[i])

    def __iter__(self) -> Iterator[Trajectory]:
        return (self[i] for i in range(len(self)))

    @property
    def seq_len(self) -> int:
        return self.t_obs + self.t_pred

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.points[idx], self.t_obs, self.t_pred, self.agent_ids[idx],
                       [self.labels[i] for i in idx], split or self.split)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], split: str = "train",
                          t_obs: int = 8, t_pred: int = 12) -> "Dataset":
        if trajs:
            t_obs, t_pred = trajs[0].t_obs, trajs[0].t_pred
            if any((t.t_obs, t.t_pred) != (t_obs, t_pred) for t in trajs):
                raise ValueError("all trajectories must share t_obs and t_pred")
        pts = np.stack([t.points for t in trajs]) if trajs else np.zeros((0, t_obs + t_pred, 2))
        return cls(pts, t_obs, t_pred, [t.agent_id for t in trajs], [t.label for t in trajs], split)


# ---------------------------------------------------------------------------
# ETH-UCY text ingestion
# ---------------------------------------------------------------------------

@dataclass
class Observations:
    """Per-agent (frame, x, y) rows sorted by frame."""

    tracks: dict[int, np.ndarray]
    frame_stride: float


def load_ethucy_text(path, frame_stride: float | None = None) -> Observations:
    """Read ``frame_id agent_id x y`` rows (whitespace separated).

    ``frame_stride`` is the frame spacing that counts as contiguous; by
    default it is the smallest positive gap between distinct frame ids in
    the file, i.e. the recording's native spacing.
    """
    rows: list[tuple[float, int, float, float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 4:
                raise DataFormatError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
            try:
                frame, agent, x, y = (float(p) for p in parts)
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: non-numeric field in {line.strip()!r}") from None
            if not all(math.isfinite(v) for v in (frame, agent, x, y)):
                raise DataFormatError(f"{path}: line {lineno}: non-finite value")
            rows.append((frame, int(agent), x, y))

    if frame_stride is None:
        frames = np.unique([r[0] for r in rows])
        gaps = np.diff(frames)
        frame_stride = float(gaps[gaps > 0].min()) if gaps.size else 1.0
    by_agent: dict[int, list[tuple[float, float, float]]] = {}
    for frame, agent, x, y in rows:
        by_agent.setdefault(agent, []).append((frame, x, y))
    tracks = {}
    for agent in sorted(by_agent):
        arr = np.array(by_agent[agent], dtype=np.float64)
        tracks[agent] = arr[np.argsort(arr[:, 0], kind="stable")]
    return Observations(tracks, frame_stride)


def extract_tracks(obs: Observations, t_obs: int = 8, t_pred: int = 12,
                   stride: int = 1) -> list[Trajectory]:
    """Every sliding window of ``t_obs + t_pred`` contiguous frames, per agent."""
    if stride < 1:
        raise ValueError("stride must be positive")
    length = t_obs + t_pred
    out: list[Trajectory] = []
    tol = 1e-6 * max(obs.frame_stride, 1.0)
    for agent, rows in obs.tracks.items():
        if len(rows) < length:
            continue
        breaks = np.nonzero(np.abs(np.diff(rows[:, 0]) - obs.frame_stride) > tol)[0] + 1
        for run in np.split(rows, breaks):
            for start in range(0, len(run) - length + 1, stride):
                out.append(Trajectory(agent, run[start:start + length, 1:3].copy(), t_obs, t_pred))
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationTransform:
    offset: np.ndarray  # last observed point
    angle: float = 0.0  # heading of the final observed velocity
    translated: bool = True
    rotated: bool = False
    rotation_fallback: bool = False  # rotation requested but velocity was zero


def _rotation(angle: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def normalize_points(points: np.ndarray, t_obs: int, rotate: bool = False):
    """Batch normalization of (N, T, 2) arrays.

    Returns ``(normed, offsets, angles, fallback)``. ``normed`` has the last
    observed point at the origin and, with ``rotate``, the final observed
    velocity along +x.
    """
    points = np.asarray(points, dtype=np.float64)
    offsets = points[:, t_obs - 1].copy()
    normed = points - offsets[:, None]
    angles = np.zeros(len(points))
    fallback = np.zeros(len(points), dtype=bool)
    if rotate:
        if t_obs < 2:
            raise ValueError("rotation needs at least two observed frames")
        vel = points[:, t_obs - 1] - points[:, t_obs - 2]
        fallback = np.hypot(vel[:, 0], vel[:, 1]) == 0.0
        angles = np.where(fallback, 0.0, np.arctan2(vel[:, 1], vel[:, 0]))
        normed = normed @ _rotation(angles)  # row vector times R == R^T p
    return normed, offsets, angles, fallback


def denormalize_points(points: np.ndarray, offsets: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Inverse of ``normalize_points`` for arrays shaped (N, ..., 2)."""
    points = np.asarray(points, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    n = len(points)
    rot_t = np.swapaxes(_rotation(np.asarray(angles, dtype=np.float64)), -1, -2)
    if points.ndim == 2:  # one point per transform
        return (points[:, None, :] @ rot_t)[:, 0, :] + offsets
    rot_t = rot_t.reshape((n,) + (1,) * (points.ndim - 3) + (2, 2))
    return points @ rot_t + offsets.reshape((n,) + (1,) * (points.ndim - 2) + (2,))


def normalize(traj: Trajectory, rotate: bool = False) -> tuple[Trajectory, NormalizationTransform]:
    normed, off, ang, fb = normalize_points(traj.points[None], traj.t_obs, rotate)
    tf = NormalizationTransform(off[0], float(ang[0]), True, bool(rotate and not fb[0]), bool(fb[0]))
    return Trajectory(traj.agent_id, normed[0], traj.t_obs, traj.t_pred, traj.label), tf


def denormalize(traj: Trajectory, tf: NormalizationTransform) -> Trajectory:
    pts = denormalize_points(traj.points[None], tf.offset[None], np.array([tf.angle]))[0]
    return Trajectory(traj.agent_id, pts, traj.t_obs, traj.t_pred, traj.label)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def _ramp(t: np.ndarray, start: float, length: float) -> np.ndarray:
    return np.clip((t - start) / length, 0.0, 1.0)


def _synth_one(rng: Rng, pattern: str, length: int, sigma: float) -> np.ndarray:
    t = np.arange(1, length, dtype=np.float64)  # step index of each displacement
    heading0 = rng.uniform(0.0, 2 * math.pi)
    speed0 = rng.uniform(0.03, 0.07)
    start = rng.uniform(-2.0, 2.0, size=2)
    heading = np.full(length - 1, heading0)
    speed = np.full(length - 1, speed0)

    if pattern == "constant_velocity":
        pass
    elif pattern == "constant_acceleration":
        speed = speed0 * (1.0 + rng.uniform(-0.04, 0.06) * t)
    elif pattern in ("left_turn", "right_turn"):
        sign = 1.0 if pattern == "left_turn" else -1.0
        delta = rng.uniform(0.3, 0.6) * math.pi
        heading = heading0 + sign * delta * _ramp(t, rng.uniform(2.0, 14.0), rng.uniform(4.0, 8.0))
    elif pattern == "sinusoidal_weave":
        amp, period, phase = rng.uniform(0.3, 0.7), rng.uniform(8.0, 16.0), rng.uniform(0, 2 * math.pi)
        heading = heading0 + amp * np.sin(2 * math.pi * t / period + phase)
    elif pattern == "stop_and_go":
        stop_at = rng.integers(3, 14)
        stop_len = rng.integers(3, 7)
        speed = np.where((t >= stop_at) & (t < stop_at + stop_len), 0.0, speed0)
    elif pattern == "u_turn":
        heading = heading0 + math.pi * _ramp(t, rng.uniform(2.0, 12.0), rng.uniform(4.0, 8.0))
        speed = np.full(length - 1, 0.8 * speed0)
    elif pattern == "stationary_jitter":
        speed = np.zeros(length - 1)
    else:
        raise ValueError(f"unknown pattern {pattern!r}")

    steps = speed[:, None] * np.stack([np.cos(heading), np.sin(heading)], -1)
    pts = start + np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    if pattern == "stationary_jitter":
        pts = pts + rng.normal((length, 2), scale=0.01)
    if sigma > 0:
        pts = pts + rng.normal((length, 2), scale=sigma)
    return pts


def synth_generate(rng: Rng, n: int, pattern_mix: Mapping[str, float] | None = None,
                   sigma: float = 0.005, t_obs: int = 8, t_pred: int = 12,
                   split: str = "train") -> Dataset:
    """Draw ``n`` trajectories from a weighted mix of the eight motion patterns.

    Scene units are dimensionless; speeds lie in [0.03, 0.07] units per frame
    so a 20-frame trajectory spans roughly one unit.
    """
    if pattern_mix is None:
        pattern_mix = {p: 1.0 / len(PATTERNS) for p in PATTERNS}
    unknown = set(pattern_mix) - set(PATTERNS)
    if unknown:
        raise ValueError(f"unknown patterns: {sorted(unknown)}")
    names = list(pattern_mix)
    weights = np.array([pattern_mix[k] for k in names], dtype=np.float64)
    if (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("pattern weights must be nonnegative and sum to 1")
    length = t_obs + t_pred
    choice = rng.choice(len(names), size=n, p=weights)
    pts = np.zeros((n, length, 2))
    labels = []
    for i in range(n):
        pattern = names[int(choice[i])]
        pts[i] = _synth_one(rng, pattern, length, sigma)
        labels.append(pattern)
    return Dataset(pts, t_obs, t_pred, np.arange(n), labels, split)


def split_dataset(ds: Dataset, n_train: int, n_val: int) -> tuple[Dataset, Dataset, Dataset]:
    """Contiguous train/val/test split (synthetic trajectories are independent draws)."""
    n = len(ds)
    if n_train + n_val > n:
        raise ValueError("split sizes exceed dataset size")
    return (ds.subset(np.arange(n_train), "train"),
            ds.subset(np.arange(n_train, n_train + n_val), "val"),
            ds.subset(np.arange(n_train + n_val, n), "test"))


# ---------------------------------------------------------------------------
# binary cache
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sBBIHH")


def save_dataset(ds: Dataset, path) -> None:
    """Write the dataset cache.

    Layout (little-endian): magic ``VQTD``, version u8, split u8, count u32,
    t_obs u16, t_pred u16, agent ids i32[count], pattern codes i8[count]
    (-1 for none), then float32 points [count, T, 2].
    """
    codes = np.array([PATTERNS.index(l) if l is not None else -1 for l in ds.labels], dtype="<i1")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, SPLITS.index(ds.split), len(ds), ds.t_obs, ds.t_pred))
        fh.write(ds.agent_ids.astype("<i4").tobytes())
        fh.write(codes.tobytes())
        fh.write(ds.points.astype("<f4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, split, n, t_obs, t_pred = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DataFormatError(f"{path}: not a dataset cache")
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    length = t_obs + t_pred
    expected = off + 4 * n + n + 4 * n * length * 2
    if len(raw) != expected:
        raise DataFormatError(f"{path}: size {len(raw)} != expected {expected}")
    ids = np.frombuffer(raw, "<i4", n, off)
    off += 4 * n
    codes = np.frombuffer(raw, "<i1", n, off)
    off += n
    pts = np.frombuffer(raw, "<f4", n * length * 2, off).reshape(n, length, 2)
    labels = [PATTERNS[c] if c >= 0 else None for c in codes]
    return Dataset(pts.astype(np.float64), t_obs, t_pred, ids.astype(np.int64), labels, SPLITS[split])
