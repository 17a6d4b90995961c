"""Memory storage: trajectory encoders, a learnable codebook, and the decoder.

A trajectory is cut into non-overlapping windows of ``w`` frames. Each
window becomes one ``n_k``-dimensional vector, is snapped to its nearest
memory entry, and the decoder maps the sequence of entries back to points.
The past and future segments have separate encoders; their entry indices
form the token sequence consumed by the language model.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

import numpy as np

from . import _kernels
from .container import KIND_CODEBOOK, KIND_VQ, read_checkpoint, write_checkpoint
from .data import Dataset, Trajectory, denormalize_points, normalize_points
from .nn import attention, init_attention, init_linear, linear, param, positions
from .numcore import Adam, Rng, Tensor, backward, no_grad
from .numcore import ops

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class VQConfig:
    K: int = 64
    n_k: int = 16
    w: int = 2
    beta: float = 0.25
    hidden: int = 64
    t_obs: int = 8
    t_pred: int = 12
    rotate: bool = False

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("memory needs at least 2 entries")
        if self.t_obs % self.w or self.t_pred % self.w:
            raise ValueError(f"window {self.w} must divide t_obs={self.t_obs} and t_pred={self.t_pred}")

    @property
    def o(self) -> int:
        return self.t_obs // self.w

    @property
    def p(self) -> int:
        return self.t_pred // self.w

    @property
    def m(self) -> int:
        return self.o + self.p


class MemoryArray:
    """K learnable entries of dimension n_k plus usage bookkeeping."""

    def __init__(self, entries: Tensor):
        if entries.ndim != 2 or entries.shape[0] < 2:
            raise ValueError("memory entries must be a [K >= 2, n_k] matrix")
        self.entries = entries
        self.usage_counts = np.zeros(entries.shape[0], dtype=np.int64)
        self.idle_steps = np.zeros(entries.shape[0], dtype=np.int64)

    @classmethod
    def init(cls, rng: Rng, K: int, n_k: int) -> "MemoryArray":
        return cls(param(rng.uniform(-0.1, 0.1, size=(K, n_k))))

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def n_k(self) -> int:
        return self.entries.shape[1]

    def storage_bytes(self) -> int:
        """Bytes to store the entries as float32."""
        return self.K * self.n_k * 4

    def reset_usage(self) -> None:
        self.usage_counts[:] = 0


@dataclass
class VQParams:
    config: VQConfig
    enc_past: dict[str, Tensor]
    enc_future: dict[str, Tensor]
    decoder: dict[str, Tensor]
    memory: MemoryArray

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for group in ("enc_past", "enc_future", "decoder"):
            for k, v in getattr(self, group).items():
                out[f"{group}.{k}"] = v
        out["memory"] = self.memory.entries
        return out

    def network_tensors(self) -> list[Tensor]:
        return [t for k, t in self.named_tensors().items() if k != "memory"]

    def astype(self, dtype) -> "VQParams":
        conv = lambda d: {k: v.astype(dtype) for k, v in d.items()}  # noqa: E731
        mem = MemoryArray(self.memory.entries.astype(dtype))
        return VQParams(self.config, conv(self.enc_past), conv(self.enc_future), conv(self.decoder), mem)


def _init_encoder(rng: Rng, cfg: VQConfig, windows: int) -> dict[str, Tensor]:
    w1, b1 = init_linear(rng, 2 * cfg.w, cfg.hidden)
    w2, b2 = init_linear(rng, cfg.hidden, cfg.n_k)
    p = {"W1": w1, "b1": b1, "W2": w2, "b2": b2, "pos": param(rng.normal((windows, cfg.n_k), scale=0.1))}
    p.update(init_attention(rng, cfg.n_k, "attn."))
    return p


def init_vq(cfg: VQConfig, seed: int = 0) -> VQParams:
    rng = Rng(seed)
    enc_past = _init_encoder(rng.child(1), cfg, cfg.o)
    enc_future = _init_encoder(rng.child(2), cfg, cfg.p)
    r = rng.child(3)
    dec = {"pos": param(r.normal((cfg.m, cfg.n_k), scale=0.1))}
    dec.update(init_attention(r, cfg.n_k, "attn."))
    dec["W1"], dec["b1"] = init_linear(r, cfg.n_k, cfg.hidden)
    dec["W2"], dec["b2"] = init_linear(r, cfg.hidden, 2 * cfg.w)
    return VQParams(cfg, enc_past, enc_future, dec, MemoryArray.init(rng.child(4), cfg.K, cfg.n_k))


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _encode_segment(p: dict[str, Tensor], seg: np.ndarray, w: int) -> Tensor:
    b, t, _ = seg.shape
    if t % w:
        raise ValueError(f"segment of {t} frames is not divisible by window {w}")
    m = t // w
    x = Tensor(seg.reshape(b, m, 2 * w), dtype=p["W1"].dtype)
    h = linear(ops.relu(linear(x, p["W1"], p["b1"])), p["W2"], p["b2"])
    h = ops.add(h, positions(p["pos"], b, m))
    full = np.ones((m, m), dtype=bool)
    return ops.add(h, attention(h, p, 1, full, "attn."))


def encode(params: VQParams, points: np.ndarray,
           which: Literal["past", "future", "both"] = "both") -> Tensor:
    """Continuous window encodings of normalized points, shape (B, m', n_k).

    ``points`` is (B, T, 2) or (T, 2) when ``which`` is ``both``; for
    ``past``/``future`` it may also be just that segment.
    """
    cfg = params.config
    pts = np.asarray(points)
    if pts.ndim == 2:
        pts = pts[None]
    t = pts.shape[1]
    full = t == cfg.t_obs + cfg.t_pred
    if which == "past":
        seg = pts[:, : cfg.t_obs] if full else pts
        if seg.shape[1] != cfg.t_obs:
            raise ValueError(f"past segment must have {cfg.t_obs} frames")
        return _encode_segment(params.enc_past, seg, cfg.w)
    if which == "future":
        seg = pts[:, cfg.t_obs:] if full else pts
        if seg.shape[1] != cfg.t_pred:
            raise ValueError(f"future segment must have {cfg.t_pred} frames")
        return _encode_segment(params.enc_future, seg, cfg.w)
    if which != "both":
        raise ValueError(f"unknown segment {which!r}")
    if not full:
        raise ValueError(f"expected {cfg.t_obs + cfg.t_pred} frames, got {t}")
    past = _encode_segment(params.enc_past, pts[:, : cfg.t_obs], cfg.w)
    fut = _encode_segment(params.enc_future, pts[:, cfg.t_obs:], cfg.w)
    return ops.concat([past, fut], axis=1)


def quantize(memory: MemoryArray, v_a: Tensor, indices: np.ndarray | None = None):
    """Snap each row of ``v_a`` to its nearest memory entry.

    Returns ``(v_q, indices)``; ``v_q`` is a gather of the entries (so the
    codebook receives gradients through it). Passing ``indices`` reuses a
    fixed assignment instead of searching.
    """
    lead = v_a.shape[:-1]
    if indices is None:
        flat = v_a.data.reshape(-1, v_a.shape[-1])
        indices = _kernels.nearest_entries(flat, memory.entries.data).reshape(lead)
    else:
        indices = np.asarray(indices, dtype=np.int64).reshape(lead)
    return ops.embedding(memory.entries, indices), indices


straight_through = ops.straight_through


def decode(params: VQParams, v_q: Tensor) -> Tensor:
    """Map (B, m, n_k) entry vectors to (B, T, 2) normalized points."""
    cfg = params.config
    if v_q.ndim == 2:
        v_q = ops.reshape(v_q, (1,) + v_q.shape)
    b, m, _ = v_q.shape
    if m != cfg.m:
        raise ValueError(f"decoder expects {cfg.m} entries per trajectory, got {m}")
    p = params.decoder
    z = ops.add(v_q, positions(p["pos"], b, m))
    z = ops.add(z, attention(z, p, 1, np.ones((m, m), dtype=bool), "attn."))
    out = linear(ops.relu(linear(z, p["W1"], p["b1"])), p["W2"], p["b2"])
    return ops.reshape(out, (b, m * cfg.w, 2))


@dataclass
class VQOutput:
    v_a: Tensor
    v_q: Tensor
    indices: np.ndarray
    reconstruction: Tensor
    codebook: Tensor
    commitment: Tensor
    total: Tensor
    recon_points: Tensor


@dataclass(frozen=True)
class FrozenPoint:
    """Discrete and stopped quantities captured at one parameter point.

    Inside ``vq_losses`` these replace the live values, which turns the VQ
    objective into a smooth function whose exact derivative is the
    straight-through and stop-gradient rule. At the capture point the forward values coincide.
    """

    indices: np.ndarray
    v_a: np.ndarray
    v_q: np.ndarray


def freeze(params: VQParams, points: np.ndarray) -> FrozenPoint:
    with no_grad():
        out = vq_losses(params, points)
    return FrozenPoint(out.indices, out.v_a.data.copy(), out.v_q.data.copy())


def vq_losses(params: VQParams, points: np.ndarray, indices: np.ndarray | None = None,
              frozen: FrozenPoint | None = None) -> VQOutput:
    """Reconstruction + codebook + commitment losses for normalized (B, T, 2) points.

    The codebook term only moves the memory (encodings are stopped), the
    commitment term only moves the encoders (entries are stopped), and the
    decoder gradient reaches the encoders through the straight-through copy.
    With ``frozen`` the stopped values and the assignment are constants.
    """
    pts = np.asarray(points)
    if pts.ndim == 2:
        pts = pts[None]
    v_a = encode(params, pts, "both")
    if frozen is not None:
        indices = frozen.indices
    v_q, idx = quantize(params.memory, v_a, indices)
    if frozen is None:
        sg_a, sg_q = ops.stop_gradient(v_a), ops.stop_gradient(v_q)
        st = straight_through(v_a, v_q)
    else:
        sg_a, sg_q = Tensor(frozen.v_a, dtype=v_a.dtype), Tensor(frozen.v_q, dtype=v_q.dtype)
        st = ops.add(v_a, Tensor(frozen.v_q - frozen.v_a, dtype=v_a.dtype))
    codebook = ops.mse(sg_a, v_q)
    commitment = ops.scale(ops.mse(sg_q, v_a), params.config.beta)
    recon_pts = decode(params, st)
    target = Tensor(pts, dtype=recon_pts.dtype)
    reconstruction = ops.mse(target, recon_pts)
    total = ops.add(ops.add(reconstruction, codebook), commitment)
    return VQOutput(v_a, v_q, idx, reconstruction, codebook, commitment, total, recon_pts)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class VQTrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    dead_after: int = 100  # steps an entry may go unused before reinit


@dataclass
class VQTrainResult:
    params: VQParams
    curve: list[dict] = field(default_factory=list)
    reinitialized: int = 0


def train_vq(params: VQParams, dataset: Dataset, config: VQTrainConfig,
             val: Dataset | None = None, checkpoint_path=None,
             on_epoch: Callable[[dict], None] | None = None) -> VQTrainResult:
    """Adam on the joint loss over shuffled mini-batches.

    An entry left unused for ``dead_after`` consecutive steps is moved onto
    a randomly chosen encoder output of the current batch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg = params.config
    normed = normalize_points(dataset.points, cfg.t_obs, cfg.rotate)[0]
    rng = Rng(config.seed).child(11)
    opt = Adam(list(params.named_tensors().values()), lr=config.lr)
    mem = params.memory
    mem.idle_steps[:] = 0
    result = VQTrainResult(params)
    n = len(normed)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        used = np.zeros(mem.K, dtype=bool)
        batches = 0
        for start in range(0, n, config.batch_size):
            batch = normed[order[start:start + config.batch_size]]
            out = vq_losses(params, batch)
            terms = np.array([out.total.item(), out.reconstruction.item(),
                              out.codebook.item(), out.commitment.item()])
            if not np.all(np.isfinite(terms)):
                raise TrainingDiverged(
                    f"VQ loss became non-finite at epoch {epoch}, batch {batches}: "
                    f"total={terms[0]}, recon={terms[1]}, codebook={terms[2]}, commit={terms[3]}"
                )
            backward(out.total)
            opt.step()
            sums += terms
            batches += 1

            hit = np.bincount(out.indices.reshape(-1), minlength=mem.K)
            mem.usage_counts += hit
            used |= hit > 0
            mem.idle_steps[hit > 0] = 0
            mem.idle_steps[hit == 0] += 1
            dead = np.nonzero(mem.idle_steps >= config.dead_after)[0]
            if dead.size:
                pool = out.v_a.data.reshape(-1, cfg.n_k)
                mem.entries.data[dead] = pool[rng.choice(len(pool), size=dead.size)]
                opt.reset_rows(mem.entries, dead)
                mem.idle_steps[dead] = 0
                result.reinitialized += int(dead.size)

        row = {
            "epoch": epoch,
            "total": sums[0] / batches,
            "reconstruction": sums[1] / batches,
            "codebook": sums[2] / batches,
            "commitment": sums[3] / batches,
            "utilization": float(used.mean()),
        }
        if val is not None and len(val):
            row["val_recon_ade"] = reconstruction_ade(params, val)
        result.curve.append(row)
        log.info("vq epoch %d: %s", epoch, {k: round(v, 6) for k, v in row.items() if k != "epoch"})
        if on_epoch:
            on_epoch(row)
    if checkpoint_path is not None:
        save_vq(params, checkpoint_path)
    return result


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def reconstruct(params: VQParams, normed: np.ndarray, batch_size: int = 512):
    """Decoded points and token indices for normalized (N, T, 2) arrays."""
    recon, toks = [], []
    with no_grad():
        for s in range(0, len(normed), batch_size):
            v_a = encode(params, normed[s:s + batch_size], "both")
            v_q, idx = quantize(params.memory, v_a)
            recon.append(decode(params, v_q).data.astype(np.float64))
            toks.append(idx)
    if not recon:
        cfg = params.config
        return np.zeros((0, cfg.t_obs + cfg.t_pred, 2)), np.zeros((0, cfg.m), dtype=np.int64)
    return np.concatenate(recon), np.concatenate(toks)


def reconstruction_ade(params: VQParams, dataset: Dataset) -> float:
    """Mean per-point Euclidean error of the round trip, in scene units."""
    cfg = params.config
    normed, off, ang, _ = normalize_points(dataset.points, cfg.t_obs, cfg.rotate)
    recon, _ = reconstruct(params, normed)

    back = denormalize_points(recon, off, ang)
    return float(np.linalg.norm(back - dataset.points, axis=-1).mean())


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    o: int
    p: int

    def __post_init__(self):
        if len(self.tokens) != self.o + self.p:
            raise ValueError("token count does not match o + p")

    @property
    def observed(self) -> tuple[int, ...]:
        return self.tokens[: self.o]

    @property
    def future(self) -> tuple[int, ...]:
        return self.tokens[self.o:]


def tokenize_points(params: VQParams, normed: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Index sequences (N, o + p) for normalized (N, T, 2) points."""
    return reconstruct(params, normed, batch_size)[1]


def tokenize(params: VQParams, traj: Trajectory) -> TokenSequence:
    cfg = params.config
    normed = normalize_points(traj.points[None], cfg.t_obs, cfg.rotate)[0]
    toks = tokenize_points(params, normed)[0]
    return TokenSequence(tuple(int(t) for t in toks), cfg.o, cfg.p)


def codebook_report(memory: MemoryArray, indices: np.ndarray) -> dict:
    """Usage statistics of the entries over a pass of token indices."""
    hist = np.bincount(np.asarray(indices).reshape(-1), minlength=memory.K)
    total = hist.sum()
    probs = hist[hist > 0] / total if total else np.array([1.0])
    entropy = float(-(probs * np.log(probs)).sum())
    return {
        "K": memory.K,
        "used": int((hist > 0).sum()),
        "utilization": float((hist > 0).mean()),
        "perplexity": math.exp(entropy),
        "histogram": hist,
    }


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_vq(params: VQParams, path) -> None:
    tensors = {k: v.data for k, v in params.named_tensors().items()}
    write_checkpoint(path, KIND_VQ, asdict(params.config), tensors)


def load_vq(path) -> VQParams:
    _, cfg_dict, tensors = read_checkpoint(path, KIND_VQ)
    cfg = VQConfig(**cfg_dict)
    groups: dict[str, dict[str, Tensor]] = {"enc_past": {}, "enc_future": {}, "decoder": {}}
    for name, arr in tensors.items():
        if name == "memory":
            continue
        group, key = name.split(".", 1)
        groups[group][key] = param(arr)
    return VQParams(cfg, groups["enc_past"], groups["enc_future"], groups["decoder"],
                    MemoryArray(param(tensors["memory"])))


def save_codebook(memory: MemoryArray, path) -> None:
    write_checkpoint(path, KIND_CODEBOOK, {"K": memory.K, "n_k": memory.n_k},
                     {"memory": memory.entries.data})


def load_codebook(path) -> MemoryArray:
    _, _, tensors = read_checkpoint(path, KIND_CODEBOOK)
    return MemoryArray(param(tensors["memory"]))
