"""Transformer over memory indices with a prefix (semi-causal) attention mask.

Observed tokens see each other in both directions; future tokens see the
whole observed prefix and earlier future tokens. Training is teacher forced
with the loss restricted to future targets. Sampling reuses per-layer key
and value caches: observed positions never attend to future keys, so the
prefix is computed once and each future step only adds one row.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .container import KIND_LM, read_checkpoint, write_checkpoint
from .nn import attention, init_attention, init_linear, linear, param, positions
from .numcore import Adam, Rng, Tensor, backward, no_grad
from .numcore import ops
from .vqmem import TokenSequence, TrainingDiverged

log = logging.getLogger(__name__)

MaskVariant = Literal["semi", "causal"]


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SemiCausalMask:
    o: int
    p: int
    allowed: np.ndarray  # [s, s], query row i may attend key column j

    @property
    def s(self) -> int:
        return self.o + self.p


def build_mask(o: int, p: int) -> SemiCausalMask:
    if o < 1:
        raise ValueError("the observed prefix must contain at least one token")
    if p < 0:
        raise ValueError("p must be nonnegative")
    s = o + p
    i = np.arange(s)[:, None]
    j = np.arange(s)[None, :]
    allowed = (j < o) | (i >= j)
    return SemiCausalMask(o, p, allowed)


def build_causal_mask(s: int) -> np.ndarray:
    return np.tril(np.ones((s, s), dtype=bool))


def mask_for(variant: MaskVariant, o: int, p: int) -> np.ndarray:
    if variant == "semi":
        return build_mask(o, p).allowed
    if variant == "causal":
        return build_causal_mask(o + p)
    raise ValueError(f"unknown mask variant {variant!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class LMConfig:
    K: int = 64
    o: int = 4
    p: int = 6
    d_model: int = 64
    heads: int = 4
    layers: int = 3
    ff: int = 128

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by the head count")
        if self.o < 1 or self.p < 1:
            raise ValueError("need o >= 1 and p >= 1")

    @property
    def s_max(self) -> int:
        return self.o + self.p


@dataclass
class LMParams:
    config: LMConfig
    tensors: dict[str, Tensor]

    def astype(self, dtype) -> "LMParams":
        return LMParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.tensors[k].data[...] = v


def init_lm(cfg: LMConfig, seed: int = 0) -> LMParams:
    rng = Rng(seed).child(21)
    d = cfg.d_model
    t = {
        "tok_emb": param(rng.normal((cfg.K, d), scale=0.1)),
        "pos_emb": param(rng.normal((cfg.s_max, d), scale=0.1)),
    }
    for l in range(cfg.layers):
        pre = f"blocks.{l}."
        t[pre + "ln1.g"], t[pre + "ln1.b"] = param(np.ones(d)), param(np.zeros(d))
        t.update(init_attention(rng, d, pre + "attn."))
        t[pre + "attn.Wo"] = param(t[pre + "attn.Wo"].data / math.sqrt(2 * cfg.layers))
        t[pre + "ln2.g"], t[pre + "ln2.b"] = param(np.ones(d)), param(np.zeros(d))
        t[pre + "ff.W1"], t[pre + "ff.b1"] = init_linear(rng, d, cfg.ff)
        t[pre + "ff.W2"], t[pre + "ff.b2"] = init_linear(rng, cfg.ff, d, scale=1 / math.sqrt(2 * cfg.layers))
    t["lnf.g"], t["lnf.b"] = param(np.ones(d)), param(np.zeros(d))
    t["out.W"], t["out.b"] = init_linear(rng, d, cfg.K, scale=0.5)
    return LMParams(cfg, t)


# ---------------------------------------------------------------------------
# forward / loss
# ---------------------------------------------------------------------------

def forward_logits(params: LMParams, tokens, allowed: np.ndarray) -> Tensor:
    """Logits (B, T, K) for integer tokens (B, T) under an attention mask [T, T]."""
    cfg, p = params.config, params.tensors
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim == 1:
        toks = toks[None]
    b, t = toks.shape
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != (t, t):
        raise ValueError(f"mask shape {allowed.shape} does not match {t} tokens")
    if t > cfg.s_max:
        raise ValueError(f"sequence of {t} exceeds the positional table ({cfg.s_max})")
    x = ops.add(ops.embedding(p["tok_emb"], toks), positions(p["pos_emb"], b, t))
    for l in range(cfg.layers):
        pre = f"blocks.{l}."
        h = ops.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        x = ops.add(x, attention(h, p, cfg.heads, allowed, pre + "attn."))
        h = ops.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = linear(ops.relu(linear(h, p[pre + "ff.W1"], p[pre + "ff.b1"])), p[pre + "ff.W2"], p[pre + "ff.b2"])
        x = ops.add(x, h)
    x = ops.layernorm(x, p["lnf.g"], p["lnf.b"])
    return linear(x, p["out.W"], p["out.b"])


def _as_batch(seq, o: int | None) -> tuple[np.ndarray, int]:
    if isinstance(seq, TokenSequence):
        return np.asarray(seq.tokens, dtype=np.int64)[None], seq.o
    arr = np.asarray(seq, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None]
    if o is None:
        raise ValueError("o is required for raw token arrays")
    return arr, o


def teacher_forced_logits(params: LMParams, tokens: np.ndarray, o: int,
                          variant: MaskVariant = "semi") -> Tensor:
    """Logits for inputs tokens[:, :-1]; row j predicts token j + 1."""
    p = tokens.shape[1] - o
    if p < 1:
        raise ValueError("need at least one future token")
    return forward_logits(params, tokens[:, :-1], mask_for(variant, o, p - 1))


def lm_loss(params: LMParams, seq, o: int | None = None, variant: MaskVariant = "semi") -> Tensor:
    """Mean negative log-likelihood of the future tokens, teacher forced."""
    toks, o = _as_batch(seq, o)
    b, s = toks.shape
    p = s - o
    if p < 1:
        raise ValueError("lm_loss needs p >= 1")
    logits = teacher_forced_logits(params, toks, o, variant)
    k = logits.shape[-1]
    weights = np.zeros((b, s - 1))
    weights[:, o - 1:] = 1.0
    return ops.cross_entropy(ops.reshape(logits, (b * (s - 1), k)), toks[:, 1:].reshape(-1),
                             weights.reshape(-1))


def future_log_probs(params: LMParams, seq, o: int | None = None,
                     variant: MaskVariant = "semi") -> np.ndarray:
    """Per-sequence log p(future | observed), shape (B,)."""
    toks, o = _as_batch(seq, o)
    with no_grad():
        logits = teacher_forced_logits(params, toks, o, variant).data.astype(np.float64)
    logp = ops.log_softmax(logits)[:, o - 1:]
    targets = toks[:, o:]
    return np.take_along_axis(logp, targets[..., None], -1)[..., 0].sum(axis=1)


def sequence_log_prob(params: LMParams, seq, o: int | None = None,
                      variant: MaskVariant = "semi") -> float:
    return float(future_log_probs(params, seq, o, variant)[0])


def stepwise_conditionals(params: LMParams, seq, o: int | None = None,
                          variant: MaskVariant = "semi") -> np.ndarray:
    """log p(s_i | s_<i) for each future token, one truncated forward pass per step."""
    toks, o = _as_batch(seq, o)
    toks = toks[0]
    p = len(toks) - o
    out = np.zeros(p)
    with no_grad():
        for k in range(p):
            logits = forward_logits(params, toks[: o + k], mask_for(variant, o, k)).data
            out[k] = ops.log_softmax(logits[0, -1].astype(np.float64))[toks[o + k]]
    return out


# ---------------------------------------------------------------------------
# cached incremental decoding
# ---------------------------------------------------------------------------

def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + x.dtype.type(eps)) * g + b


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


class IncrementalDecoder:
    """Plain-array forward pass with per-layer key/value caches."""

    def __init__(self, params: LMParams):
        self.cfg = params.config
        self.a = {k: v.data for k, v in params.tensors.items()}
        self.dk = self.cfg.d_model // self.cfg.heads

    def _heads(self, y: np.ndarray) -> np.ndarray:  # (B, t, d) -> (B, H, t, dk)
        b, t, _ = y.shape
        return y.reshape(b, t, self.cfg.heads, self.dk).transpose(0, 2, 1, 3)

    def _block(self, x, l, allowed, cache):
        a, pre = self.a, f"blocks.{l}."
        h = _layernorm(x, a[pre + "ln1.g"], a[pre + "ln1.b"])
        q = self._heads(h @ a[pre + "attn.Wq"])
        k = self._heads(h @ a[pre + "attn.Wk"])
        v = self._heads(h @ a[pre + "attn.Wv"])
        if cache is not None:
            k = np.concatenate([cache[l][0], k], axis=2)
            v = np.concatenate([cache[l][1], v], axis=2)
        scores = (q @ k.transpose(0, 1, 3, 2)) / x.dtype.type(math.sqrt(self.dk))
        if allowed is not None:
            scores = np.where(allowed, scores, -np.inf)
        ctx = _softmax(scores) @ v
        b, _, t, _ = ctx.shape
        x = x + ctx.transpose(0, 2, 1, 3).reshape(b, t, -1) @ a[pre + "attn.Wo"]
        h = _layernorm(x, a[pre + "ln2.g"], a[pre + "ln2.b"])
        h = np.maximum(h @ a[pre + "ff.W1"] + a[pre + "ff.b1"], 0) @ a[pre + "ff.W2"] + a[pre + "ff.b2"]
        return x + h, (k, v)

    def _logits(self, x_last: np.ndarray) -> np.ndarray:
        a = self.a
        return _layernorm(x_last, a["lnf.g"], a["lnf.b"]) @ a["out.W"] + a["out.b"]

    def prefix(self, s_obs, variant: MaskVariant = "semi"):
        """Encode the observed tokens; returns (logits for the next token (1, K), cache)."""
        toks = np.asarray(s_obs, dtype=np.int64)
        o = len(toks)
        a = self.a
        x = (a["tok_emb"][toks] + a["pos_emb"][:o])[None]
        allowed = mask_for(variant, o, 0)
        cache = []
        for l in range(self.cfg.layers):
            x, kv = self._block(x, l, allowed, None)
            cache.append(kv)
        return self._logits(x[:, -1]), cache

    def step(self, tokens: np.ndarray, pos: int, cache):
        """Feed one token per batch row at position ``pos``; returns (logits (B, K), cache)."""
        a = self.a
        x = (a["tok_emb"][tokens] + a["pos_emb"][pos])[:, None, :]
        new = []
        for l in range(self.cfg.layers):
            x, kv = self._block(x, l, None, cache)
            new.append(kv)
        return self._logits(x[:, -1]), new


@dataclass
class SampleConfig:
    K_samples: int = 20
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.K_samples < 1:
            raise ValueError("K_samples must be at least 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def _probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    return _softmax(logits.astype(np.float64) / temperature)


def sample_future(params: LMParams, s_obs, cfg: SampleConfig, variant: MaskVariant = "semi",
                  rng: Rng | None = None, decoder: IncrementalDecoder | None = None) -> np.ndarray:
    """``K_samples`` ancestral samples of the p future tokens, shape (K_samples, p)."""
    dec = decoder or IncrementalDecoder(params)
    rng = rng or Rng(cfg.seed)
    o, p = len(s_obs), params.config.p
    logits, cache = dec.prefix(s_obs, variant)
    n = cfg.K_samples
    cache = [(np.repeat(k, n, 0), np.repeat(v, n, 0)) for k, v in cache]
    logits = np.repeat(logits, n, 0)
    out = np.zeros((n, p), dtype=np.int64)
    for i in range(p):
        out[:, i] = rng.categorical(_probs(logits, cfg.temperature))
        if i + 1 < p:
            logits, cache = dec.step(out[:, i], o + i, cache)
    return out


def greedy_decode(params: LMParams, s_obs, variant: MaskVariant = "semi"):
    """Argmax continuation and the logits seen at each step, (p,) and (p, K)."""
    dec = IncrementalDecoder(params)
    o, p = len(s_obs), params.config.p
    logits, cache = dec.prefix(s_obs, variant)
    toks, steps = np.zeros(p, dtype=np.int64), []
    for i in range(p):
        steps.append(logits[0].copy())
        toks[i] = int(np.argmax(logits[0]))
        if i + 1 < p:
            logits, cache = dec.step(toks[i:i + 1], o + i, cache)
    return toks, np.stack(steps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class LMTrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    variant: MaskVariant = "semi"
    eval_every: int = 25
    patience: int = 20
    min_delta: float = 1e-4
    stop_at_convergence: bool = True
    max_iters: int | None = None


@dataclass
class ConvergenceRecord:
    iterations_to_convergence: int
    converged: bool
    iterations: int
    train_curve: list[tuple[int, float]] = field(default_factory=list)
    val_curve: list[tuple[int, float]] = field(default_factory=list)
    best_val: float = math.inf


@dataclass
class LMTrainResult:
    params: LMParams
    record: ConvergenceRecord


def evaluate_loss(params: LMParams, tokens: np.ndarray, o: int, variant: MaskVariant,
                  batch_size: int = 512) -> float:
    total, n = 0.0, 0
    with no_grad():
        for s in range(0, len(tokens), batch_size):
            chunk = tokens[s:s + batch_size]
            total += lm_loss(params, chunk, o, variant).item() * len(chunk)
            n += len(chunk)
    return total / n


def train_lm(params: LMParams, tokens: np.ndarray, config: LMTrainConfig,
             val_tokens: np.ndarray | None = None) -> LMTrainResult:
    """Adam on the future-token likelihood.

    Every ``eval_every`` iterations the validation loss is measured. The run
    has converged once ``patience`` consecutive evaluations fail to beat the
    best loss by ``min_delta``; the recorded iteration count is that of the
    last improving evaluation. The best-scoring parameters are restored.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) == 0:
        raise ValueError("cannot train on an empty token set")
    cfg = params.config
    o = cfg.o
    val = tokens if val_tokens is None or len(val_tokens) == 0 else np.asarray(val_tokens, dtype=np.int64)
    rng = Rng(config.seed).child(31)
    opt = Adam(list(params.tensors.values()), lr=config.lr)
    per_epoch = math.ceil(len(tokens) / config.batch_size)
    max_iters = config.max_iters or config.epochs * per_epoch
    rec = ConvergenceRecord(max_iters, False, 0)
    best_snap = params.snapshot()
    stale = 0
    it = 0
    running = []
    while it < max_iters:
        order = rng.permutation(len(tokens))
        for start in range(0, len(tokens), config.batch_size):
            loss = lm_loss(params, tokens[order[start:start + config.batch_size]], o, config.variant)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"LM loss became non-finite at iteration {it}")
            backward(loss)
            opt.step()
            it += 1
            running.append(value)
            if it % config.eval_every == 0:
                v = evaluate_loss(params, val, o, config.variant)
                rec.train_curve.append((it, float(np.mean(running))))
                rec.val_curve.append((it, v))
                running = []
                if v < rec.best_val - config.min_delta:
                    rec.best_val = v
                    rec.iterations_to_convergence = it
                    best_snap = params.snapshot()
                    stale = 0
                else:
                    stale += 1
                    if stale >= config.patience and not rec.converged:
                        rec.converged = True
                        log.info("lm (%s) converged at iteration %d", config.variant,
                                 rec.iterations_to_convergence)
                        if config.stop_at_convergence:
                            break
            if it >= max_iters:
                break
        if rec.converged and config.stop_at_convergence:
            break
    rec.iterations = it
    if rec.val_curve:
        params.restore(best_snap)
    return LMTrainResult(params, rec)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_lm(params: LMParams, path, extra: dict | None = None) -> None:
    cfg = asdict(params.config)
    if extra:
        cfg["extra"] = extra
    write_checkpoint(path, KIND_LM, cfg, {k: v.data for k, v in params.tensors.items()})


def load_lm(path) -> tuple[LMParams, dict]:
    _, cfg, tensors = read_checkpoint(path, KIND_LM)
    extra = cfg.pop("extra", {})
    return LMParams(LMConfig(**cfg), {k: param(v) for k, v in tensors.items()}), extra


def clone(params: LMParams) -> LMParams:
    return copy.deepcopy(params)
