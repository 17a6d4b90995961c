"""Flat ``key = value`` run configuration.

Lines starting with ``#`` (and anything after an unquoted ``#``) are
comments. Unknown keys are rejected. Values are parsed according to the
field types of :class:`RunConfig`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .evaluate import PipelineConfig, PredictConfig
from .seqlm import LMConfig, LMTrainConfig
from .vqmem import VQConfig, VQTrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # data
    t_obs: int = 8
    t_pred: int = 12
    n_synth: int = 4000
    n_train: int = 3200
    n_val: int = 400
    sigma: float = 0.005
    rotate: bool = False
    # memory
    w: int = 2
    K: int = 64
    n_k: int = 16
    beta: float = 0.25
    hidden: int = 64
    vq_epochs: int = 50
    vq_batch: int = 64
    vq_lr: float = 2e-3
    dead_after: int = 100
    # language model
    d_model: int = 64
    heads: int = 4
    layers: int = 3
    ff: int = 128
    lm_epochs: int = 100
    lm_batch: int = 64
    lm_lr: float = 1e-3
    eval_every: int = 25
    patience: int = 20
    min_delta: float = 1e-4
    mask: str = "semi"
    # prediction
    K_samples: int = 20
    temperature: float = 1.0
    # harnesses
    thetas: str = "16,32,64,128,256"
    bench_trials: int = 200
    plot_count: int = 8

    def __post_init__(self):
        errors = []
        if self.w < 1 or self.t_obs % self.w or self.t_pred % self.w:
            errors.append(f"w={self.w} must divide t_obs={self.t_obs} and t_pred={self.t_pred}")
        if self.t_obs < 2 or self.t_pred < 1:
            errors.append("need t_obs >= 2 and t_pred >= 1")
        if self.heads < 1 or self.d_model % self.heads:
            errors.append(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.K < 2 or self.K > 65536:
            errors.append("K must lie in [2, 65536]")
        if self.mask not in ("semi", "causal"):
            errors.append("mask must be 'semi' or 'causal'")
        if self.n_train + self.n_val > self.n_synth:
            errors.append("n_train + n_val exceeds n_synth")
        if self.K_samples < 1 or not self.temperature > 0:
            errors.append("need K_samples >= 1 and temperature > 0")
        if self.sigma < 0:
            errors.append("sigma must be nonnegative")
        try:
            self.theta_list()
        except ValueError:
            errors.append(f"thetas must be a comma-separated list of integers >= 2, got {self.thetas!r}")
        if errors:
            raise ConfigError("; ".join(errors))

    def theta_list(self) -> list[int]:
        vals = [int(v) for v in self.thetas.split(",") if v.strip()]
        if not vals or min(vals) < 2:
            raise ValueError("bad theta list")
        return vals

    # -- conversion to component configs ---------------------------------

    def pipeline(self) -> PipelineConfig:
        vq = VQConfig(K=self.K, n_k=self.n_k, w=self.w, beta=self.beta, hidden=self.hidden,
                      t_obs=self.t_obs, t_pred=self.t_pred, rotate=self.rotate)
        return PipelineConfig(
            vq=vq,
            vq_train=VQTrainConfig(self.vq_epochs, self.vq_batch, self.vq_lr, self.seed, self.dead_after),
            lm=LMConfig(K=self.K, o=vq.o, p=vq.p, d_model=self.d_model, heads=self.heads,
                        layers=self.layers, ff=self.ff),
            lm_train=LMTrainConfig(epochs=self.lm_epochs, batch_size=self.lm_batch, lr=self.lm_lr,
                                   seed=self.seed, variant=self.mask, eval_every=self.eval_every,
                                   patience=self.patience, min_delta=self.min_delta),
            predict=PredictConfig(self.K_samples, self.temperature, self.seed, self.mask),
            seed=self.seed,
        )

    # -- text form ----------------------------------------------------------

    def serialize(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        return replace(self, **_coerce_all(pairs))


_TYPES = {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str):
    typ = _TYPES[key]
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw


def _coerce_all(pairs: dict[str, str]) -> dict:
    unknown = sorted(set(pairs) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _coerce(k, v) for k, v in pairs.items()}


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        pairs[key] = value
    return pairs


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    return RunConfig(**_coerce_all(parse_pairs(text, source)))


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))
