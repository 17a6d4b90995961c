"""Displacement metrics, baselines, end-to-end prediction and ablation harnesses."""
from __future__ import annotations

import csv
import io
import logging
import platform
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, Trajectory, denormalize_points, normalize_points
from .numcore import Rng, no_grad
from .numcore import ops
from .seqlm import (
    IncrementalDecoder,
    LMConfig,
    LMParams,
    LMTrainConfig,
    MaskVariant,
    SampleConfig,
    init_lm,
    sample_future,
    train_lm,
)
from .vqmem import (
    VQConfig,
    VQParams,
    VQTrainConfig,
    codebook_report,
    decode,
    encode,
    init_vq,
    quantize,
    reconstruction_ade,
    tokenize_points,
    train_vq,
)

log = logging.getLogger(__name__)

# reported anchors from the original full-scale experiments
PAPER_THETA_ANCHOR = {"theta": 768, "dataset": "VTPTL", "ade": 8.54, "fde": 15.08}
PAPER_MASK_ANCHOR = {
    "dataset": "ETH",
    "semi": {"ic": 398, "ade": 0.18, "fde": 0.23},
    "causal": {"ic": 463, "ade": 0.18, "fde": 0.22},
}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.shape[-2] == 0:
        raise ValueError("empty trajectories")
    return pred, gt


def ade(pred, gt) -> float:
    """Mean Euclidean displacement over the predicted frames."""
    pred, gt = _check_pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred, gt) -> float:
    """Euclidean displacement at the last predicted frame."""
    pred, gt = _check_pair(pred, gt)
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def best_of_k(samples, gt) -> tuple[float, float]:
    """Minimum ADE and minimum FDE over samples (K, t, 2), minimized independently."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or len(samples) == 0:
        raise ValueError("need a nonempty (K, t, 2) sample set")
    gt = np.asarray(gt, dtype=np.float64)
    if samples.shape[1:] != gt.shape:
        raise ValueError(f"sample shape {samples.shape[1:]} != ground truth shape {gt.shape}")
    dist = np.linalg.norm(samples - gt[None], axis=-1)
    return float(dist.mean(axis=1).min()), float(dist[:, -1].min())


def constant_velocity_baseline(traj: Trajectory) -> np.ndarray:
    """Extrapolate the last observed velocity over the prediction horizon."""
    if traj.t_obs < 2:
        raise ValueError("constant velocity needs at least two observed frames")
    past = traj.past
    vel = past[-1] - past[-2]
    steps = np.arange(1, traj.t_pred + 1)[:, None]
    return past[-1] + steps * vel


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

@dataclass
class PredictionSet:
    predictions: np.ndarray  # (N, K, t_pred, 2), original coordinates
    ground_truth: np.ndarray  # (N, t_pred, 2)
    agent_ids: np.ndarray
    labels: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.predictions)


@dataclass
class PredictConfig:
    K_samples: int = 20
    temperature: float = 1.0
    seed: int = 0
    variant: MaskVariant = "semi"


class Predictor:
    """Trained models bundled for repeated single-trajectory prediction."""

    def __init__(self, vq: VQParams, lm: LMParams, cfg: PredictConfig):
        if vq.config.K != lm.config.K or vq.config.o != lm.config.o or vq.config.p != lm.config.p:
            raise ValueError("memory and language model disagree on K, o or p")
        self.vq, self.lm, self.cfg = vq, lm, cfg
        self.decoder = IncrementalDecoder(lm)

    def __call__(self, traj: Trajectory, seed: int | None = None,
                 future_tokens: np.ndarray | None = None) -> np.ndarray:
        """Predicted futures (K, t_pred, 2) in the trajectory's own coordinates.

        ``future_tokens`` (K, p) bypasses sampling, e.g. to decode the
        ground-truth tokens.
        """
        vq, cfg = self.vq, self.vq.config
        normed, off, ang, _ = normalize_points(traj.points[None, : traj.t_obs + traj.t_pred], cfg.t_obs, cfg.rotate)
        with no_grad():
            v_a = encode(vq, normed[:, : cfg.t_obs], "past")
            _, s_obs = quantize(vq.memory, v_a)
            s_obs = s_obs[0]
            if future_tokens is None:
                sc = SampleConfig(self.cfg.K_samples, self.cfg.temperature,
                                  self.cfg.seed if seed is None else seed)
                future_tokens = sample_future(self.lm, s_obs, sc, self.cfg.variant, decoder=self.decoder)
            future_tokens = np.asarray(future_tokens, dtype=np.int64).reshape(-1, cfg.p)
            k = len(future_tokens)
            seqs = np.concatenate([np.broadcast_to(s_obs, (k, cfg.o)), future_tokens], axis=1)
            entries = ops.embedding(vq.memory.entries, seqs)
            pts = decode(vq, entries).data.astype(np.float64)[:, cfg.t_obs:]
        return denormalize_points(pts[None], off, ang)[0]


def predict(vq: VQParams, lm: LMParams, traj: Trajectory, cfg: PredictConfig,
            future_tokens: np.ndarray | None = None) -> PredictionSet:
    preds = Predictor(vq, lm, cfg)(traj, future_tokens=future_tokens)
    return PredictionSet(preds[None], traj.future[None].copy(), np.array([traj.agent_id]), [traj.label])


def predict_dataset(vq: VQParams, lm: LMParams, ds: Dataset, cfg: PredictConfig) -> PredictionSet:
    """Predictions for every trajectory; trajectory i samples with seed stream i."""
    pred = Predictor(vq, lm, cfg)
    base = Rng(cfg.seed)
    out = np.zeros((len(ds), cfg.K_samples, ds.t_pred, 2))
    for i, traj in enumerate(ds):
        out[i] = pred(traj, seed=base.child(i).seed)
    return PredictionSet(out, ds.points[:, ds.t_obs:].copy(), ds.agent_ids.copy(), list(ds.labels))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    ade: np.ndarray
    fde: np.ndarray
    K: int
    config: dict = field(default_factory=dict)
    baseline_ade: np.ndarray | None = None
    baseline_fde: np.ndarray | None = None
    agent_ids: np.ndarray | None = None
    labels: list | None = None

    @property
    def mean_ade(self) -> float:
        return float(np.mean(self.ade))

    @property
    def mean_fde(self) -> float:
        return float(np.mean(self.fde))


def evaluate_predictions(ps: PredictionSet, config: dict | None = None,
                         with_baseline: Dataset | None = None) -> MetricsReport:
    n = len(ps)
    ades, fdes = np.zeros(n), np.zeros(n)
    for i in range(n):
        ades[i], fdes[i] = best_of_k(ps.predictions[i], ps.ground_truth[i])
    rep = MetricsReport(ades, fdes, int(ps.predictions.shape[1]), dict(config or {}),
                        agent_ids=ps.agent_ids, labels=ps.labels)
    if with_baseline is not None:
        cv_a, cv_f = np.zeros(n), np.zeros(n)
        for i, traj in enumerate(with_baseline):
            cv = constant_velocity_baseline(traj)
            cv_a[i], cv_f[i] = ade(cv, traj.future), fde(cv, traj.future)
        rep.baseline_ade, rep.baseline_fde = cv_a, cv_f
    return rep


def baseline_ade(ds: Dataset) -> tuple[float, float]:
    """Corpus-mean constant-velocity ADE and FDE."""
    a = [ade(constant_velocity_baseline(t), t.future) for t in ds]
    f = [fde(constant_velocity_baseline(t), t.future) for t in ds]
    return float(np.mean(a)), float(np.mean(f))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def metrics_csv(rep: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    has_cv = rep.baseline_ade is not None
    w.writerow(["index", "agent_id", "label", f"min_ade_{rep.K}", f"min_fde_{rep.K}"]
               + (["cv_ade", "cv_fde"] if has_cv else []))
    for i in range(len(rep.ade)):
        row = [i, int(rep.agent_ids[i]) if rep.agent_ids is not None else i,
               (rep.labels[i] if rep.labels else None) or "", _fmt(rep.ade[i]), _fmt(rep.fde[i])]
        if has_cv:
            row += [_fmt(rep.baseline_ade[i]), _fmt(rep.baseline_fde[i])]
        w.writerow(row)
    summary = ["mean", "", "", _fmt(rep.mean_ade), _fmt(rep.mean_fde)]
    if has_cv:
        summary += [_fmt(rep.baseline_ade.mean()), _fmt(rep.baseline_fde.mean())]
    w.writerow(summary)
    return buf.getvalue()


def metrics_text(rep: MetricsReport) -> str:
    lines = [
        f"trajectories: {len(rep.ade)}",
        f"best-of-{rep.K} ADE: {_fmt(rep.mean_ade)}",
        f"best-of-{rep.K} FDE: {_fmt(rep.mean_fde)}",
    ]
    if rep.baseline_ade is not None:
        lines += [f"constant-velocity ADE: {_fmt(rep.baseline_ade.mean())}",
                  f"constant-velocity FDE: {_fmt(rep.baseline_fde.mean())}"]
    if rep.labels and any(rep.labels):
        lines.append("per pattern (ADE / FDE):")
        labels = np.array([l or "" for l in rep.labels])
        for name in sorted(set(labels)):
            sel = labels == name
            lines.append(f"  {name or '-'}: {_fmt(rep.ade[sel].mean())} / {_fmt(rep.fde[sel].mean())}")
    for k in sorted(rep.config):
        lines.append(f"config.{k}: {rep.config[k]}")
    return "\n".join(lines) + "\n"


def table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------

@dataclass
class LatencyReport:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    n_trials: int
    model: dict
    hardware: str
    sampling_ms_by_k: dict = field(default_factory=dict)


def latency_bench(vq: VQParams, lm: LMParams, trajs: Sequence[Trajectory], n_trials: int = 200,
                  warmup: int = 20, k_sweep: Sequence[int] = (10, 20)) -> LatencyReport:
    """Wall time of one single-sample prediction, compute path only."""
    pred = Predictor(vq, lm, PredictConfig(K_samples=1))
    trajs = list(trajs)
    for i in range(warmup):
        pred(trajs[i % len(trajs)], seed=i)
    times = np.zeros(n_trials)
    for i in range(n_trials):
        traj = trajs[i % len(trajs)]
        t0 = time.perf_counter()
        pred(traj, seed=i)
        times[i] = (time.perf_counter() - t0) * 1e3
    by_k = {}
    for k in k_sweep:
        pk = Predictor(vq, lm, PredictConfig(K_samples=k))
        pk(trajs[0], seed=0)
        reps = max(5, n_trials // 10)
        t0 = time.perf_counter()
        for i in range(reps):
            pk(trajs[i % len(trajs)], seed=i)
        by_k[int(k)] = (time.perf_counter() - t0) * 1e3 / reps
    model = {"K": vq.config.K, "n_k": vq.config.n_k, "d_model": lm.config.d_model,
             "heads": lm.config.heads, "layers": lm.config.layers}
    from . import BACKEND

    hw = f"{platform.machine()} {platform.processor() or 'cpu'}, python {platform.python_version()}, kernels={BACKEND}"
    return LatencyReport(float(times.mean()), float(np.percentile(times, 50)),
                         float(np.percentile(times, 95)), n_trials, model, hw, by_k)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    vq: VQConfig = field(default_factory=VQConfig)
    vq_train: VQTrainConfig = field(default_factory=VQTrainConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    lm_train: LMTrainConfig = field(default_factory=LMTrainConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    seed: int = 0


def tokens_for(vq: VQParams, ds: Dataset) -> np.ndarray:
    normed = normalize_points(ds.points, vq.config.t_obs, vq.config.rotate)[0]
    return tokenize_points(vq, normed)


def lm_config_for(vq: VQParams, base: LMConfig) -> LMConfig:
    return replace(base, K=vq.config.K, o=vq.config.o, p=vq.config.p)


def sweep_theta(train: Dataset, val: Dataset, test: Dataset, thetas: Sequence[int],
                cfg: PipelineConfig) -> list[dict]:
    """Train memory + language model per memory size; one table row per size."""
    if not thetas:
        raise ValueError("need at least one memory size")
    rows = []
    for theta in thetas:
        t0 = time.perf_counter()
        vq = init_vq(replace(cfg.vq, K=int(theta)), seed=cfg.seed)
        train_vq(vq, train, cfg.vq_train)
        test_tokens = tokens_for(vq, test)
        report = codebook_report(vq.memory, tokens_for(vq, train))
        lm = init_lm(lm_config_for(vq, cfg.lm), seed=cfg.seed)
        res = train_lm(lm, tokens_for(vq, train), cfg.lm_train, tokens_for(vq, val))
        rep = evaluate_predictions(predict_dataset(vq, res.params, test, cfg.predict))
        rows.append({
            "theta": int(theta),
            "storage_bytes": vq.memory.storage_bytes(),
            "recon_ade": reconstruction_ade(vq, test),
            "pred_ade": rep.mean_ade,
            "pred_fde": rep.mean_fde,
            "utilization": report["utilization"],
            "perplexity": report["perplexity"],
            "test_token_utilization": codebook_report(vq.memory, test_tokens)["utilization"],
            "lm_iters_to_convergence": res.record.iterations_to_convergence,
            "seconds": time.perf_counter() - t0,
        })
        log.info("sweep theta=%d: %s", theta, rows[-1])
    return rows


def compare_masks(vq: VQParams, train: Dataset, val: Dataset, test: Dataset,
                  cfg: PipelineConfig) -> list[dict]:
    """Semi-causal versus causal language model on identical data and seeds."""
    train_tok, val_tok = tokens_for(vq, train), tokens_for(vq, val)
    rows = []
    for variant in ("semi", "causal"):
        t0 = time.perf_counter()
        lm = init_lm(lm_config_for(vq, cfg.lm), seed=cfg.seed)
        res = train_lm(lm, train_tok, replace(cfg.lm_train, variant=variant), val_tok)
        rep = evaluate_predictions(predict_dataset(vq, res.params, test, replace(cfg.predict, variant=variant)))
        rows.append({
            "variant": variant,
            "iters_to_convergence": res.record.iterations_to_convergence,
            "converged": res.record.converged,
            "iterations_run": res.record.iterations,
            "best_val_loss": res.record.best_val,
            "pred_ade": rep.mean_ade,
            "pred_fde": rep.mean_fde,
            "seconds": time.perf_counter() - t0,
        })
        log.info("compare masks %s: %s", variant, rows[-1])
    return rows
