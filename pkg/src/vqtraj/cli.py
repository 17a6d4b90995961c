"""Command-line pipeline for trajectory prediction.

Subcommands: synth, train-vq, encode, train-lm, predict, eval, bench,
sweep-theta, compare-masks, export-plot.

Every subcommand reads and writes artifacts in one working directory and
records a ``manifest_<command>.json`` holding the resolved configuration,
its hash, the seed and the SHA-256 of every input file.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import BACKEND, __version__
from . import evaluate as ev
from .config import ConfigError, RunConfig, load_config, parse_pairs
from .container import ContainerError, read_tokens, write_tokens
from .data import (
    DataFormatError,
    Dataset,
    extract_tracks,
    load_dataset,
    load_ethucy_text,
    save_dataset,
    split_dataset,
    synth_generate,
)
from .numcore import Rng
from .seqlm import init_lm, load_lm, save_lm, train_lm
from .vqmem import (
    TrainingDiverged,
    codebook_report,
    init_vq,
    load_vq,
    reconstruction_ade,
    save_codebook,
    save_vq,
    train_vq,
)

log = logging.getLogger("vqtraj")

CONFIG_ENV = "VQTRAJ_CONFIG"

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_DEPENDENCY = 0, 1, 2, 3

# artifact name -> subcommand that produces it
PRODUCERS = {
    "data_train.bin": "synth",
    "data_val.bin": "synth",
    "data_test.bin": "synth",
    "vq.ckpt": "train-vq",
    "tokens_train.bin": "encode",
    "tokens_val.bin": "encode",
    "lm.ckpt": "train-lm",
    "predictions.csv": "predict",
}


class DependencyError(RuntimeError):
    pass


class Run:
    def __init__(self, command: str, cfg: RunConfig, workdir: Path):
        self.command, self.cfg, self.workdir = command, cfg, workdir
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def need(self, name: str) -> Path:
        path = self.workdir / name
        if not path.is_file():
            raise DependencyError(
                f"missing {path}; run `vqtraj {PRODUCERS.get(name, '?')}` first"
            )
        self.inputs[name] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def out(self, name: str) -> Path:
        self.outputs.append(name)
        path = self.workdir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_text(self, name: str, text: str) -> None:
        self.out(name).write_text(text, encoding="utf-8")

    def finish(self, extra: dict | None = None) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "kernels": BACKEND,
            "seed": self.cfg.seed,
            "config_sha256": self.cfg.digest(),
            "config": self.cfg.serialize().splitlines(),
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        if extra:
            manifest["results"] = extra
        (self.workdir / f"manifest_{self.command}.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_splits(run: Run) -> tuple[Dataset, Dataset, Dataset]:
    return tuple(load_dataset(run.need(f"data_{s}.bin")) for s in ("train", "val", "test"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(run: Run, args) -> None:
    cfg = run.cfg
    if args.ethucy:
        splits = []
        for name, path in zip(("train", "val", "test"), args.ethucy):
            trajs = extract_tracks(load_ethucy_text(path), cfg.t_obs, cfg.t_pred, args.window_stride)
            splits.append(Dataset.from_trajectories(trajs, name, cfg.t_obs, cfg.t_pred))
            run.inputs[Path(path).name] = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    else:
        ds = synth_generate(Rng(cfg.seed).child(0), cfg.n_synth, sigma=cfg.sigma,
                            t_obs=cfg.t_obs, t_pred=cfg.t_pred)
        splits = split_dataset(ds, cfg.n_train, cfg.n_val)
    for split in splits:
        save_dataset(split, run.out(f"data_{split.split}.bin"))
    run.finish({f"n_{s.split}": len(s) for s in splits})
    print(" ".join(f"{s.split}={len(s)}" for s in splits))


def cmd_train_vq(run: Run, args) -> None:
    train, val, _ = _load_splits(run)
    pc = run.cfg.pipeline()
    params = init_vq(pc.vq, seed=run.cfg.seed)
    res = train_vq(params, train, pc.vq_train, val=val)
    save_vq(params, run.out("vq.ckpt"))
    save_codebook(params.memory, run.out("codebook.ckpt"))
    run.write_text("vq_curve.csv", ev.table_csv(res.curve))
    last = res.curve[-1]
    run.finish({"final": last, "reinitialized": res.reinitialized})
    print(f"vq: recon={last['reconstruction']:.6f} val_recon_ade={last.get('val_recon_ade', float('nan')):.6f}"
          f" utilization={last['utilization']:.3f}")


def cmd_encode(run: Run, args) -> None:
    vq = load_vq(run.need("vq.ckpt"))
    splits = _load_splits(run)
    lines = []
    for ds in splits:
        toks = ev.tokens_for(vq, ds)
        write_tokens(run.out(f"tokens_{ds.split}.bin"), toks, vq.config.K, vq.config.o)
        rep = codebook_report(vq.memory, toks)
        lines.append(f"{ds.split}: n={len(ds)} used={rep['used']}/{rep['K']} "
                     f"utilization={rep['utilization']:.6f} perplexity={rep['perplexity']:.6f}")
    run.write_text("codebook_report.txt", "\n".join(lines) + "\n")
    run.finish()
    print("\n".join(lines))


def cmd_train_lm(run: Run, args) -> None:
    train_tok, K, o, p = read_tokens(run.need("tokens_train.bin"))
    val_tok = read_tokens(run.need("tokens_val.bin"))[0]
    pc = run.cfg.pipeline()
    if (K, o, p) != (pc.lm.K, pc.lm.o, pc.lm.p):
        raise ConfigError(f"token file has K={K}, o={o}, p={p} but the config implies "
                          f"K={pc.lm.K}, o={pc.lm.o}, p={pc.lm.p}")
    lm = init_lm(pc.lm, seed=run.cfg.seed)
    res = train_lm(lm, train_tok, pc.lm_train, val_tok)
    rec = res.record
    save_lm(lm, run.out("lm.ckpt"), extra={"variant": pc.lm_train.variant})
    run.write_text("lm_curve.csv", ev.table_csv(
        [{"iteration": i, "train_loss": t, "val_loss": v}
         for (i, t), (_, v) in zip(rec.train_curve, rec.val_curve)]))
    summary = {"iters_to_convergence": rec.iterations_to_convergence, "converged": rec.converged,
               "iterations": rec.iterations, "best_val_loss": rec.best_val}
    run.finish(summary)
    print(f"lm ({pc.lm_train.variant}): " + " ".join(f"{k}={v}" for k, v in summary.items()))


def _write_predictions(path: Path, ps: ev.PredictionSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "agent_id", "sample", "frame", "x", "y"])
        n, k, t, _ = ps.predictions.shape
        for i in range(n):
            for s in range(k):
                for f in range(t):
                    x, y = ps.predictions[i, s, f]
                    w.writerow([i, int(ps.agent_ids[i]), s, f, repr(float(x)), repr(float(y))])


def _read_predictions(path: Path, test: Dataset) -> ev.PredictionSet:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = int(rows[:, 0].max()) + 1 if len(rows) else 0
    k = int(rows[:, 2].max()) + 1 if len(rows) else 0
    if n != len(test):
        raise DataFormatError(f"{path}: predictions cover {n} trajectories, test split has {len(test)}")
    preds = np.zeros((n, k, test.t_pred, 2))
    idx = rows[:, [0, 2, 3]].astype(np.int64)
    preds[idx[:, 0], idx[:, 1], idx[:, 2]] = rows[:, 4:6]
    return ev.PredictionSet(preds, test.points[:, test.t_obs:].copy(), test.agent_ids.copy(), list(test.labels))


def _load_models(run: Run):
    vq = load_vq(run.need("vq.ckpt"))
    lm, extra = load_lm(run.need("lm.ckpt"))
    return vq, lm, extra


def cmd_predict(run: Run, args) -> None:
    vq, lm, _ = _load_models(run)
    test = load_dataset(run.need("data_test.bin"))
    pc = run.cfg.pipeline().predict
    ps = ev.predict_dataset(vq, lm, test, pc)
    _write_predictions(run.out("predictions.csv"), ps)
    run.finish({"trajectories": len(ps), "K_samples": pc.K_samples})
    print(f"wrote {len(ps)} x {pc.K_samples} predictions")


def cmd_eval(run: Run, args) -> None:
    vq, lm, _ = _load_models(run)
    test = load_dataset(run.need("data_test.bin"))
    ps = _read_predictions(run.need("predictions.csv"), test)
    cfg = run.cfg
    echo = {"seed": cfg.seed, "K": cfg.K, "mask": cfg.mask, "temperature": cfg.temperature,
            "config_sha256": cfg.digest(),
            "vq_reconstruction_ade": f"{reconstruction_ade(vq, test):.6f}"}
    rep = ev.evaluate_predictions(ps, echo, with_baseline=test)
    run.write_text("metrics.csv", ev.metrics_csv(rep))
    run.write_text("metrics.txt", ev.metrics_text(rep))
    run.finish({"mean_ade": rep.mean_ade, "mean_fde": rep.mean_fde,
                "cv_ade": float(rep.baseline_ade.mean())})
    print(ev.metrics_text(rep), end="")


def cmd_bench(run: Run, args) -> None:
    vq, lm, _ = _load_models(run)
    test = load_dataset(run.need("data_test.bin"))
    rep = ev.latency_bench(vq, lm, list(test)[:64], n_trials=run.cfg.bench_trials)
    lines = [f"single prediction latency over {rep.n_trials} trials (ms):",
             f"  mean={rep.mean_ms:.4f} p50={rep.p50_ms:.4f} p95={rep.p95_ms:.4f}",
             f"  model: {rep.model}", f"  hardware: {rep.hardware}",
             "  sampling time per trajectory by K_samples (ms, reported only):"]
    lines += [f"    K={k}: {v:.4f}" for k, v in rep.sampling_ms_by_k.items()]
    run.write_text("latency.txt", "\n".join(lines) + "\n")
    run.finish(asdict(rep))
    print("\n".join(lines))


def cmd_sweep_theta(run: Run, args) -> None:
    train, val, test = _load_splits(run)
    rows = ev.sweep_theta(train, val, test, run.cfg.theta_list(), run.cfg.pipeline())
    run.write_text("sweep_theta.csv", ev.table_csv(rows))
    a = ev.PAPER_THETA_ANCHOR
    note = (f"# reference (not reproducible at this scale): theta={a['theta']} on {a['dataset']} "
            f"gave ADE/FDE {a['ade']}/{a['fde']}\n")
    run.write_text("sweep_theta.txt", note + ev.table_csv(rows))
    run.finish({"rows": len(rows)})
    print(ev.table_csv(rows), end="")


def cmd_compare_masks(run: Run, args) -> None:
    vq = load_vq(run.need("vq.ckpt"))
    train, val, test = _load_splits(run)
    rows = ev.compare_masks(vq, train, val, test, run.cfg.pipeline())
    run.write_text("compare_masks.csv", ev.table_csv(rows))
    semi, causal = rows
    ratio = semi["iters_to_convergence"] / max(causal["iters_to_convergence"], 1)
    a = ev.PAPER_MASK_ANCHOR
    text = ev.table_csv(rows) + (
        f"# IC ratio semi/causal = {ratio:.4f} (reference on {a['dataset']}: "
        f"{a['semi']['ic']} vs {a['causal']['ic']})\n")
    run.write_text("compare_masks.txt", text)
    run.finish({"ic_ratio": ratio})
    print(text, end="")


def _svg(past, gt, samples, size: int = 320) -> str:
    allpts = np.concatenate([past, gt, samples.reshape(-1, 2)])
    lo, hi = allpts.min(0), allpts.max(0)
    span = float(max((hi - lo).max(), 1e-9))
    pad = 16

    def poly(pts, color, width):
        xy = (pts - lo) / span * (size - 2 * pad) + pad
        coords = " ".join(f"{x:.2f},{size - y:.2f}" for x, y in xy)
        return f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}"/>'

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    parts += [poly(np.concatenate([past[-1:], s]), "#f5a623", 1) for s in samples]
    parts.append(poly(np.concatenate([past[-1:], gt]), "#d0021b", 2))
    parts.append(poly(past, "#4a90e2", 2))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_export_plot(run: Run, args) -> None:
    test = load_dataset(run.need("data_test.bin"))
    ps = _read_predictions(run.need("predictions.csv"), test)
    count = min(run.cfg.plot_count, len(test))
    for i in range(count):
        traj = test[i]
        header = ["frame", "past_x", "past_y", "gt_x", "gt_y"]
        k = ps.predictions.shape[1]
        header += [f"s{s}_{c}" for s in range(k) for c in "xy"]
        lines = [",".join(header)]
        for f in range(traj.t_obs + traj.t_pred):
            row = [str(f)]
            row += [repr(float(v)) for v in traj.past[f]] if f < traj.t_obs else ["", ""]
            if f >= traj.t_obs:
                j = f - traj.t_obs
                row += [repr(float(v)) for v in traj.future[j]]
                row += [repr(float(v)) for s in range(k) for v in ps.predictions[i, s, j]]
            else:
                row += [""] * (2 + 2 * k)
            lines.append(",".join(row))
        run.write_text(f"plots/traj_{i:04d}.csv", "\n".join(lines) + "\n")
        run.write_text(f"plots/traj_{i:04d}.svg", _svg(traj.past, traj.future, ps.predictions[i]))
    run.finish({"exported": count})
    print(f"exported {count} trajectories to {run.workdir / 'plots'}")


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic corpus (or ingest ETH-UCY text files)"),
    "train-vq": (cmd_train_vq, "train encoders, memory array and decoder"),
    "encode": (cmd_encode, "tokenize every split with the trained memory"),
    "train-lm": (cmd_train_lm, "train the token language model"),
    "predict": (cmd_predict, "sample best-of-K futures for the test split"),
    "eval": (cmd_eval, "ADE/FDE report against ground truth and constant velocity"),
    "bench": (cmd_bench, "single-prediction latency"),
    "sweep-theta": (cmd_sweep_theta, "memory-size ablation table"),
    "compare-masks": (cmd_compare_masks, "semi-causal versus causal convergence"),
    "export-plot": (cmd_export_plot, "per-trajectory CSV and SVG of predictions"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqtraj", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"key = value config file (default: ${CONFIG_ENV})")
    common.add_argument("--workdir", default="run", help="artifact directory (default: ./run)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "synth":
            p.add_argument("--ethucy", nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                           help="ingest three `frame agent x y` text files instead of generating")
            p.add_argument("--window-stride", type=int, default=1,
                           help="sliding-window stride when ingesting text (default 1)")
    return parser


def resolve_config(args) -> RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    cfg = load_config(path) if path else RunConfig()
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.update(parse_pairs(item.replace("=", " = ", 1), "--set"))
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    return cfg.with_overrides(pairs) if pairs else cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"vqtraj: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    fn = COMMANDS[args.command][0]
    try:
        fn(Run(args.command, cfg, workdir), args)
    except DependencyError as exc:
        print(f"vqtraj {args.command}: dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except ConfigError as exc:
        print(f"vqtraj {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ContainerError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"vqtraj {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
