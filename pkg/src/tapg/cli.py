"""Command-line entry point: ``tapg {gen-data,train,infer,eval,plot} --config run.toml``.

Set ``TAPG_THREADS`` to cap BLAS threads; 0 (the default) runs serially.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dio
from .config import ConfigError, RunConfig, load_config
from .inference import InferenceMode, generate, read_results, to_result_entries, write_results
from .metrics import ar_curve, evaluate, pr_curve
from .model import TAPGModel, TrainingSample, checkpoint_arrays, load_model_state, make_sample, train
from .sampler import parse_group
from .transformer import save_checkpoint

log = logging.getLogger("tapg")


def build_model(cfg: RunConfig) -> TAPGModel:
    return TAPGModel(cfg.data.channels, cfg.data.T, parse_group(cfg.sampler.window_group),
                     cfg.model, cfg.sampler.sample_points, seed=cfg.seed)


def _dataset_paths(cfg: RunConfig) -> tuple[Path, Path]:
    root = cfg.path(cfg.data.dir)
    return root / "manifest.json", root / "annotations.json"


def load_videos(cfg: RunConfig) -> list[dio.VideoRecord]:
    manifest, annotations = _dataset_paths(cfg)
    videos = dio.load_dataset(manifest, annotations)
    for v in videos:
        if v.features.shape[1] != cfg.data.channels:
            raise ValueError(f"video {v.video_id} has {v.features.shape[1]} channels, "
                             f"config says {cfg.data.channels}")
    return videos


def training_samples(model: TAPGModel, videos, cfg: RunConfig) -> list[TrainingSample]:
    samples = []
    for v in videos:
        if cfg.data.mode == "rescale":
            F = dio.rescale_linear(v.features, cfg.data.T)
            ann = dio.rescale_annotations(v.annotations, v.duration_snippets, cfg.data.T)
            samples.append(make_sample(model, F, ann))
        else:
            for w in dio.crop_windows(v.features, cfg.data.T, cfg.data.window_stride,
                                      v.annotations):
                samples.append(make_sample(model, w.features, w.annotations))
    return samples


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out_dir=None) -> Path:
    d = cfg.data
    videos = dio.synth_generate(d.n_videos, d.video_length, d.channels, cfg.seed,
                                dio.SynthConfig(amplitude=d.amplitude))
    out = Path(out_dir) if out_dir else cfg.path(d.dir)
    return dio.write_dataset(out, videos, d.seconds_per_snippet)


def cmd_train(cfg: RunConfig, out=None, resume_from=None, echo=print) -> list[dict]:
    model = build_model(cfg)
    ckpt = Path(out) if out else cfg.path(cfg.paths.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = ckpt.with_suffix(".jsonl") if out else cfg.path(cfg.paths.loss_log)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    resume = None
    if resume_from:
        resume = load_model_state(model, resume_from)
    else:
        log_path.write_text("")
    samples = training_samples(model, load_videos(cfg), cfg)

    def report(r):
        echo(f"epoch {r['epoch']:3d}  L={r['L']:.6f}  L_b={r['L_b']:.6f}  "
             f"L_c={r['L_c']:.6f}  L_r={r['L_r']:.6f}  lr={r['lr']:.3g}")

    if cfg.train.epochs == 0 and resume is None:
        save_checkpoint(ckpt, checkpoint_arrays(model, None, 0))
        return []
    return train(model, samples, cfg.train, log_path=log_path, checkpoint_path=ckpt,
                 resume=resume, on_epoch=report)


def _mode(cfg: RunConfig) -> InferenceMode:
    return InferenceMode(cfg.data.mode, cfg.data.T, cfg.data.window_stride)


def cmd_infer(cfg: RunConfig, checkpoint=None, out=None) -> dict[str, list[dict]]:
    model = build_model(cfg)
    load_model_state(model, checkpoint or cfg.path(cfg.paths.checkpoint))
    manifest, annotations = _dataset_paths(cfg)
    durations = {vid: d for vid, (d, _) in dio.read_annotation_file(annotations).items()} \
        if annotations.exists() else {}
    results = {}
    for vid, fpath in sorted(dio.read_manifest(manifest).items()):
        F = dio.load_features(fpath)
        props, factor = generate(model, F, _mode(cfg), cfg.inference)
        seconds = durations.get(vid, F.shape[0] * cfg.data.seconds_per_snippet) / F.shape[0]
        results[vid] = to_result_entries(props, factor * seconds)
    path = Path(out) if out else cfg.path(cfg.paths.results)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_results(path, results)
    return results


def _ground_truth_seconds(cfg: RunConfig) -> dict[str, list[tuple[float, float]]]:
    _, annotations = _dataset_paths(cfg)
    return {vid: segs for vid, (_, segs) in dio.read_annotation_file(annotations).items()}


def cmd_eval(cfg: RunConfig, results=None, out=None, plot: bool = False) -> dict:
    res = read_results(results or cfg.path(cfg.paths.results))
    gts = _ground_truth_seconds(cfg)
    report = evaluate(res, gts, cfg.eval)
    path = Path(out) if out else cfg.path(cfg.paths.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1))
    if plot:
        _plot_ar_an(cfg, res, gts, cfg.path(cfg.paths.plot))
        _plot_pr(cfg, res, gts, cfg.path(cfg.paths.plot).with_name("pr.svg"))
    return report


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "tapg"  # stable element ids, byte-identical files
    return plt


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    fig.clf()
    return path


def _plot_ar_an(cfg: RunConfig, res, gts, path: Path) -> Path:
    plt = _pyplot()
    ranked = {v: sorted(r, key=lambda e: -e["score"]) for v, r in res.items()}
    curve = ar_curve(ranked, gts, cfg.eval.tiou_thresholds, cfg.eval.an_max)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(np.arange(1, len(curve) + 1), curve)
    ax.set_xlabel("AN")
    ax.set_ylabel("AR")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    _save(fig, path)
    plt.close(fig)
    return path


def _plot_pr(cfg: RunConfig, res, gts, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for t in cfg.eval.detection_thresholds:
        precision, recall = pr_curve(res, gts, t)
        ax.plot(recall, precision, label=f"tIoU {t:g}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend()
    _save(fig, path)
    plt.close(fig)
    return path


def cmd_plot(cfg: RunConfig, out=None) -> list[Path]:
    """AR-vs-AN and PR curves from the results file, loss curves from the loss log."""
    written = []
    results = cfg.path(cfg.paths.results)
    ar_path = Path(out) if out else cfg.path(cfg.paths.plot)
    if results.exists():
        res, gts = read_results(results), _ground_truth_seconds(cfg)
        written.append(_plot_ar_an(cfg, res, gts, ar_path))
        written.append(_plot_pr(cfg, res, gts, ar_path.with_name("pr.svg")))
    loss_log = cfg.path(cfg.paths.loss_log)
    if loss_log.exists() and loss_log.read_text().strip():
        rows = [json.loads(line) for line in loss_log.read_text().splitlines() if line.strip()]
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(5, 4))
        for key in ("L", "L_b", "L_c", "L_r"):
            ax.plot([r["epoch"] for r in rows], [r[key] for r in rows], label=key)
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax.legend()
        written.append(_save(fig, ar_path.with_name("loss.svg")))
        plt.close(fig)
    return written


# -- argument parsing ---------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tapg", description="Temporal action proposal pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="run configuration (TOML)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output path (file or directory)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("gen-data", "write a synthetic dataset")
    p = add("train", "train both transformers")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p = add("infer", "generate proposals for every video in the dataset")
    p.add_argument("--checkpoint", help="model checkpoint (default: paths.checkpoint)")
    p = add("eval", "score a results file against the annotations")
    p.add_argument("--plot", action="store_true", help="also write the AR-vs-AN SVG")
    add("plot", "write AR-vs-AN, PR and loss-curve SVGs")
    return parser


def _limit_threads():
    raw = os.environ.get("TAPG_THREADS", "0") or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TAPG_THREADS must be an integer, got {raw!r}") from None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=max(n, 1))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    try:
        limiter = _limit_threads()
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.train.seed = args.seed
        if args.command == "gen-data":
            print(cmd_gen_data(cfg, args.out))
        elif args.command == "train":
            if args.epochs is not None:
                cfg.train.epochs = args.epochs
            cmd_train(cfg, args.out, args.checkpoint)
        elif args.command == "infer":
            res = cmd_infer(cfg, args.checkpoint, args.out)
            print(f"{sum(len(v) for v in res.values())} proposals for {len(res)} videos")
        elif args.command == "eval":
            report = cmd_eval(cfg, out=args.out, plot=args.plot)
            for k, v in report.items():
                if isinstance(v, float):
                    print(f"{k:>12s}  {v:.4f}")
        elif args.command == "plot":
            for p in cmd_plot(cfg, args.out):
                print(p)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"tapg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return 0


if __name__ == "__main__":
    sys.exit(main())
