"""Command-line entry point: synth, train, eval, score and run (all four in sequence)."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import RunConfig, load_config, save_config
from .corpus_io import (
    TARGET_RATE,
    AnnotationParseError,
    AudioFormatError,
    ConfigError,
    generate_corpus,
    index_split,
    read_detections_csv,
    read_wav,
    resample,
    write_detections_csv,
)
from .encoder import CheckpointError, load_checkpoint, read_checkpoint
from .evaluator import (
    MissingAnnotationError,
    PostProcessConfig,
    ProbabilityTrack,
    detect_from_track,
    ensemble_runs,
    make_context,
    prepare_file,
    scoring_truth,
)
from .corpus_io import file_seed
from .features import FeatureMap, extract_features, load_feature_cache, save_feature_cache
from .fewshot import FeatureStore
from .trainer import TrainingAborted, train

logger = logging.getLogger("segfsl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA, EXIT_FORMAT = 0, 2, 3, 4, 5
THREADS_ENV = "SEGFSL_THREADS"


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# shared helpers


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"{THREADS_ENV}={env!r} is not an integer", EXIT_CONFIG)
    return os.cpu_count() or 1


def feature_loader(mode, pcen, cache_dir):
    """Loader path -> FeatureMap that resamples to 22.05 kHz and caches features on disk."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    tag = json.dumps([mode, asdict(pcen)], sort_keys=True)

    def load(path) -> FeatureMap:
        st = Path(path).stat()
        key = hashlib.sha256(f"{Path(path).resolve()}|{st.st_size}|{st.st_mtime_ns}|{tag}".encode()).hexdigest()
        cached = cache_dir / f"{Path(path).stem}-{key[:16]}.feat"
        if cached.exists():
            return load_feature_cache(cached)
        clip = read_wav(path)
        if clip.sample_rate != TARGET_RATE:
            clip = resample(clip, TARGET_RATE)
        fm = extract_features(clip, mode, pcen)
        save_feature_cache(fm, cached)
        return fm

    return load


def _sha_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: RunConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    indices = generate_corpus(cfg.corpus, out_dir)
    save_config(cfg, out_dir / "run_config.yaml")
    return {k: len(v.files) for k, v in indices.items()}


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: RunConfig, data_dir, out_dir, resume=False, progress=None):
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    try:
        train_idx = index_split(data_dir / "train", "train")
        val_idx = index_split(data_dir / "val", "validation") if (data_dir / "val").is_dir() else None
        eval_idx = index_split(data_dir / "eval", "evaluation") if (data_dir / "eval").is_dir() else None
    except (AnnotationParseError, AudioFormatError, FileNotFoundError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    if val_idx is None:
        val_idx = eval_idx
    if val_idx is None:
        raise CliError(f"{data_dir}: neither val/ nor eval/ found for validation", EXIT_DATA)
    if cfg.train.use_transductive and eval_idx is None:
        raise CliError(f"{data_dir}/eval is required for transductive training", EXIT_DATA)
    store = FeatureStore(feature_loader(cfg.features.mode, cfg.features.pcen, data_dir / ".features"))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "run_config.yaml")
    meta = {"feature_mode": cfg.features.mode, "config_hash": cfg.config_hash()}
    t0 = time.perf_counter()
    try:
        result = train(train_idx, eval_idx if cfg.train.use_transductive else None, cfg.train, store,
                       val_index=val_idx, out_dir=out_dir, encoder_config=cfg.encoder, resume=resume,
                       progress=progress, meta=meta)
    except TrainingAborted as exc:
        raise CliError(f"non-finite values during training: {exc}", EXIT_NUMERIC) from exc
    summary = {
        "config_hash": cfg.config_hash(),
        "epochs": result.state.epoch,
        "best_epoch": result.state.best_epoch,
        "best_val_accuracy": result.state.best_val_accuracy,
        "use_negative_contrast": cfg.train.use_negative_contrast,
        "use_transductive": cfg.train.use_transductive,
        "feature_mode": cfg.features.mode,
        "embedding_dim": cfg.encoder.embedding_dim,
        "provenance": result.provenance,
        "seconds": round(time.perf_counter() - t0, 1),
    }
    _write_json(out_dir / "train_summary.json", summary)
    from .plotting import plot_training_curves

    plot_training_curves(result.log, out_dir / "training_curves.png")
    return result, summary


# ---------------------------------------------------------------------------
# eval


def _eval_files(eval_idx, k):
    files = []
    names = set()
    for path in sorted(eval_idx.files):
        af = eval_idx.files[path]
        if len(af.positives) < k:
            raise MissingAnnotationError(f"{path}: {len(af.positives)} labelled events, {k} required")
        name = Path(path).name
        if name in names:
            raise CliError(f"duplicate evaluation file name {name}", EXIT_DATA)
        names.add(name)
        files.append(af)
    return files


def compute_tracks(checkpoint, eval_idx, cfg: RunConfig, features, post: PostProcessConfig, k, seed,
                   threads=1, cache_dir=None) -> list[M.ScoringFile]:
    """Averaged probability track per evaluation file, reusing a matching on-disk cache."""
    files = _eval_files(eval_idx, k)
    key = hashlib.sha256(json.dumps({"ckpt": _sha_file(checkpoint), "runs": post.n_runs,
                                     "neg": post.negatives_per_run, "k": k, "seed": seed,
                                     "features": cfg.features.mode}, sort_keys=True).encode()).hexdigest()
    cache_dir = Path(cache_dir) if cache_dir is not None else None
    cached = {}
    if cache_dir is not None and (cache_dir / "key.txt").exists() and (cache_dir / "key.txt").read_text() == key:
        for af in files:
            p = cache_dir / f"{Path(af.path).stem}.npz"
            if p.exists():
                z = np.load(p)
                cached[af.path] = ProbabilityTrack(z["values"], float(z["start_time"]))

    local = threading.local()

    def encoder():
        if not hasattr(local, "enc"):
            local.enc = load_checkpoint(checkpoint)
            local.enc.eval()
        return local.enc

    def one(af):
        ctx = make_context(af, k)
        track = cached.get(af.path)
        if track is None:
            fm = features(af.path)
            prepared = prepare_file(encoder(), fm, ctx)
            track = ensemble_runs(encoder(), fm, prepared, post, file_seed(seed, af.path))
        truth = scoring_truth(af, k)
        hours = max(af.duration - ctx.prediction_start, 0.0) / 3600
        return M.ScoringFile(Path(af.path).name, af.class_id, truth, hours, track, ctx)

    if threads > 1 and len(files) > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(one, files))
    else:
        out = [one(af) for af in files]

    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        for af, sf in zip(files, out):
            np.savez(cache_dir / f"{Path(af.path).stem}.npz", values=sf.track.values,
                     start_time=sf.track.start_time)
        (cache_dir / "key.txt").write_text(key)
    return out


def _det_rows(dets):
    return [(name, ev) for name, evs in sorted(dets.items()) for ev in evs]


def _point_tag(h, a, b):
    return f"h{h:.2f}_a{a:.1f}_b{b:.1f}"


def cmd_eval(cfg: RunConfig, checkpoint, data_dir, out_dir, sweep=False, point=None, runs=None, seed=None,
             threads=1, post_filter=True):
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    try:
        read_checkpoint(checkpoint)
    except (CheckpointError, OSError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {checkpoint}: {exc}", EXIT_DATA) from exc
    meta, _ = read_checkpoint(checkpoint)
    mode = meta.get("extra", {}).get("feature_mode", cfg.features.mode)
    if mode != cfg.features.mode:
        logger.info("using feature mode %s recorded in the checkpoint", mode)
        cfg = replace(cfg, features=replace(cfg.features, mode=mode))
    seed = cfg.eval.seed if seed is None else seed
    post = cfg.eval.post if runs is None else replace(cfg.eval.post, n_runs=runs)
    if point is not None:
        h, a, b = point
        post = replace(post, threshold=h, alpha=a, beta=b)
    post = replace(post, post_filter=post_filter)
    try:
        eval_idx = index_split(data_dir / "eval", "evaluation")
        features = FeatureStore(feature_loader(mode, cfg.features.pcen, data_dir / ".features"))
        files = compute_tracks(checkpoint, eval_idx, cfg, features, post, cfg.eval.k_shots, seed,
                               threads, out_dir / "tracks")
    except (MissingAnnotationError, AnnotationParseError, AudioFormatError, FileNotFoundError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "eval_meta.json", {"config_hash": cfg.config_hash(), "seed": seed,
                                              "checkpoint_sha256": _sha_file(checkpoint), "runs": post.n_runs,
                                              "post_filter": post_filter, "feature_mode": mode})
    if not sweep:
        dets = {f.name: detect_from_track(f.track, f.context, post) for f in files}
        write_detections_csv(_det_rows(dets), out_dir / "detections.csv")
        return files, [M.score_point(files, dets, post.threshold, post.alpha, post.beta,
                                     cfg.metrics.match, cfg.metrics.psds)]
    sweep_dir = out_dir / "sweep"
    sweep_dir.mkdir(exist_ok=True)
    points, dets = M.sweep_operating_points(files, cfg.metrics.grids, cfg.metrics.match, cfg.metrics.psds,
                                           post_filter=post_filter, keep_detections=True)
    with open(sweep_dir / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h", "alpha", "beta", "detections"])
        for p, d in zip(points, dets):
            name = f"detections_{_point_tag(p.threshold, p.alpha, p.beta)}.csv"
            write_detections_csv(_det_rows(d), sweep_dir / name)
            w.writerow([f"{p.threshold:g}", f"{p.alpha:g}", f"{p.beta:g}", name])
    M.write_scores_csv(points, out_dir / "sweep_scores.csv")
    return files, points


# ---------------------------------------------------------------------------
# score


def _load_detection_sets(path):
    """(h, alpha, beta, rows) per detection set from a CSV, a manifest or a sweep directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv" if (path / "manifest.csv").exists() else path / "sweep" / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    if header[:4] == ["h", "alpha", "beta", "detections"]:
        sets = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                try:
                    hab = float(r["h"]), float(r["alpha"]), float(r["beta"])
                except (TypeError, ValueError) as exc:
                    raise AnnotationParseError(f"{path}: bad operating point row {r}") from exc
                sets.append((*hab, read_detections_csv(path.parent / r["detections"])))
        return sets
    return [(float("nan"), float("nan"), float("nan"), read_detections_csv(path))]


def scoring_files(truth_dir, k) -> list[M.ScoringFile]:
    idx = index_split(truth_dir, "evaluation")
    out = []
    for af in _eval_files(idx, k):
        ctx = make_context(af, k)
        out.append(M.ScoringFile(Path(af.path).name, af.class_id, scoring_truth(af, k),
                                 max(af.duration - ctx.prediction_start, 0.0) / 3600, None, ctx))
    return out


def score_sets(files, sets, cfg: RunConfig):
    known = {f.name for f in files}
    points = []
    for h, a, b, rows in sets:
        dets = {name: [] for name in known}
        for name, on, off in rows:
            key = Path(name).name
            if key not in known:
                raise AnnotationParseError(f"detection for unknown file {name}")
            if not on < off:
                raise AnnotationParseError(f"detection for {name} has onset {on} >= offset {off}")
            dets[key].append((on, off))
        points.append(M.score_point(files, dets, h, a, b, cfg.metrics.match, cfg.metrics.psds))
    return points


def write_report(points, out_dir, cfg: RunConfig, figures=True):
    """Scores CSV, per-class CSV of the best point, PSD-ROC CSV and figures; returns the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best = M.best_point(points)
    roc = M.psds(points, cfg.metrics.psds)
    M.write_scores_csv(points, out_dir / "scores.csv")
    M.write_class_scores_csv(best, out_dir / "class_scores.csv")
    M.emit_psd_roc_csv(roc, out_dir / "psd_roc.csv")
    p, r, f = best.prf
    summary = {"best_f": f, "precision": p, "recall": r, "h": best.threshold, "alpha": best.alpha,
               "beta": best.beta, "psds": roc.psds, "n_points": len(points), "config_hash": cfg.config_hash()}
    with open(out_dir / "scores.csv", "a") as fh:
        fh.write(f"# best_f={f:.6f} psds={roc.psds:.6f} config_hash={cfg.config_hash()}\n")
    _write_json(out_dir / "summary.json", summary)
    if figures:
        from .plotting import plot_operating_points, plot_psd_roc

        plot_psd_roc(roc, out_dir / "psd_roc.png")
        if len(points) > 1:
            plot_operating_points(points, out_dir / "f_vs_threshold.png")
    return summary


def cmd_score(cfg: RunConfig, detections, truth_dir, out_dir, figures=True):
    try:
        files = scoring_files(truth_dir, cfg.eval.k_shots)
    except (MissingAnnotationError, FileNotFoundError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    except AnnotationParseError as exc:
        raise CliError(str(exc), EXIT_FORMAT) from exc
    try:
        sets = _load_detection_sets(detections)
    except FileNotFoundError as exc:
        raise CliError(f"cannot score {detections}: {exc}", EXIT_DATA) from exc
    except (AnnotationParseError, KeyError, ValueError) as exc:
        raise CliError(f"cannot score {detections}: {exc}", EXIT_FORMAT) from exc
    try:
        points = score_sets(files, sets, cfg)
    except (AnnotationParseError, KeyError, ValueError) as exc:
        raise CliError(f"cannot score {detections}: {exc}", EXIT_FORMAT) from exc
    return write_report(points, out_dir, cfg, figures)


# ---------------------------------------------------------------------------
# argument handling


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    train = cfg.train
    if getattr(args, "no_negative_contrast", False):
        train = replace(train, use_negative_contrast=False)
    if getattr(args, "no_transductive", False):
        train = replace(train, use_transductive=False)
    if getattr(args, "max_epochs", None) is not None:
        train = replace(train, max_epochs=args.max_epochs)
    enc = cfg.encoder
    if getattr(args, "embedding_f", None) is not None:
        enc = replace(enc, adaptive_out=(enc.adaptive_out[0], args.embedding_f))
    feats = cfg.features
    if getattr(args, "feature_mode", None) is not None:
        feats = replace(feats, mode=args.feature_mode)
    return replace(cfg, train=train, encoder=enc, features=feats)


def _point(args):
    given = [v is not None for v in (args.h, args.alpha, args.beta)]
    if any(given) and args.sweep:
        raise CliError("--sweep cannot be combined with --h/--alpha/--beta", EXIT_CONFIG)
    if args.sweep:
        return None
    base = PostProcessConfig()
    return (base.threshold if args.h is None else args.h, base.alpha if args.alpha is None else args.alpha,
            base.beta if args.beta is None else args.beta)


def build_parser():
    from .features import FEATURE_MODES

    ap = argparse.ArgumentParser(prog="segfsl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML run configuration (defaults apply to missing keys)")
        if seed:
            p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: ${THREADS_ENV} or the number of cores)")

    def train_flags(p):
        p.add_argument("--no-negative-contrast", action="store_true")
        p.add_argument("--no-transductive", action="store_true")
        p.add_argument("--feature-mode", choices=FEATURE_MODES)
        p.add_argument("--embedding-f", type=int, choices=(1, 2, 4, 8))
        p.add_argument("--max-epochs", type=int)

    def eval_flags(p):
        p.add_argument("--h", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--sweep", action="store_true")
        p.add_argument("--runs", type=int, help="negative-prototype ensemble size (default 6)")
        p.add_argument("--no-post-filter", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="episodic training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    train_flags(p)

    p = sub.add_parser("eval", help="detect events in the evaluation split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    eval_flags(p)

    p = sub.add_parser("score", help="score detections against ground truth")
    common(p, seed=False)
    p.add_argument("--detections", required=True, help="detections CSV, sweep manifest or eval output dir")
    p.add_argument("--truth", required=True, help="evaluation folder with annotation CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("run", help="synth, train, eval --sweep and score into one directory")
    common(p)
    p.add_argument("--out", required=True)
    train_flags(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--no-post-filter", action="store_true")
    return ap


def _print_summary(s):
    print(f"best F-measure {s['best_f']:.4f} (P {s['precision']:.4f} R {s['recall']:.4f}; "
          f"h={s['h']:g} alpha={s['alpha']:g} beta={s['beta']:g})  PSDS {s['psds']:.4f}  "
          f"config {s['config_hash']}")


def run_pipeline(cfg: RunConfig, out, runs=None, threads=1, post_filter=True):
    out = Path(out)
    data, model, ev = out / "data", out / "model", out / "eval"
    cmd_synth(cfg, data)
    cmd_train(cfg, data, model)
    cmd_eval(cfg, model / "best.ckpt", data, ev, sweep=True, runs=runs, threads=threads,
             post_filter=post_filter)
    return cmd_score(cfg, ev, data / "eval", out / "report")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        threads = args.threads if args.threads is not None else default_threads()
        if threads < 1:
            raise CliError("--threads must be >= 1", EXIT_CONFIG)
        if args.command == "synth":
            counts = cmd_synth(cfg, args.out)
            print(f"wrote {counts} files under {args.out} (config {cfg.config_hash()})")
        elif args.command == "train":
            _, s = cmd_train(cfg, args.data, args.out, resume=args.resume,
                             progress=lambda r: logger.info("epoch %d val_acc %.4f", r.epoch, r.val_accuracy))
            print(f"best val accuracy {s['best_val_accuracy']:.4f} at epoch {s['best_epoch']} "
                  f"({s['epochs']} epochs, config {s['config_hash']})")
        elif args.command == "eval":
            point = _point(args)
            _, points = cmd_eval(cfg, args.checkpoint, args.data, args.out, sweep=args.sweep, point=point,
                                 runs=args.runs, threads=threads, post_filter=not args.no_post_filter)
            best = M.best_point(points)
            print(f"{len(points)} detection set(s) written to {args.out}; best F {best.prf[2]:.4f}")
        elif args.command == "score":
            _print_summary(cmd_score(cfg, args.detections, args.truth, args.out, figures=not args.no_figures))
        elif args.command == "run":
            _print_summary(run_pipeline(cfg, args.out, args.runs, threads, not args.no_post_filter))
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MissingAnnotationError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
