"""Episodic training with validation-driven early stopping."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus_io import NEGATIVE, POSITIVE, AudioFile, DatasetIndex, LabeledRegion
from .encoder import Encoder, EncoderConfig, init_parameters, read_checkpoint, save_checkpoint
from .fewshot import (
    ClassPool,
    EpisodeSampler,
    EpisodeSpec,
    FeatureStore,
    distance_matrix,
    episode_accuracy,
    prototype_loss_and_grads,
)
from .tensor_nn import Adam, NonFiniteGradientError

logger = logging.getLogger(__name__)

PSEUDO_PREFIX = "eval/"


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; the best checkpoint so far is kept on disk."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.65
    decay_every: int = 10
    episodes_per_epoch: int = 8
    max_epochs: int = 30
    patience: int = 10
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    val_episode: EpisodeSpec = field(default_factory=lambda: EpisodeSpec(3, 5))
    val_episodes: int = 10
    k_shots: int = 5
    use_negative_contrast: bool = True
    use_transductive: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate of 1-based ``epoch``: decayed once every ``decay_every`` epochs."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.decay_every)


@dataclass
class TrainState:
    epoch: int = 0
    best_val_accuracy: float = -1.0
    best_epoch: int = 0
    epochs_since_best: int = 0
    checkpoint: str = ""


@dataclass
class EpochLog:
    epoch: int
    lr: float
    mean_loss: float
    val_accuracy: float
    seconds: float
    eval_pool_segments: int


# ---------------------------------------------------------------------------
# transductive pseudo-classes


def labeled_prefix(positives: list[LabeledRegion], k: int):
    """First ``k`` positives of a file and the ``k`` gaps that precede them."""
    pos = sorted(positives, key=lambda r: r.onset)[:k]
    gaps, cursor = [], 0.0
    for r in pos:
        if r.onset > cursor:
            gaps.append(LabeledRegion(cursor, r.onset, r.class_id, NEGATIVE, r.file))
        cursor = max(cursor, r.offset)
    return pos, gaps


def build_transductive_classes(eval_index: DatasetIndex, k: int = 5) -> DatasetIndex:
    """One pseudo-class per evaluation sub-folder built from the first ``k`` events of each file."""
    out = DatasetIndex(role="transductive", source=eval_index.source)
    for path, af in sorted(eval_index.files.items()):
        if len(af.positives) < k:
            logger.warning("%s has %d labelled events (< %d), excluded from pseudo-classes",
                           path, len(af.positives), k)
            continue
        pos, gaps = labeled_prefix(af.positives, k)
        cls = PSEUDO_PREFIX + af.class_id
        pos = [LabeledRegion(r.onset, r.offset, cls, POSITIVE, r.file) for r in pos]
        gaps = [LabeledRegion(r.onset, r.offset, cls, NEGATIVE, r.file) for r in gaps]
        out.add_file(AudioFile(path, af.duration, cls, pos, gaps))
    return out


def merge_indices(*indices: DatasetIndex, role="train") -> DatasetIndex:
    out = DatasetIndex(role=role, source="+".join(i.source for i in indices))
    for idx in indices:
        for path, af in idx.files.items():
            if path in out.files:
                raise ValueError(f"{path} appears in more than one pool")
            out.add_file(af)
    return out


# ---------------------------------------------------------------------------
# steps


def _embed_episode(encoder: Encoder, episode, use_negatives: bool, training: bool):
    n, m = episode.support.shape[:2]
    parts = [episode.support, episode.query] + ([episode.negative] if use_negatives else [])
    x = np.concatenate([p.reshape(n * m, *p.shape[2:]) for p in parts])
    if training:
        encoder.train()
        emb = encoder.forward(x)
    else:
        emb = encoder.embed(x)
    return emb.astype(np.float64).reshape(len(parts), n, m, -1)


def train_step(encoder: Encoder, optimizer: Adam, episode, use_negative_contrast=True) -> float:
    """One forward/backward/update on an episode; returns the loss."""
    emb = _embed_episode(encoder, episode, use_negative_contrast, training=True)
    m = emb.shape[2]
    protos = emb.mean(axis=2)
    sn = protos[2] if use_negative_contrast else None
    loss, _, dq, dsp, dsn = prototype_loss_and_grads(protos[1], protos[0], sn)
    if not np.isfinite(loss):
        raise TrainingAborted(f"non-finite loss {loss}")
    grads = [dsp, dq] + ([dsn] if use_negative_contrast else [])
    demb = np.stack([np.repeat(g[:, None, :] / m, m, axis=1) for g in grads])
    optimizer.zero_grad()
    encoder.backward(demb.reshape(-1, demb.shape[-1]))
    try:
        optimizer.step()
    except NonFiniteGradientError as exc:
        raise TrainingAborted(str(exc)) from exc
    return loss


def validate(encoder: Encoder, val_index: DatasetIndex, features, spec: EpisodeSpec = EpisodeSpec(3, 5),
             n_episodes: int = 100, seed: int = 0, episodes=None) -> float:
    """Mean episode accuracy over fixed-length N-way-M-shot episodes (with negative columns)."""
    if episodes is None:
        episodes = validation_episodes(val_index, features, spec, n_episodes, seed)
    accs = []
    for ep in episodes:
        emb = _embed_episode(encoder, ep, True, training=False)
        protos = emb.mean(axis=2)
        D = distance_matrix(protos[1], protos[0], protos[2])
        accs.append(episode_accuracy(D))
    return float(np.mean(accs)) if accs else 0.0


def validation_episodes(val_index, features, spec, n_episodes, seed):
    store = features if isinstance(features, FeatureStore) else FeatureStore(features)
    sampler = EpisodeSampler([ClassPool("val", val_index, store)], spec)
    rng = np.random.default_rng(seed)
    return [sampler.sample(rng) for _ in range(n_episodes)]


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    encoder: Encoder
    state: TrainState
    log: list[EpochLog]
    provenance: dict[str, int]


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "mean_loss", "val_accuracy", "seconds", "eval_pool_segments"])
        for r in rows:
            w.writerow([r.epoch, f"{r.lr:.8g}", f"{r.mean_loss:.6f}", f"{r.val_accuracy:.6f}",
                        f"{r.seconds:.3f}", r.eval_pool_segments])


def _read_log(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(EpochLog(int(r["epoch"]), float(r["lr"]), float(r["mean_loss"]),
                                 float(r["val_accuracy"]), float(r["seconds"]),
                                 int(r["eval_pool_segments"])))
    return rows


def _optimizer_tensors(encoder, optimizer):
    out = {}
    for p in encoder.parameters():
        out[f"adam.m/{p.name}"] = p.m
        out[f"adam.v/{p.name}"] = p.v
    return out


def train(train_index: DatasetIndex, eval_index: DatasetIndex | None, config: TrainConfig,
          features, val_index: DatasetIndex | None = None, out_dir=None,
          encoder_config: EncoderConfig = EncoderConfig(), extra_pool: DatasetIndex | None = None,
          resume: bool = False, progress=None, meta: dict | None = None) -> TrainResult:
    """Episodic training loop.

    ``eval_index`` feeds the transductive pseudo-classes when
    ``config.use_transductive`` is set; it is never touched otherwise.
    ``val_index`` (default: ``eval_index``) drives early stopping.
    ``extra_pool`` enables mixed-dataset episodes (half the classes from each).
    Writes ``best.ckpt``, ``last.ckpt``, ``train_log.csv`` and
    ``provenance.csv`` into ``out_dir`` when given; ``meta`` is stored in
    every checkpoint.
    """
    meta = dict(meta or {})
    store = features if isinstance(features, FeatureStore) else FeatureStore(features)
    val_index = val_index if val_index is not None else eval_index
    if val_index is None:
        raise ValueError("a validation index is required")
    pool_index = train_index
    pseudo = None
    if config.use_transductive:
        if eval_index is None:
            raise ValueError("transductive training needs the evaluation index")
        pseudo = build_transductive_classes(eval_index, config.k_shots)
        pool_index = merge_indices(train_index, pseudo)
    pools = [ClassPool("train", pool_index, store)]
    if extra_pool is not None:
        pools.append(ClassPool("extra", extra_pool, store))
    sampler = EpisodeSampler(pools, config.episode)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    encoder = init_parameters(encoder_config, seed=config.seed)
    optimizer = Adam(encoder.parameters(), lr=config.lr)
    state = TrainState()
    rng = np.random.default_rng(config.seed)
    log: list[EpochLog] = []
    best_state = None
    if resume:
        if out_dir is None or not (out_dir / "last.ckpt").exists():
            raise FileNotFoundError("resume requested but no last.ckpt in the output directory")
        ck_meta, tensors = read_checkpoint(out_dir / "last.ckpt")
        encoder.load_state_dict(tensors)
        for p in encoder.parameters():
            p.m[...] = tensors[f"adam.m/{p.name}"]
            p.v[...] = tensors[f"adam.v/{p.name}"]
        extra = ck_meta["extra"]
        optimizer.t = extra["adam_t"]
        state = TrainState(**extra["state"])
        rng.bit_generator.state = extra["rng"]
        if (out_dir / "train_log.csv").exists():
            log = _read_log(out_dir / "train_log.csv")
        _, best_state = read_checkpoint(out_dir / "best.ckpt")

    val_eps = validation_episodes(val_index, store, config.val_episode, config.val_episodes, config.seed + 1)
    prov_rows = []
    eval_segments = log[-1].eval_pool_segments if log else 0
    sampler.provenance.clear()
    if out_dir is not None and not resume and (out_dir / "provenance.csv").exists():
        (out_dir / "provenance.csv").unlink()

    # ties keep the earliest checkpoint, so after a perfect validation score no
    # later epoch can change the result
    while (state.epoch < config.max_epochs and state.epochs_since_best < config.patience
           and state.best_val_accuracy < 1.0):
        state.epoch += 1
        epoch = state.epoch
        optimizer.lr = config.lr_at(epoch)
        t0 = time.perf_counter()
        losses = []
        for e in range(config.episodes_per_epoch):
            ep = sampler.sample(rng)
            for cls, origin in zip(ep.classes, ep.provenance):
                from_eval = cls.startswith(PSEUDO_PREFIX)
                prov_rows.append((epoch, e, cls, "evaluation" if from_eval else origin))
                if from_eval:
                    eval_segments += 3 * ep.m_shot
            try:
                loss = train_step(encoder, optimizer, ep, config.use_negative_contrast)
            except TrainingAborted:
                logger.error("training aborted at epoch %d episode %d; best checkpoint retained", epoch, e)
                raise
            losses.append(loss)
        acc = validate(encoder, val_index, store, episodes=val_eps)
        row = EpochLog(epoch, optimizer.lr, float(np.mean(losses)), acc, time.perf_counter() - t0, eval_segments)
        log.append(row)
        if acc > state.best_val_accuracy:
            state.best_val_accuracy = acc
            state.best_epoch = epoch
            state.epochs_since_best = 0
            best_state = {k: v.copy() for k, v in encoder.state_dict().items()}
            if out_dir is not None:
                state.checkpoint = str(out_dir / "best.ckpt")
                save_checkpoint(encoder, out_dir / "best.ckpt",
                                extra={**meta, "epoch": epoch, "val_accuracy": acc})
        else:
            state.epochs_since_best += 1
        logger.info("epoch %d lr %.2e loss %.4f val_acc %.4f (%.1fs)", epoch, optimizer.lr,
                    row.mean_loss, acc, row.seconds)
        if progress is not None:
            progress(row)
        if out_dir is not None:
            _write_log(out_dir / "train_log.csv", log)
            _append_provenance(out_dir / "provenance.csv", prov_rows)
            prov_rows = []
            save_checkpoint(encoder, out_dir / "last.ckpt",
                            extra={**meta, "adam_t": optimizer.t, "state": asdict(state),
                                   "rng": rng.bit_generator.state},
                            extra_tensors=_optimizer_tensors(encoder, optimizer))

    if best_state is not None:
        encoder.load_state_dict(best_state)
    encoder.eval()
    provenance = dict(sampler.provenance)
    provenance["evaluation_segments"] = eval_segments
    return TrainResult(encoder, state, log, provenance)


def _append_provenance(path, rows):
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["epoch", "episode", "class", "origin"])
        w.writerows(rows)
