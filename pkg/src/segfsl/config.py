"""Run configuration: one YAML file covering every module, with strict key checking."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .corpus_io import ConfigError, CorpusSpec
from .encoder import EncoderConfig
from .evaluator import PostProcessConfig
from .features import FEATURE_MODES, PcenParams
from .fewshot import EpisodeSpec
from .metrics import MatchCriterion, PsdsConfig, default_grids
from .trainer import TrainConfig


@dataclass
class FeatureSection:
    mode: str = "pcen+dmfcc"
    pcen: PcenParams = field(default_factory=PcenParams)


@dataclass
class EvalSection:
    post: PostProcessConfig = field(default_factory=PostProcessConfig)
    k_shots: int = 5
    seed: int = 0


@dataclass
class MetricSection:
    thresholds: list[float] = field(default_factory=lambda: default_grids()[0])
    alphas: list[float] = field(default_factory=lambda: default_grids()[1])
    betas: list[float] = field(default_factory=lambda: default_grids()[2])
    match: MatchCriterion = field(default_factory=MatchCriterion)
    psds: PsdsConfig = field(default_factory=PsdsConfig)

    @property
    def grids(self):
        return self.thresholds, self.alphas, self.betas


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusSpec = field(default_factory=CorpusSpec.default)
    features: FeatureSection = field(default_factory=FeatureSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    metrics: MetricSection = field(default_factory=MetricSection)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "corpus": self.corpus.to_dict(),
            "features": {"mode": self.features.mode, "pcen": asdict(self.features.pcen)},
            "encoder": self.encoder.to_dict(),
            "train": _plain(asdict(self.train)),
            "eval": {"post": asdict(self.eval.post), "k_shots": self.eval.k_shots, "seed": self.eval.seed},
            "metrics": {"thresholds": list(self.metrics.thresholds), "alphas": list(self.metrics.alphas),
                        "betas": list(self.metrics.betas), "match": asdict(self.metrics.match),
                        "psds": asdict(self.metrics.psds)},
        }
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed to corpus, training and evaluation."""
        c = self.corpus
        corpus = CorpusSpec(replace(c.train, seed=seed), replace(c.val, seed=seed + 1),
                            replace(c.eval, seed=seed + 2))
        return replace(self, seed=seed, corpus=corpus, train=replace(self.train, seed=seed),
                       eval=replace(self.eval, seed=seed))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where):
    """Instantiate a flat dataclass from ``data`` over its defaults, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_keys(data, allowed, where):
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return data


def from_dict(d: dict | None) -> RunConfig:
    d = _check_keys(d, {f.name for f in fields(RunConfig)}, "config")
    seed = int(d.get("seed", 0))
    corpus = CorpusSpec.from_dict(d["corpus"]) if "corpus" in d else CorpusSpec.default(seed)

    fd = _check_keys(d.get("features"), {"mode", "pcen"}, "features")
    mode = fd.get("mode", "pcen+dmfcc")
    if mode not in FEATURE_MODES:
        raise ConfigError(f"features.mode: {mode!r} not in {FEATURE_MODES}")
    feats = FeatureSection(mode, _build(PcenParams, fd.get("pcen"), "features.pcen"))

    ed = _check_keys(d.get("encoder"), {f.name for f in fields(EncoderConfig)}, "encoder")
    enc = EncoderConfig.from_dict({**EncoderConfig().to_dict(), **ed})

    td = dict(_check_keys(d.get("train"), {f.name for f in fields(TrainConfig)}, "train"))
    for key in ("episode", "val_episode"):
        if key in td:
            td[key] = _build(EpisodeSpec, td[key], f"train.{key}")
    td.setdefault("seed", seed)
    train = _build(TrainConfig, td, "train")

    vd = _check_keys(d.get("eval"), {"post", "k_shots", "seed"}, "eval")
    ev = EvalSection(_build(PostProcessConfig, vd.get("post"), "eval.post"), int(vd.get("k_shots", 5)),
                     int(vd.get("seed", seed)))

    md = _check_keys(d.get("metrics"), {"thresholds", "alphas", "betas", "match", "psds"}, "metrics")
    th, al, be = default_grids()
    met = MetricSection([float(x) for x in md.get("thresholds", th)], [float(x) for x in md.get("alphas", al)],
                        [float(x) for x in md.get("betas", be)], _build(MatchCriterion, md.get("match"), "metrics.match"),
                        _build(PsdsConfig, md.get("psds"), "metrics.psds"))
    if not (met.thresholds and met.alphas and met.betas):
        raise ConfigError("metrics: operating-point grids must be non-empty")
    return RunConfig(seed, corpus, feats, enc, train, ev, met)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return from_dict(data or {})


def save_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# overrides for a full-size training run on a large corpus
FULL_SCALE = {
    "train": {"episodes_per_epoch": 200, "val_episodes": 100, "max_epochs": 100, "patience": 10,
              "episode": {"n_way": 5, "m_shot": 5}},
}
