"""Run configuration: nested dataclasses serialised as JSON."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .adm import ADMConfig
from .corpus import CorpusConfig
from .mrte import MRTEConfig
from .plm import PLMConfig
from .vqvae import VQConfig


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr_scale: float = 0.5
    warmup: int = 400
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    weight_decay: float = 0.0
    log_every: int = 50
    ckpt_every: int = 500
    continuous_steps: int = 0  # stage 1 only: steps before the codebook is fitted


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    vq: VQConfig = field(default_factory=VQConfig)
    plm: PLMConfig = field(default_factory=PLMConfig)
    adm: ADMConfig = field(default_factory=ADMConfig)
    train_vq: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000, continuous_steps=300))
    train_plm: TrainConfig = field(default_factory=lambda: TrainConfig(steps=5000, batch_size=4))
    train_adm: TrainConfig = field(default_factory=lambda: TrainConfig(steps=5000, batch_size=4))
    max_frames: int = 2048
    max_refs: int = 3  # stage-1 training samples 1..max_refs timbre references
    cond_refs: int = 2  # references used to build the condition for stage-2 features
    holdout_speakers: int = 2  # highest speaker ids, never seen in training
    gamma: float = 0.5
    frames_per_second: int = 20  # synthetic mapping of timbre budgets in seconds to frames
    dtype: str = "float32"

    def validate(self) -> "RunConfig":
        c = self
        checks = [
            (c.vq.bins == c.corpus.bins == c.vq.mrte.bins, "bin counts disagree"),
            (c.vq.mrte.n_phonemes == c.corpus.n_phonemes, "phoneme vocabularies disagree"),
            (c.vq.hop == c.corpus.hop == c.plm.hop, "hop sizes disagree"),
            (c.plm.K == c.vq.codebook_size, "PLM vocabulary must equal codebook size"),
            (c.plm.d_cond == c.vq.mrte.d_model == c.adm.d_cond, "condition widths disagree"),
            (c.plm.max_context * c.vq.hop >= c.max_frames, "PLM context shorter than a training batch"),
            (0.0 <= c.gamma <= 1.0, "gamma must lie in [0, 1]"),
            (c.dtype in ("float32", "float64"), "dtype must be float32 or float64"),
            (0 <= c.holdout_speakers < c.corpus.n_speakers, "held-out speakers must leave a training set"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        return self

    @property
    def torch_dtype(self):
        import torch
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d).validate()

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")


def _build(cls, d: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v, t = d[f.name], hints[f.name]
        if dataclasses.is_dataclass(t):
            v = _build(t, v)
        elif typing.get_origin(t) is tuple:
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def desk_config(seed: int = 0) -> RunConfig:
    """Small configuration used by the experiments and the acceptance suite.

    Sized so that a full two-stage run finishes in a few minutes on one CPU core.
    """
    mrte = MRTEConfig(hidden=48, d_model=48, d_global=32, conv_blocks=2, kernel=3)
    return RunConfig(
        seed=seed,
        corpus=CorpusConfig(seed=seed, n_speakers=512, utts_per_speaker=24),
        vq=VQConfig(hidden=48, conv_blocks=3, mrte=mrte),
        plm=PLMConfig(layers=2, d_model=64, heads=4, d_cond=48, max_context=256),
        adm=ADMConfig(layers=2, d_model=64, heads=4, d_cond=48, max_context=320),
        train_vq=TrainConfig(steps=1500, batch_size=8, continuous_steps=300),
        train_plm=TrainConfig(steps=2500, batch_size=4, lr_scale=1.0),
        train_adm=TrainConfig(steps=800, batch_size=4, lr_scale=1.0),
        max_frames=1024,
        holdout_speakers=8,
    ).validate()


def tiny_config(seed: int = 0) -> RunConfig:
    """Seconds-scale configuration for tests and CLI smoke runs."""
    mrte = MRTEConfig(bins=16, n_phonemes=12, hidden=12, d_model=12, d_global=8, conv_blocks=1, kernel=3,
                      content_layers=1)
    steps = dict(batch_size=2, log_every=5, ckpt_every=10)
    return RunConfig(
        seed=seed,
        corpus=CorpusConfig(seed=seed, n_speakers=4, utts_per_speaker=8, bins=16, n_phonemes=12,
                            min_phonemes=4, max_phonemes=6),
        vq=VQConfig(bins=16, hidden=12, conv_blocks=1, kernel=3, codebook_size=8, code_dim=6, mrte=mrte),
        plm=PLMConfig(layers=1, d_model=16, heads=2, K=8, d_cond=12, max_context=64),
        adm=ADMConfig(layers=1, d_model=16, heads=2, d_cond=12, max_context=64),
        train_vq=TrainConfig(steps=20, continuous_steps=10, **steps),
        train_plm=TrainConfig(steps=20, **steps),
        train_adm=TrainConfig(steps=20, **steps),
        max_frames=256,
        holdout_speakers=1,
    ).validate()
