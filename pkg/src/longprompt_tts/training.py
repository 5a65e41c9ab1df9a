"""Two-stage training: the VQ model first, then the prosody and duration models
on features extracted with the frozen first stage."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from . import numerics as nx
from .adm import ADM, DurationPredictor, adm_loss, log_mse
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig
from .corpus import Corpus, Utterance, build_batch, speaker_block_ids
from .mrte import collate_refs, pad_stack
from .plm import PLM, SeqBatch, batch_stream, plm_loss, pool_cond, stack_streams
from .vqvae import VQTTS, Stage1Batch, collate_stage1, n_codes

log = logging.getLogger(__name__)

STAGES = ("vqgan", "plm", "adm", "dp")


class DependencyError(RuntimeError):
    """A stage was requested before the stage it depends on."""


def stage_rng(seed: int, stage: str, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(stage.encode()), step])


def build_model(kind: str, cfg: RunConfig, seed_offset: int = 0) -> nn.Module:
    torch.manual_seed(cfg.seed * 1000 + STAGES.index(kind) + seed_offset)
    if kind == "vqgan":
        m = VQTTS(cfg.vq)
    elif kind == "plm":
        m = PLM(cfg.plm)
    elif kind == "adm":
        m = ADM(cfg.adm)
    elif kind == "dp":
        m = DurationPredictor(cfg.adm.d_cond)
    else:
        raise ValueError(f"unknown stage {kind!r}")
    return m.to(cfg.torch_dtype)


def model_width(kind: str, cfg: RunConfig) -> int:
    return {"vqgan": cfg.vq.mrte.d_model, "plm": cfg.plm.d_model}.get(kind, cfg.adm.d_model)


# ------------------------------------------------------------------ sampling

class RefSampler:
    """Draws timbre references: other utterances of the same speaker."""

    def __init__(self, utts: list[Utterance]):
        self.utts = utts
        self.by_spk: dict[int, list[int]] = {}
        for i, u in enumerate(utts):
            self.by_spk.setdefault(u.speaker_id, []).append(i)

    def refs(self, i: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
        pool = [j for j in self.by_spk[self.utts[i].speaker_id] if j != i] or [i]
        pick = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
        return [self.utts[pool[p]].mel for p in sorted(pick)]

    def stage1_items(self, rng: np.random.Generator, batch: int, max_refs: int):
        out = []
        for _ in range(batch):
            i = int(rng.integers(len(self.utts)))
            out.append((self.utts[i], self.refs(i, int(rng.integers(1, max_refs + 1)), rng)))
        return out


def sample_streams(utts: list[Utterance], rng: np.random.Generator, n: int, limit: int,
                   size_of=None) -> list:
    """``n`` speaker-led batches: a random lead speaker, shuffled utterance order."""
    spk = sorted({u.speaker_id for u in utts})
    out = []
    for _ in range(n):
        lead = spk[int(rng.integers(len(spk)))]
        order = rng.permutation(len(utts))
        queue = [utts[i] for i in order if utts[i].speaker_id == lead]
        queue += [utts[i] for i in order if utts[i].speaker_id != lead]
        out.append(build_batch(queue, limit, size_of))
    return out


# ----------------------------------------------------------------- features

@dataclass
class Stage2Features:
    """Frozen first-stage views of a corpus, keyed by ``id(utterance)``."""

    utts: list[Utterance]
    codes: dict[int, np.ndarray]
    cond: dict[int, Tensor]  # condition pooled to code rate
    ph_cond: dict[int, Tensor]  # content states, one row per phoneme
    hop: int

    def code_view(self) -> dict[int, tuple[np.ndarray, Tensor]]:
        return {k: (self.codes[k], self.cond[k]) for k in self.codes}

    def duration_view(self) -> dict[int, tuple[np.ndarray, Tensor]]:
        return {id(u): (u.durations, self.ph_cond[id(u)]) for u in self.utts}


@torch.no_grad()
def extract_features(vq: VQTTS, utts: list[Utterance], n_refs: int, seed: int,
                     chunk: int = 32) -> Stage2Features:
    vq.eval()
    sampler = RefSampler(utts)
    rng = stage_rng(seed, "features", 0)
    refs = [sampler.refs(i, n_refs, rng) for i in range(len(utts))]
    codes, cond, ph_cond = {}, {}, {}
    hop = vq.cfg.hop
    for s in range(0, len(utts), chunk):
        part = list(range(s, min(s + chunk, len(utts))))
        b = collate_stage1([(utts[i], refs[i]) for i in part], vq.dtype)
        for i, c in zip(part, vq.encode_batch_codes([utts[i] for i in part])):
            codes[id(utts[i])] = c
        ph_vec, h_content = vq.mrte.phoneme_states(b.ph, b.ph_mask, *b.refs)
        for row, i in enumerate(part):
            u = utts[i]
            n = len(u.phonemes)
            frames = torch.repeat_interleave(ph_vec[row, :n], b.durations[row, :n], dim=0)
            cond[id(u)] = pool_cond(frames, hop)
            ph_cond[id(u)] = h_content[row, :n].clone()
    return Stage2Features(list(utts), codes, cond, ph_cond, hop)


def code_batch(feats: Stage2Features, streams) -> SeqBatch:
    view = feats.code_view()
    return stack_streams([batch_stream(b, view) for b in streams])


def duration_batch(feats: Stage2Features, streams) -> SeqBatch:
    view = feats.duration_view()
    return stack_streams([batch_stream(b, view) for b in streams])


# ------------------------------------------------------------------ trainer

LOSS_SCHEMA = "loss-curve/1"


def loss_header(kind: str, rec: dict) -> dict:
    return {"schema": LOSS_SCHEMA, "stage": kind, "fields": sorted(rec)}


def read_loss_curve(path: str | Path) -> tuple[dict, list[dict]]:
    """Parse a loss-curve file; checks the header and that steps strictly increase."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty loss curve")
    header = json.loads(lines[0])
    if header.get("schema") != LOSS_SCHEMA:
        raise ValueError(f"{path}: unexpected header {header}")
    recs = [json.loads(x) for x in lines[1:] if x.strip()]
    for a, b in zip(recs, recs[1:]):
        if b["step"] <= a["step"]:
            raise ValueError(f"{path}: step {b['step']} after {a['step']}")
    return header, recs


class Trainer:
    """Optimizer, schedule, logging and checkpointing around one model."""

    def __init__(self, kind: str, model: nn.Module, cfg: RunConfig, tcfg: TrainConfig,
                 out_dir: str | Path | None = None):
        self.kind, self.model, self.cfg, self.tcfg = kind, model, cfg, tcfg
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.opt = nx.Adam(model.named_parameters(), betas=tuple(tcfg.betas), eps=tcfg.eps,
                           weight_decay=tcfg.weight_decay)
        self.step = 0
        self.history: list[dict] = []

    def lr(self, step: int) -> float:
        return nx.noam_lr(step, model_width(self.kind, self.cfg), self.tcfg.warmup, self.tcfg.lr_scale)

    def checkpoint(self) -> Checkpoint:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"opt.{k}": v for k, v in self.opt.state_tensors().items()})
        return Checkpoint(self.kind, self.cfg.to_dict(), self.step, tensors,
                          {"opt_step": self.opt.step_count})

    def restore(self, ck: Checkpoint) -> None:
        if ck.kind != self.kind:
            raise ValueError(f"checkpoint holds {ck.kind!r}, expected {self.kind!r}")
        load_model_state(self.model, ck)
        self.opt.load_state_tensors(ck.prefixed("opt."), int(ck.meta["opt_step"]))
        self.step = ck.step

    def save(self, final: bool = False) -> None:
        if self.out_dir is None:
            return
        ck = self.checkpoint()
        if not final:
            save_checkpoint(ck, self.out_dir / f"{self.kind}_{self.step:06d}.mts2")
        save_checkpoint(ck, self.out_dir / f"{self.kind}.mts2")

    def _log(self, rec: dict) -> None:
        self.history.append(rec)
        if self.out_dir is not None:
            path = self.out_dir / f"{self.kind}_losses.jsonl"
            if not path.exists():
                self.out_dir.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(loss_header(self.kind, rec), sort_keys=True) + "\n",
                                encoding="utf-8")
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def run(self, loss_fn: Callable[[int], dict[str, Tensor]], until: int | None = None) -> list[dict]:
        until = self.tcfg.steps if until is None else until
        self.model.train()
        while self.step < until:
            step = self.step + 1
            losses = loss_fn(step)
            total = losses["loss"]
            if not torch.isfinite(total):
                raise nx.NumericError(f"{self.kind} step {step}: non-finite loss "
                                      f"{ {k: float(v.detach()) for k, v in losses.items()} }")
            self.opt.zero_grad()
            total.backward()
            self.opt.step(self.lr(step))
            self.step = step
            rec = {"stage": self.kind, "step": step, **{k: float(v.detach()) for k, v in losses.items()}}
            if step % self.tcfg.log_every == 0 or step == until:
                self._log(rec)
                log.info("%s step %d %s", self.kind, step,
                         " ".join(f"{k}={v:.4f}" for k, v in rec.items() if k not in ("stage", "step")))
            else:
                self.history.append(rec)
            if self.tcfg.ckpt_every and step % self.tcfg.ckpt_every == 0:
                self.save()
        self.save(final=True)
        return self.history


def load_model_state(model: nn.Module, ck: Checkpoint) -> None:
    state = ck.prefixed("model.")
    ref = model.state_dict()
    model.load_state_dict({k: v.to(ref[k].dtype) for k, v in state.items()})


# ------------------------------------------------------------ stage drivers

def vqgan_loss_fn(model: VQTTS, corpus_utts: list[Utterance], cfg: RunConfig, tcfg: TrainConfig):
    sampler = RefSampler(corpus_utts)

    def loss_fn(step: int) -> dict[str, Tensor]:
        rng = stage_rng(cfg.seed, "vqgan", step)
        quantize = step > tcfg.continuous_steps
        if tcfg.continuous_steps and step == tcfg.continuous_steps + 1:
            fit = collate_stage1(sampler.stage1_items(stage_rng(cfg.seed, "codebook", 0), 64, cfg.max_refs),
                                 model.dtype)
            model.init_codebook(fit, seed=cfg.seed)
        b = collate_stage1(sampler.stage1_items(rng, tcfg.batch_size, cfg.max_refs), model.dtype)
        _, losses, _ = model.forward_batch(b, quantize)
        return {"loss": losses["recon_l1"] + losses["codebook"] + losses["commit"], **losses}

    return loss_fn


def plm_loss_fn(model: PLM, feats: Stage2Features, cfg: RunConfig, tcfg: TrainConfig):
    def loss_fn(step: int) -> dict[str, Tensor]:
        rng = stage_rng(cfg.seed, "plm", step)
        streams = sample_streams(feats.utts, rng, tcfg.batch_size, cfg.max_frames)
        return {"loss": plm_loss(model, code_batch(feats, streams))}

    return loss_fn


def adm_loss_fn(model: ADM, feats: Stage2Features, cfg: RunConfig, tcfg: TrainConfig):
    def loss_fn(step: int) -> dict[str, Tensor]:
        rng = stage_rng(cfg.seed, "adm", step)
        streams = sample_streams(feats.utts, rng, tcfg.batch_size, cfg.adm.max_context,
                                 size_of=lambda u: len(u.phonemes))
        b = duration_batch(feats, streams)
        return {"loss": adm_loss(model, b.targets, b.cond, b.mask, b.valid)}

    return loss_fn


def dp_loss_fn(model: DurationPredictor, feats: Stage2Features, cfg: RunConfig, tcfg: TrainConfig):
    def loss_fn(step: int) -> dict[str, Tensor]:
        rng = stage_rng(cfg.seed, "dp", step)
        pick = rng.choice(len(feats.utts), size=4 * tcfg.batch_size, replace=False)
        us = [feats.utts[i] for i in pick]
        cond, mask = pad_stack([feats.ph_cond[id(u)] for u in us])
        durs, _ = pad_stack([torch.as_tensor(u.durations) for u in us], value=1)
        return {"loss": log_mse(model(cond, mask), durs, mask)}

    return loss_fn


def train_stage(kind: str, cfg: RunConfig, utts: list[Utterance], out_dir: str | Path | None = None,
                vq: VQTTS | None = None, feats: Stage2Features | None = None,
                resume: Checkpoint | None = None, until: int | None = None,
                use_attention: bool | None = None) -> tuple[nn.Module, Trainer]:
    """Train one stage. Stages after ``vqgan`` need the trained first-stage model."""
    if kind == "vqgan":
        run_cfg = cfg
        if use_attention is not None:
            run_cfg = RunConfig.from_dict(cfg.to_dict())
            run_cfg.vq.mrte.use_attention = use_attention
        model = build_model(kind, run_cfg)
        tcfg = cfg.train_vq
        trainer = Trainer(kind, model, run_cfg, tcfg, out_dir)
        fn = vqgan_loss_fn(model, utts, run_cfg, tcfg)
    else:
        if feats is None:
            if vq is None:
                vq = load_stage(out_dir, "vqgan", cfg) if out_dir is not None else None
            if vq is None:
                raise DependencyError(f"stage {kind!r} needs a trained vqgan checkpoint")
            feats = extract_features(vq, utts, cfg.cond_refs, cfg.seed)
        model = build_model(kind, cfg)
        tcfg = cfg.train_plm if kind == "plm" else cfg.train_adm
        trainer = Trainer(kind, model, cfg, tcfg, out_dir)
        fn = {"plm": plm_loss_fn, "adm": adm_loss_fn, "dp": dp_loss_fn}[kind](model, feats, cfg, tcfg)
    if resume is not None:
        trainer.restore(resume)
    trainer.run(fn, until)
    model.eval()
    return model, trainer


def load_stage(out_dir: str | Path, kind: str, cfg: RunConfig | None = None) -> nn.Module | None:
    path = Path(out_dir) / f"{kind}.mts2"
    if not path.exists():
        return None
    ck = load_checkpoint(path)
    run_cfg = RunConfig.from_dict(ck.config)
    if cfg is not None and kind != "vqgan":
        run_cfg = cfg
    model = build_model(kind, run_cfg)
    load_model_state(model, ck)
    model.eval()
    return model


def require_stage(out_dir: str | Path, kind: str, cfg: RunConfig | None = None) -> nn.Module:
    m = load_stage(out_dir, kind, cfg)
    if m is None:
        raise DependencyError(f"no trained {kind!r} checkpoint in {out_dir}")
    return m
