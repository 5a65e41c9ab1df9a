"""Inference pipeline: durations, condition, prosody codes, mel.

Prompt utterances play two separate roles. The first ``prompt_sents`` of them
form the prosody and duration prompt; their mels, cut to a frame budget, serve
as timbre references.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .adm import ADM, adm_generate
from .corpus import Utterance
from .evaluation import cosine
from .interp import interp_generate
from .plm import PLM, plm_generate, pool_cond
from .training import require_stage
from .vqvae import VQTTS

MELGRID_SCHEMA = "melgrid/1"


class PromptError(ValueError):
    """Prompt set is empty or mixes speakers."""


@dataclass
class Models:
    vq: VQTTS
    plm: PLM
    adm: ADM

    @classmethod
    def load(cls, run_dir: str | Path) -> "Models":
        vq = require_stage(run_dir, "vqgan")
        return cls(vq, require_stage(run_dir, "plm"), require_stage(run_dir, "adm"))


@dataclass
class SynthResult:
    mel: np.ndarray
    durations: np.ndarray
    codes: np.ndarray
    metrics: dict = field(default_factory=dict)


def check_prompts(prompts: list[Utterance]) -> None:
    if not prompts:
        raise PromptError("at least one prompt utterance is required")
    speakers = {u.speaker_id for u in prompts}
    if len(speakers) > 1:
        raise PromptError(f"prompts come from several speakers: {sorted(speakers)}")


def select_refs(mels: list[np.ndarray], frame_budget: int | None) -> list[np.ndarray]:
    """Leading reference frames up to ``frame_budget`` (``None`` keeps everything)."""
    if frame_budget is None:
        return list(mels)
    if frame_budget < 1:
        raise ValueError("timbre frame budget must be positive")
    out, left = [], frame_budget
    for m in mels:
        if left <= 0:
            break
        out.append(m[:left])
        left -= len(out[-1])
    return out


@dataclass
class PromptContext:
    durations: np.ndarray
    ph_cond: Tensor
    codes: np.ndarray
    cond: Tensor  # pooled to code rate


@torch.no_grad()
def prompt_context(vq: VQTTS, prompts: list[Utterance], refs: list[np.ndarray],
                   max_codes: int, max_phonemes: int) -> PromptContext:
    """Prompt features, truncated on the left to the given budgets."""
    hop = vq.cfg.hop
    durs, ph_cond, codes, cond = [], [], [], []
    for u in prompts:
        durs.append(u.durations)
        ph_cond.append(vq.mrte.content_encode(u.phonemes))
        codes.append(vq.encode_prosody(u.mel)[1].codes)
        cond.append(pool_cond(vq.mrte.build_cond(u.phonemes, u.durations, refs).hidden, hop))
    return PromptContext(np.concatenate(durs)[-max_phonemes:] if max_phonemes else np.zeros(0, np.int64),
                         torch.cat(ph_cond)[-max_phonemes:] if max_phonemes else ph_cond[0][:0],
                         np.concatenate(codes)[-max_codes:] if max_codes else np.zeros(0, np.int64),
                         torch.cat(cond)[-max_codes:] if max_codes else cond[0][:0])


def _budgets(models: Models, target_ph) -> tuple[int, int]:
    n_ph = len(target_ph)
    # the target span in codes is unknown before durations exist; reserve a generous bound
    reserve = 4 * n_ph
    return max(0, models.plm.cfg.max_context - reserve), max(0, models.adm.cfg.max_context - n_ph)


@torch.no_grad()
def synthesize(models: Models, prompts: list[Utterance], target_ph, prompt_sents: int | None = None,
               timbre_frames: int | None = None) -> SynthResult:
    check_prompts(prompts)
    vq, hop = models.vq, models.vq.cfg.hop
    target_ph = np.asarray(target_ph, dtype=np.int64)
    prosody = prompts if prompt_sents is None else prompts[:prompt_sents]
    if not prosody:
        raise PromptError("prompt_sents must select at least one utterance")
    refs = select_refs([u.mel for u in prompts], timbre_frames)
    max_codes, max_ph = _budgets(models, target_ph)
    ctx = prompt_context(vq, prosody, refs, max_codes, max_ph)
    durations = adm_generate(models.adm, ctx.durations, ctx.ph_cond, vq.mrte.content_encode(target_ph))
    cond = vq.mrte.build_cond(target_ph, durations, refs)
    codes = plm_generate(models.plm, ctx.codes, ctx.cond, cond)
    mel = vq.decode_mel(codes, cond)
    metrics = {
        "frames": int(mel.shape[0]),
        "sum_durations": int(durations.sum()),
        "n_codes": int(len(codes)),
        "prompt_codes": int(len(ctx.codes)),
        "prompt_phonemes": int(len(ctx.durations)),
        "timbre_frames": int(sum(len(r) for r in refs)),
        "timbre_cos": cosine(vq.mrte.global_timbre([mel]), vq.mrte.global_timbre(refs)),
    }
    return SynthResult(mel.numpy().astype(np.float32), durations, codes, metrics)


@torch.no_grad()
def interp_synthesize(models: Models, flat: list[Utterance], rhy: list[Utterance], target_ph,
                      gamma: float, timbre_frames: int | None = None) -> SynthResult:
    """Timbre and durations follow the flat (target) speaker; prosody codes mix both prompts."""
    check_prompts(flat)
    check_prompts(rhy)
    vq = models.vq
    target_ph = np.asarray(target_ph, dtype=np.int64)
    refs = select_refs([u.mel for u in flat], timbre_frames)
    max_codes, max_ph = _budgets(models, target_ph)
    f_ctx = prompt_context(vq, flat, refs, max_codes, max_ph)
    r_ctx = prompt_context(vq, rhy, [u.mel for u in rhy], max_codes, max_ph)
    durations = adm_generate(models.adm, f_ctx.durations, f_ctx.ph_cond, vq.mrte.content_encode(target_ph))
    cond = vq.mrte.build_cond(target_ph, durations, refs)
    codes = interp_generate(models.plm, (f_ctx.codes, f_ctx.cond), (r_ctx.codes, r_ctx.cond), cond, gamma)
    mel = vq.decode_mel(codes, cond)
    metrics = {"frames": int(mel.shape[0]), "sum_durations": int(durations.sum()),
               "n_codes": int(len(codes)), "gamma": float(gamma)}
    return SynthResult(mel.numpy().astype(np.float32), durations, codes, metrics)


# -------------------------------------------------------------- MelGrid file

def dumps_melgrid(res: SynthResult) -> str:
    mel = np.ascontiguousarray(res.mel, dtype="<f4")
    lines = [
        {"schema": MELGRID_SCHEMA, "frames": int(mel.shape[0]), "bins": int(mel.shape[1])},
        {"mel": base64.b64encode(mel.tobytes()).decode("ascii"),
         "durations": [int(d) for d in res.durations], "codes": [int(c) for c in res.codes]},
        {"metrics": res.metrics},
    ]
    return "".join(json.dumps(x, sort_keys=True) + "\n" for x in lines)


def loads_melgrid(text: str) -> SynthResult:
    lines = text.splitlines()
    if len(lines) != 3:
        raise ValueError(f"melgrid file needs 3 lines, found {len(lines)}")
    head, body, tail = (json.loads(x) for x in lines)
    if head.get("schema") != MELGRID_SCHEMA:
        raise ValueError(f"unexpected melgrid header {head}")
    raw = base64.b64decode(body["mel"])
    if len(raw) != 4 * head["frames"] * head["bins"]:
        raise ValueError("mel payload does not match the header shape")
    mel = np.frombuffer(raw, dtype="<f4").reshape(head["frames"], head["bins"]).copy()
    return SynthResult(mel, np.asarray(body["durations"], dtype=np.int64),
                       np.asarray(body["codes"], dtype=np.int64), tail["metrics"])


def write_melgrid(res: SynthResult, path: str | Path) -> None:
    Path(path).write_text(dumps_melgrid(res), encoding="utf-8")


def read_melgrid(path: str | Path) -> SynthResult:
    return loads_melgrid(Path(path).read_text(encoding="utf-8"))
