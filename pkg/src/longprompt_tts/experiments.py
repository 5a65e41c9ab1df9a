"""End-to-end experiment drivers shared by the CLI, scripts/ and the acceptance suite."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import pearsonr

from .adm import adm_generate
from .config import RunConfig, TrainConfig
from .corpus import Corpus, CorpusConfig, Utterance, gen_corpus
from .evaluation import (
    PromptLenReport,
    eval_promptlen,
    heldout_adm_mse,
    heldout_dp_mse,
    heldout_recon_l1,
    matched_vs_mismatched,
    split_speakers,
    timbre_center,
)
from .interp import interp_generate
from .plm import PLM, teacher_forced_accuracy
from .training import Stage2Features, extract_features, stage_rng, train_stage
from .vqvae import VQTTS, collate_stage1

log = logging.getLogger(__name__)


@dataclass
class Pipeline:
    cfg: RunConfig
    corpus: Corpus
    vq: VQTTS
    plm: PLM
    adm: object
    train_feats: Stage2Features
    heldout_feats: Stage2Features

    @property
    def heldout(self) -> list[Utterance]:
        return self.heldout_feats.utts


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None, corpus: Corpus | None = None) -> Pipeline:
    """Generate (or take) a corpus, train all stages on the training speakers, extract
    held-out features."""
    corpus = gen_corpus(cfg.corpus) if corpus is None else corpus
    train, held = split_speakers(corpus.utterances, cfg.holdout_speakers)
    vq, _ = train_stage("vqgan", cfg, train, out_dir)
    feats = extract_features(vq, train, cfg.cond_refs, cfg.seed)
    plm, _ = train_stage("plm", cfg, train, out_dir, feats=feats)
    adm, _ = train_stage("adm", cfg, train, out_dir, feats=feats)
    held_feats = extract_features(vq, held, cfg.cond_refs, cfg.seed + 1)
    return Pipeline(cfg, corpus, vq, plm, adm, feats, held_feats)


def load_pipeline(run_dir: str | Path, corpus: Corpus, cfg: RunConfig | None = None) -> Pipeline:
    """Rebuild a :class:`Pipeline` from trained checkpoints."""
    from .training import require_stage

    vq = require_stage(run_dir, "vqgan")
    if cfg is None:
        from .checkpoint import load_checkpoint

        cfg = RunConfig.from_dict(load_checkpoint(Path(run_dir) / "vqgan.mts2").config)
    train, held = split_speakers(corpus.utterances, cfg.holdout_speakers)
    return Pipeline(cfg, corpus, vq, require_stage(run_dir, "plm"), require_stage(run_dir, "adm"),
                    extract_features(vq, train, cfg.cond_refs, cfg.seed),
                    extract_features(vq, held, cfg.cond_refs, cfg.seed + 1))


# ------------------------------------------------------------- prompt length

def promptlen_experiment(p: Pipeline, lengths=(4, 16, 64), timbre_refs=(1, 4, 16), trials: int = 200,
                         window: int = 4) -> tuple[PromptLenReport, dict]:
    # a short window keeps every scored code's context within [L, L + window)
    center = timbre_center(p.vq, p.train_feats.utts)
    return eval_promptlen(p.vq, p.plm, p.adm, p.heldout_feats, list(lengths), list(timbre_refs),
                          trials, window, p.cfg.seed, center)


def matched_timbre_experiment(p: Pipeline, trials: int = 100, n_refs: int = 4) -> np.ndarray:
    center = timbre_center(p.vq, p.train_feats.utts)
    return matched_vs_mismatched(p.vq, p.heldout, trials, n_refs, p.cfg.seed, center)


# ---------------------------------------------------------------- ablations

def ablation_config(seed: int) -> RunConfig:
    """Desk configuration with shorter schedules for the five-seed ablations."""
    from .config import desk_config

    cfg = desk_config(seed)
    # held-out recon and duration error need far fewer speakers than in-context prosody
    cfg.corpus.n_speakers = 128
    cfg.train_vq = TrainConfig(steps=800, batch_size=8, continuous_steps=200, log_every=100, ckpt_every=0)
    cfg.train_adm = TrainConfig(steps=600, batch_size=4, lr_scale=1.0, log_every=100, ckpt_every=0)
    return cfg


def ablate_seed(cfg: RunConfig, which: tuple[str, ...] = ("mrte_vs_se", "adm_vs_dp")) -> dict:
    """One seed of the ablations; held-out speakers score every variant."""
    corpus = gen_corpus(cfg.corpus)
    train, held = split_speakers(corpus.utterances, cfg.holdout_speakers)
    vq, _ = train_stage("vqgan", cfg, train)
    row = {"seed": cfg.seed}
    if "mrte_vs_se" in which:
        pool, _ = train_stage("vqgan", cfg, train, use_attention=False)
        row["recon_l1_mrte"] = heldout_recon_l1(vq, held, cfg.cond_refs, cfg.seed)
        row["recon_l1_se"] = heldout_recon_l1(pool, held, cfg.cond_refs, cfg.seed)
    if "adm_vs_dp" in which:
        feats = extract_features(vq, train, cfg.cond_refs, cfg.seed)
        held_feats = extract_features(vq, held, cfg.cond_refs, cfg.seed + 1)
        adm, _ = train_stage("adm", cfg, train, feats=feats)
        dp, _ = train_stage("dp", cfg, train, feats=feats)
        row["dur_mse_adm"] = heldout_adm_mse(adm, held_feats)
        row["dur_mse_dp"] = heldout_dp_mse(dp, held_feats)
    log.info("ablation %s", row)
    return row


ABLATION_SCHEMA = "ablation-report/1"


def ablation_summary(rows: list[dict]) -> dict:
    out = {}
    for name, better, worse in (("mrte_vs_se", "recon_l1_mrte", "recon_l1_se"),
                                ("adm_vs_dp", "dur_mse_adm", "dur_mse_dp")):
        if rows and better in rows[0]:
            wins = sum(r[better] < r[worse] for r in rows)
            out[name] = {"wins": wins, "seeds": len(rows),
                         better: float(np.mean([r[better] for r in rows])),
                         worse: float(np.mean([r[worse] for r in rows]))}
    return out


def dumps_ablation(rows: list[dict]) -> str:
    cols = sorted({k for r in rows for k in r})
    lines = [{"schema": ABLATION_SCHEMA, "columns": cols}, *({"row": r} for r in rows),
             {"summary": ablation_summary(rows)}]
    return "".join(json.dumps(x, sort_keys=True) + "\n" for x in lines)


def loads_ablation(text: str) -> tuple[list[dict], dict]:
    lines = [json.loads(x) for x in text.splitlines() if x.strip()]
    if not lines or lines[0].get("schema") != ABLATION_SCHEMA:
        raise ValueError("not an ablation report")
    rows = [x["row"] for x in lines[1:] if "row" in x]
    summary = next((x["summary"] for x in lines if "summary" in x), {})
    return rows, summary


# ------------------------------------------------------------------ overfit

def overfit_config(seed: int = 0) -> RunConfig:
    from .config import desk_config

    cfg = desk_config(seed)
    cfg.corpus = CorpusConfig(seed=seed, n_speakers=1, utts_per_speaker=4)
    cfg.holdout_speakers = 0
    cfg.vq.codebook_size = cfg.plm.K = 32
    cfg.train_vq = TrainConfig(steps=1500, batch_size=4, continuous_steps=300, log_every=100, ckpt_every=0,
                               lr_scale=1.0)
    cfg.train_plm = TrainConfig(steps=600, batch_size=2, lr_scale=1.0, log_every=100, ckpt_every=0)
    cfg.train_adm = TrainConfig(steps=600, batch_size=2, lr_scale=1.0, log_every=100, ckpt_every=0)
    return cfg.validate()


@torch.no_grad()
def _recon_all(vq: VQTTS, utts: list[Utterance], quantize: bool) -> float:
    b = collate_stage1([(u, [u.mel]) for u in utts], vq.dtype)
    return float(vq.forward_batch(b, quantize)[1]["recon_l1"])


def overfit_experiment(cfg: RunConfig | None = None) -> dict:
    """Train every stage on a 4-utterance corpus; report start/end metrics."""
    from .training import build_model, code_batch, duration_batch, sample_streams

    cfg = overfit_config() if cfg is None else cfg
    utts = gen_corpus(cfg.corpus).utterances
    recon0 = _recon_all(build_model("vqgan", cfg), utts, quantize=False)
    vq, tr = train_stage("vqgan", cfg, utts)
    recon1 = _recon_all(vq, utts, quantize=True)
    feats = extract_features(vq, utts, cfg.cond_refs, cfg.seed)
    plm, _ = train_stage("plm", cfg, utts, feats=feats)
    adm, _ = train_stage("adm", cfg, utts, feats=feats)
    rng = stage_rng(cfg.seed, "overfit-eval", 0)
    streams = sample_streams(utts, rng, 2, cfg.max_frames)
    acc = teacher_forced_accuracy(plm, code_batch(feats, streams))
    dstreams = sample_streams(utts, rng, 2, cfg.adm.max_context, size_of=lambda u: len(u.phonemes))
    db = duration_batch(feats, dstreams)
    from .adm import log_mse

    with torch.no_grad():
        dur = float(log_mse(adm(db.targets, db.cond, db.mask), db.targets, db.valid))
    return {"recon_l1_start": recon0, "recon_l1_end": recon1, "plm_acc": float(acc.min()),
            "adm_log_mse": dur, "vq_history": tr.history}


# -------------------------------------------------------------------- tempo

@torch.no_grad()
def tempo_experiment(p: Pipeline, prompt_utts: int = 3) -> dict:
    """Mean generated duration for a shared target, per held-out speaker, vs. true tempo."""
    by_spk: dict[int, list[Utterance]] = {}
    for u in p.heldout:
        by_spk.setdefault(u.speaker_id, []).append(u)
    rng = stage_rng(p.cfg.seed, "tempo", 0)
    target = rng.integers(0, p.cfg.corpus.n_phonemes, size=12)
    h_target = p.vq.mrte.content_encode(target)
    tempo, mean_dur = [], []
    for spk, us in sorted(by_spk.items()):
        prompt = us[:prompt_utts]
        durs = np.concatenate([u.durations for u in prompt])
        ph = torch.cat([p.heldout_feats.ph_cond[id(u)] for u in prompt])
        mean_dur.append(float(adm_generate(p.adm, durs, ph, h_target).mean()))
        tempo.append(p.corpus.speakers[spk].tempo)
    r = pearsonr(tempo, mean_dur).statistic
    return {"tempo": tempo, "mean_duration": mean_dur, "pearson_r": float(r)}


# ------------------------------------------------------------ interpolation

def bigram_counts(seqs: list[np.ndarray], k: int) -> np.ndarray:
    c = np.zeros((k, k))
    for s in seqs:
        np.add.at(c, (s[:-1], s[1:]), 1)
    return c


def bigram_kl(p_counts: np.ndarray, q_counts: np.ndarray, alpha: float = 0.5) -> float:
    """KL between smoothed joint bigram distributions."""
    p = (p_counts + alpha) / (p_counts + alpha).sum()
    q = (q_counts + alpha) / (q_counts + alpha).sum()
    return float((p * np.log(p / q)).sum())


def interp_experiment(p: Pipeline, gammas=(1.0, 0.75, 0.5, 0.25, 0.0), n_targets: int = 6,
                      prompt_utts: int = 4) -> dict:
    """Pick the held-out speaker pair whose code bigrams differ most; sweep gamma."""
    feats = p.heldout_feats
    k = p.plm.cfg.K
    by_spk: dict[int, list[Utterance]] = {}
    for u in feats.utts:
        by_spk.setdefault(u.speaker_id, []).append(u)
    counts = {s: bigram_counts([feats.codes[id(u)] for u in us], k) for s, us in by_spk.items()}
    spk = sorted(by_spk)
    flat_s, rhy_s = max(((a, b) for a in spk for b in spk if a != b),
                        key=lambda ab: bigram_kl(counts[ab[1]], counts[ab[0]]))

    def prompt(s):
        us = by_spk[s][:prompt_utts]
        return (np.concatenate([feats.codes[id(u)] for u in us]), torch.cat([feats.cond[id(u)] for u in us]))

    flat_p, rhy_p = prompt(flat_s), prompt(rhy_s)
    targets = by_spk[flat_s][prompt_utts:prompt_utts + n_targets]
    kls = []
    for g in gammas:
        seqs = [interp_generate(p.plm, flat_p, rhy_p, feats.cond[id(t)], g) for t in targets]
        kls.append(bigram_kl(bigram_counts(seqs, k), counts[rhy_s]))
    inversions = sum(b > a for a, b in zip(kls, kls[1:]))
    return {"flat": flat_s, "rhy": rhy_s, "gammas": list(gammas), "kl": kls, "inversions": inversions}
