"""Proxy metrics and paired experiments on held-out synthetic speakers.

Metrics: teacher-forced next-code accuracy (prosody), log-duration MSE
(duration), and a centred global-timbre cosine (timbre).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import binomtest
from torch import Tensor

from .adm import ADM, DurationPredictor, log_mse
from .corpus import Utterance
from .layers import block_causal_mask
from .mrte import pad_stack
from .plm import PLM, SeqBatch, teacher_forced_accuracy
from .training import RefSampler, Stage2Features, stage_rng
from .vqvae import VQTTS, collate_stage1


def split_speakers(utts: list[Utterance], holdout: int) -> tuple[list[Utterance], list[Utterance]]:
    """The ``holdout`` highest speaker ids are held out."""
    spk = sorted({u.speaker_id for u in utts})
    held = set(spk[len(spk) - holdout:])
    return [u for u in utts if u.speaker_id not in held], [u for u in utts if u.speaker_id in held]


def sign_test(a, b) -> dict:
    """One-sided paired sign test of ``b > a``; ties are dropped."""
    d = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    wins, losses = int((d > 0).sum()), int((d < 0).sum())
    n = wins + losses
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return {"wins": wins, "losses": losses, "ties": int(len(d) - n), "p": float(p)}


# ----------------------------------------------------------- prosody trials

@dataclass
class Trial:
    speaker: int
    order: list[int]  # utterance indices (into the speaker's list) forming the stream
    t0: int  # first scored code in the concatenated stream


def speaker_streams(feats: Stage2Features) -> dict[int, list[Utterance]]:
    out: dict[int, list[Utterance]] = {}
    for u in feats.utts:
        out.setdefault(u.speaker_id, []).append(u)
    return out


def draw_trials(feats: Stage2Features, n: int, min_prefix: int, window: int, seed: int) -> list[Trial]:
    by_spk = speaker_streams(feats)
    spk = sorted(by_spk)
    rng = stage_rng(seed, "trials", 0)
    trials = []
    while len(trials) < n:
        s = spk[int(rng.integers(len(spk)))]
        order = [int(i) for i in rng.permutation(len(by_spk[s]))]
        total = sum(len(feats.codes[id(by_spk[s][i])]) for i in order)
        if total < min_prefix + window:
            continue
        trials.append(Trial(s, order, int(rng.integers(min_prefix, total - window + 1))))
    return trials


def _stream(feats: Stage2Features, utts: list[Utterance], view: str):
    if view == "codes":
        tg = np.concatenate([feats.codes[id(u)] for u in utts])
        cond = torch.cat([feats.cond[id(u)] for u in utts])
    else:
        tg = np.concatenate([u.durations for u in utts])
        cond = torch.cat([feats.ph_cond[id(u)] for u in utts])
    return torch.as_tensor(tg), cond


def window_batch(pieces: list[tuple[Tensor, Tensor]], window: int) -> tuple[SeqBatch, Tensor]:
    """Single-block rows; only the last ``window`` positions of each row are scored."""
    targets, valid = pad_stack([p[0] for p in pieces])
    cond, _ = pad_stack([p[1] for p in pieces])
    t = targets.shape[1]
    blocks = torch.where(valid, torch.zeros_like(targets), -1 - torch.arange(t).expand_as(targets))
    lengths = valid.sum(dim=1, keepdim=True)
    pos = torch.arange(t).expand_as(targets)
    score = valid & (pos >= lengths - window)
    return SeqBatch(targets, cond, block_causal_mask(blocks, valid), valid), score


@torch.no_grad()
def prompt_accuracy(plm: PLM, feats: Stage2Features, trials: list[Trial], prompt_len: int,
                    window: int, chunk: int = 50) -> np.ndarray:
    """Per-trial teacher-forced accuracy on ``window`` codes after a ``prompt_len``-code prompt."""
    plm.eval()
    by_spk = speaker_streams(feats)
    out = []
    for s in range(0, len(trials), chunk):
        pieces = []
        for tr in trials[s:s + chunk]:
            codes, cond = _stream(feats, [by_spk[tr.speaker][i] for i in tr.order], "codes")
            a, b = tr.t0 - prompt_len, tr.t0 + window
            pieces.append((codes[a:b], cond[a:b]))
        batch, score = window_batch(pieces, window)
        out.append(teacher_forced_accuracy(plm, batch, score).numpy())
    return np.concatenate(out)


@torch.no_grad()
def prompt_duration_mse(adm: ADM, feats: Stage2Features, trials: list[Trial], prompt_len: int,
                        window: int, chunk: int = 50) -> np.ndarray:
    """Per-trial teacher-forced log-duration MSE on ``window`` phonemes after a prompt.

    Trials index code positions; the phoneme position is taken proportionally.
    """
    adm.eval()
    by_spk = speaker_streams(feats)
    out = []
    for s in range(0, len(trials), chunk):
        pieces = []
        for tr in trials[s:s + chunk]:
            utts = [by_spk[tr.speaker][i] for i in tr.order]
            durs, cond = _stream(feats, utts, "durations")
            n_codes = sum(len(feats.codes[id(u)]) for u in utts)
            t0 = min(max(prompt_len, round(tr.t0 * len(durs) / n_codes)), len(durs) - window)
            pieces.append((durs[t0 - prompt_len:t0 + window], cond[t0 - prompt_len:t0 + window]))
        batch, score = window_batch(pieces, window)
        pred = adm(batch.targets, batch.cond, batch.mask)
        d = torch.log(torch.where(score, batch.targets, 1).to(pred.dtype))
        err = ((pred - d) ** 2 * score).sum(dim=1) / score.sum(dim=1)
        out.append(err.numpy())
    return np.concatenate(out)


# ------------------------------------------------------------------- timbre

@torch.no_grad()
def timbre_vec(vq: VQTTS, mels: list[np.ndarray]) -> Tensor:
    return vq.mrte.global_timbre(mels)


def cosine(a: Tensor, b: Tensor) -> float:
    return float(torch.nn.functional.cosine_similarity(a.reshape(1, -1), b.reshape(1, -1)).item())


@torch.no_grad()
def timbre_center(vq: VQTTS, utts: list[Utterance], n: int = 64) -> Tensor:
    """Mean global-timbre vector over a fixed sample of utterances."""
    return torch.stack([timbre_vec(vq, [u.mel]) for u in utts[:: max(1, len(utts) // n)]]).mean(0)


@torch.no_grad()
def resynthesize(vq: VQTTS, utt: Utterance, refs: list[np.ndarray]) -> Tensor:
    """Decode ``utt`` from its own prosody codes and durations with timbre from ``refs``."""
    b = collate_stage1([(utt, refs)], vq.dtype)
    out, _, _ = vq.forward_batch(b, quantize=True)
    return out[0, : utt.frames]


@dataclass
class TimbreTrial:
    target: Utterance
    refs: list[Utterance]  # nested pool: the first k serve budget k
    judge: list[Utterance]  # disjoint same-speaker utterances used for scoring


def draw_timbre_trials(utts: list[Utterance], n: int, max_refs: int, n_judge: int, seed: int):
    by_spk: dict[int, list[Utterance]] = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(u)
    spk = sorted(s for s, us in by_spk.items() if len(us) >= 1 + max_refs + n_judge)
    if not spk:
        raise ValueError("no speaker has enough utterances for the timbre trials")
    rng = stage_rng(seed, "timbre", 0)
    out = []
    for _ in range(n):
        us = by_spk[spk[int(rng.integers(len(spk)))]]
        p = rng.permutation(len(us))
        out.append(TimbreTrial(us[p[0]], [us[i] for i in p[1:1 + max_refs]],
                               [us[i] for i in p[1 + max_refs:1 + max_refs + n_judge]]))
    return out


@torch.no_grad()
def timbre_scores(vq: VQTTS, trials: list[TimbreTrial], n_refs: int, center: Tensor) -> np.ndarray:
    """Centred cosine between the timbre of the resynthesis and of held-aside speech."""
    vq.eval()
    out = []
    for tr in trials:
        mel = resynthesize(vq, tr.target, [u.mel for u in tr.refs[:n_refs]])
        g_out = timbre_vec(vq, [mel.numpy()]) - center
        g_ref = timbre_vec(vq, [u.mel for u in tr.judge]) - center
        out.append(cosine(g_out, g_ref))
    return np.asarray(out)


@torch.no_grad()
def matched_vs_mismatched(vq: VQTTS, utts: list[Utterance], n: int, n_refs: int, seed: int,
                          center: Tensor) -> np.ndarray:
    """Per trial: matched-speaker score minus mismatched-speaker score."""
    by_spk: dict[int, list[Utterance]] = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(u)
    spk = sorted(by_spk)
    rng = stage_rng(seed, "matched", 0)
    diffs = []
    for _ in range(n):
        a, b = rng.choice(len(spk), size=2, replace=False)
        ua, ub = by_spk[spk[a]], by_spk[spk[b]]
        pa = rng.permutation(len(ua))
        target, refs = ua[pa[0]], [ua[i].mel for i in pa[1:1 + n_refs]]
        judge_a = [ua[i].mel for i in pa[1 + n_refs:1 + 2 * n_refs]]
        judge_b = [ub[i].mel for i in rng.permutation(len(ub))[:n_refs]]
        g = timbre_vec(vq, [resynthesize(vq, target, refs).numpy()]) - center
        diffs.append(cosine(g, timbre_vec(vq, judge_a) - center)
                     - cosine(g, timbre_vec(vq, judge_b) - center))
    return np.asarray(diffs)


# ------------------------------------------------------------ ablation metrics

@torch.no_grad()
def heldout_recon_l1(vq: VQTTS, utts: list[Utterance], n_refs: int, seed: int, chunk: int = 32) -> float:
    vq.eval()
    sampler = RefSampler(utts)
    rng = stage_rng(seed, "recon", 0)
    items = [(u, sampler.refs(i, n_refs, rng)) for i, u in enumerate(utts)]
    total, count = 0.0, 0
    for s in range(0, len(items), chunk):
        b = collate_stage1(items[s:s + chunk], vq.dtype)
        _, losses, _ = vq.forward_batch(b, quantize=True)
        k = int(b.mask.sum())
        total += float(losses["recon_l1"]) * k
        count += k
    return total / count


@torch.no_grad()
def heldout_adm_mse(adm: ADM, feats: Stage2Features, prompt_utts: int = 2) -> float:
    """Each held-out utterance scored after ``prompt_utts`` earlier same-speaker utterances."""
    adm.eval()
    by_spk = speaker_streams(feats)
    pieces = []
    for us in by_spk.values():
        for j in range(prompt_utts, len(us)):
            pieces.append((_stream(feats, us[j - prompt_utts:j + 1], "durations"), len(us[j].durations)))
    errs = []
    for (durs, cond), n in pieces:
        batch, score = window_batch([(durs, cond)], n)
        pred = adm(batch.targets, batch.cond, batch.mask)
        errs.append(float(log_mse(pred, batch.targets, score)) * n)
    return sum(errs) / sum(p[1] for p in pieces)


@torch.no_grad()
def heldout_dp_mse(dp: DurationPredictor, feats: Stage2Features, prompt_utts: int = 2) -> float:
    """Same utterances as :func:`heldout_adm_mse`, predicted without context."""
    dp.eval()
    by_spk = speaker_streams(feats)
    total, count = 0.0, 0
    for us in by_spk.values():
        for u in us[prompt_utts:]:
            c = feats.ph_cond[id(u)]
            pred = dp(c.unsqueeze(0))[0]
            d = torch.as_tensor(u.durations)
            total += float(log_mse(pred, d)) * len(d)
            count += len(d)
    return total / count


# ------------------------------------------------------------------- reports

REPORT_SCHEMA = "promptlen-report/1"
REPORT_COLUMNS = ("prompt_len", "trials", "code_acc", "dur_log_mse", "timbre_refs", "timbre_cos")


@dataclass
class PromptLenReport:
    rows: list[dict]
    tests: list[dict] = field(default_factory=list)  # paired sign tests between rows

    def dumps(self) -> str:
        lines = [json.dumps({"schema": REPORT_SCHEMA, "columns": list(REPORT_COLUMNS)})]
        lines += [json.dumps({"row": {k: r[k] for k in REPORT_COLUMNS}}) for r in self.rows]
        lines += [json.dumps({"test": t}, sort_keys=True) for t in self.tests]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "PromptLenReport":
        lines = [x for x in text.splitlines() if x.strip()]
        if not lines:
            raise ValueError("empty report")
        head = json.loads(lines[0])
        if head.get("schema") != REPORT_SCHEMA or tuple(head.get("columns", ())) != REPORT_COLUMNS:
            raise ValueError(f"unexpected report header {head}")
        rows, tests = [], []
        for i, line in enumerate(lines[1:], start=2):
            rec = json.loads(line)
            if "row" in rec:
                if set(rec["row"]) != set(REPORT_COLUMNS):
                    raise ValueError(f"line {i}: row columns {sorted(rec['row'])}")
                rows.append(rec["row"])
            elif "test" in rec:
                tests.append(rec["test"])
            else:
                raise ValueError(f"line {i}: neither a row nor a test")
        return cls(rows, tests)

    def table(self) -> str:
        head = f"{'prompt':>7} {'trials':>6} {'code_acc':>9} {'dur_mse':>8} {'refs':>5} {'timbre':>7}"
        body = [f"{r['prompt_len']:>7} {r['trials']:>6} {r['code_acc']:>9.4f} {r['dur_log_mse']:>8.4f} "
                f"{r['timbre_refs']:>5} {r['timbre_cos']:>7.4f}" for r in self.rows]
        tests = [f"{t['metric']} {t['from']} -> {t['to']}: wins {t['wins']} losses {t['losses']} "
                 f"ties {t['ties']} p={t['p']:.3g}" for t in self.tests]
        return "\n".join([head, *body, *tests])


def eval_promptlen(vq: VQTTS, plm: PLM, adm: ADM, feats: Stage2Features, lengths: list[int],
                   timbre_refs: list[int], n_trials: int, window: int, seed: int,
                   center: Tensor) -> tuple[PromptLenReport, dict]:
    """Paired evaluation: every prompt length (and timbre budget) sees the same trials."""
    if len(timbre_refs) != len(lengths):
        raise ValueError("need one timbre budget per prompt length")
    longest = max(lengths)
    trials = draw_trials(feats, n_trials, longest, window, seed)
    ttrials = draw_timbre_trials(feats.utts, n_trials, max(timbre_refs), 4, seed)
    acc = {L: prompt_accuracy(plm, feats, trials, L, window) for L in lengths}
    dur = {L: prompt_duration_mse(adm, feats, trials, L, window) for L in lengths}
    tim = {k: timbre_scores(vq, ttrials, k, center) for k in timbre_refs}
    rows = [{"prompt_len": L, "trials": n_trials, "code_acc": float(acc[L].mean()),
             "dur_log_mse": float(dur[L].mean()), "timbre_refs": k, "timbre_cos": float(tim[k].mean())}
            for L, k in zip(lengths, timbre_refs)]
    tests = []
    for metric, table, keys in (("code_acc", acc, lengths), ("timbre_cos", tim, timbre_refs)):
        pairs = list(zip(keys, keys[1:])) + ([(keys[0], keys[-1])] if len(keys) > 2 else [])
        for a, b in pairs:
            tests.append({"metric": metric, "from": a, "to": b, **sign_test(table[a], table[b])})
    return PromptLenReport(rows, tests), {"acc": acc, "dur": dur, "timbre": tim}
