"""Synthetic multi-speaker speech-feature corpora.

Each synthetic "mel" frame is a sum of

* a phoneme imprint shared by every speaker (content),
* the speaker's timbre vector plus a per-utterance jitter, and a
  speaker-specific coloration of each phoneme class (timbre),
* a pitch bump whose position is driven by a speaker-specific Markov chain over
  discrete prosody states, one state per ``hop`` frames (prosody),
* seeded Gaussian noise.

Speakers draw their Markov transition matrix from a small set of shared
templates, so a longer stretch of a speaker's prosody is strictly more
informative about how it continues.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CorpusFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class CorpusVersionError(CorpusFormatError):
    pass


class BatchError(ValueError):
    pass


@dataclass
class CorpusConfig:
    seed: int = 0
    n_speakers: int = 8
    utts_per_speaker: int = 16
    bins: int = 16
    n_phonemes: int = 32
    n_states: int = 8
    n_patterns: int = 4
    n_classes: int = 4
    hop: int = 4
    min_phonemes: int = 8
    max_phonemes: int = 16
    noise: float = 0.02
    timbre_jitter: float = 0.15
    coloration: float = 0.4


@dataclass
class SpeakerStyle:
    pitch_base: float
    pitch_range: float
    tempo: float
    timbre_vec: np.ndarray
    pattern: int = 0
    coloration: np.ndarray | None = None

    def to_json(self) -> dict:
        return {
            "pitch_base": self.pitch_base,
            "pitch_range": self.pitch_range,
            "tempo": self.tempo,
            "timbre_vec": [float(v) for v in self.timbre_vec],
            "pattern": self.pattern,
            "coloration": None if self.coloration is None else self.coloration.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SpeakerStyle":
        col = d.get("coloration")
        return cls(float(d["pitch_base"]), float(d["pitch_range"]), float(d["tempo"]),
                   np.asarray(d["timbre_vec"], dtype=np.float64), int(d["pattern"]),
                   None if col is None else np.asarray(col, dtype=np.float64))


@dataclass
class Utterance:
    speaker_id: int
    phonemes: np.ndarray
    durations: np.ndarray
    mel: np.ndarray
    prosody: np.ndarray | None = None  # generator state per hop block, if known

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.mel = np.asarray(self.mel, dtype=np.float32)
        if self.prosody is not None:
            self.prosody = np.asarray(self.prosody, dtype=np.int64)
        if len(self.phonemes) == 0:
            raise ValueError("utterance has no phonemes")
        if len(self.durations) != len(self.phonemes):
            raise ValueError("one duration per phoneme required")
        if (self.durations < 1).any():
            raise ValueError("durations must be >= 1")
        if int(self.durations.sum()) != self.mel.shape[0]:
            raise ValueError("sum(durations) must equal mel frames")

    @property
    def frames(self) -> int:
        return self.mel.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        same_prosody = (self.prosody is None and other.prosody is None) or (
            self.prosody is not None and other.prosody is not None
            and np.array_equal(self.prosody, other.prosody))
        return (self.speaker_id == other.speaker_id
                and np.array_equal(self.phonemes, other.phonemes)
                and np.array_equal(self.durations, other.durations)
                and np.array_equal(self.mel, other.mel) and same_prosody)


@dataclass
class Corpus:
    bins: int
    n_phonemes: int
    utterances: list[Utterance]
    hop: int = 4
    speakers: dict[int, SpeakerStyle] = field(default_factory=dict)

    def by_speaker(self) -> dict[int, list[Utterance]]:
        out: dict[int, list[Utterance]] = {}
        for u in self.utterances:
            out.setdefault(u.speaker_id, []).append(u)
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.bins == other.bins and self.n_phonemes == other.n_phonemes
                and self.hop == other.hop and self.utterances == other.utterances
                and self.speakers.keys() == other.speakers.keys()
                and all(self.speakers[k].to_json() == other.speakers[k].to_json() for k in self.speakers))


# ----------------------------------------------------------------- generator

class World:
    """Speaker-independent tables of a synthetic language, fixed by a seed."""

    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        self.content = rng.normal(0.0, 0.4, size=(cfg.n_phonemes, cfg.bins))
        self.base_dur = rng.integers(2, 6, size=cfg.n_phonemes).astype(np.float64)
        self.phone_class = rng.integers(0, cfg.n_classes, size=cfg.n_phonemes)
        s = cfg.n_states
        self.templates = np.empty((cfg.n_patterns, s, s))
        for k in range(cfg.n_patterns):
            for i in range(s):
                a, b = rng.choice(s, size=2, replace=False)
                row = np.full(s, 0.15 / (s - 2))
                row[a], row[b] = 0.65, 0.2
                self.templates[k, i] = row
        self.stationary = np.stack([stationary_distribution(p) for p in self.templates])

    def sample_style(self, rng: np.random.Generator) -> SpeakerStyle:
        cfg = self.cfg
        return SpeakerStyle(
            pitch_base=float(rng.uniform(1.0, 4.0)),
            pitch_range=float(rng.uniform(7.0, 10.0)),
            tempo=float(rng.uniform(0.6, 1.6)),
            timbre_vec=rng.normal(0.0, 0.5, size=cfg.bins),
            pattern=int(rng.integers(cfg.n_patterns)),
            coloration=rng.normal(0.0, cfg.coloration, size=(cfg.n_classes, cfg.bins)),
        )

    def check_style(self, style: SpeakerStyle) -> None:
        cfg = self.cfg
        if not (0.0 <= style.pitch_base and style.pitch_range > 0
                and style.pitch_base + style.pitch_range <= cfg.bins - 1):
            raise ValueError("pitch contour must stay inside the bin range")
        if not 0.25 <= style.tempo <= 4.0:
            raise ValueError("tempo must lie in [0.25, 4]")
        if len(style.timbre_vec) != cfg.bins:
            raise ValueError("timbre_vec must have one entry per bin")
        if not 0 <= style.pattern < cfg.n_patterns:
            raise ValueError("unknown prosody pattern")

    def pitch_center(self, state: np.ndarray, style: SpeakerStyle) -> np.ndarray:
        return style.pitch_base + style.pitch_range * state / (self.cfg.n_states - 1)

    def render_mel(self, phonemes: np.ndarray, durations: np.ndarray, states: np.ndarray,
                   style: SpeakerStyle, jitter: np.ndarray | None = None,
                   noise: np.ndarray | None = None) -> np.ndarray:
        """Deterministic mel grid for the given content, timing, prosody and style."""
        cfg = self.cfg
        frame_ph = np.repeat(phonemes, durations)
        frames = len(frame_ph)
        mel = self.content[frame_ph] + style.timbre_vec
        if style.coloration is not None:
            mel = mel + style.coloration[self.phone_class[frame_ph]]
        if jitter is not None:
            mel = mel + jitter
        centers = np.repeat(self.pitch_center(states, style), cfg.hop)[:frames]
        bins = np.arange(cfg.bins)
        mel = mel + np.exp(-0.5 * ((bins[None, :] - centers[:, None]) / 0.8) ** 2)
        if noise is not None:
            mel = mel + noise
        return mel.astype(np.float32)

    def sample_states(self, rng: np.random.Generator, pattern: int, n: int) -> np.ndarray:
        trans = self.templates[pattern]
        out = np.empty(n, dtype=np.int64)
        out[0] = rng.choice(self.cfg.n_states, p=self.stationary[pattern])
        for t in range(1, n):
            out[t] = rng.choice(self.cfg.n_states, p=trans[out[t - 1]])
        return out


def stationary_distribution(trans: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(trans.T)
    p = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return p / p.sum()


def gen_speaker(seed: int, style: SpeakerStyle, world: World, n_utts: int,
                speaker_id: int = 0) -> list[Utterance]:
    """Utterances of one synthetic speaker; a pure function of its arguments."""
    world.check_style(style)
    cfg = world.cfg
    rng = np.random.default_rng(seed)
    utts = []
    for _ in range(n_utts):
        n = int(rng.integers(cfg.min_phonemes, cfg.max_phonemes + 1))
        ph = rng.integers(0, cfg.n_phonemes, size=n)
        raw = world.base_dur[ph] * style.tempo * np.exp(rng.normal(0.0, 0.15, size=n))
        dur = np.maximum(1, np.floor(raw + 0.5)).astype(np.int64)
        dur[-1] += (-int(dur.sum())) % cfg.hop  # whole number of prosody blocks
        frames = int(dur.sum())
        states = world.sample_states(rng, style.pattern, frames // cfg.hop)
        jitter = rng.normal(0.0, cfg.timbre_jitter, size=cfg.bins)
        noise = rng.normal(0.0, cfg.noise, size=(frames, cfg.bins))
        mel = world.render_mel(ph, dur, states, style, jitter, noise)
        utts.append(Utterance(speaker_id, ph, dur, mel, states))
    return utts


def gen_corpus(cfg: CorpusConfig, world: World | None = None, first_speaker: int = 0) -> Corpus:
    world = World(cfg) if world is None else world
    seeds = np.random.SeedSequence([cfg.seed, first_speaker]).spawn(cfg.n_speakers)
    utts, speakers = [], {}
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        style = world.sample_style(rng)
        sid = first_speaker + i
        speakers[sid] = style
        utts.extend(gen_speaker(int(rng.integers(2**63)), style, world, cfg.utts_per_speaker, sid))
    return Corpus(cfg.bins, cfg.n_phonemes, utts, cfg.hop, speakers)


def bigram_tv(states: list[np.ndarray], trans: np.ndarray, init: np.ndarray) -> float:
    """Total variation between empirical bigram frequencies and ``init x trans``."""
    s = trans.shape[0]
    counts = np.zeros((s, s))
    for seq in states:
        np.add.at(counts, (seq[:-1], seq[1:]), 1)
    emp = counts / counts.sum()
    return 0.5 * float(np.abs(emp - init[:, None] * trans).sum())


def prompt_entropy_curve(world: World, lengths, n_samples: int, seed: int = 0) -> np.ndarray:
    """Monte-Carlo estimates (nats) of H(next state | previous L states) for each L.

    The speaker's template is unknown, so the exact Bayesian predictive over
    templates is scored. All lengths share the same sampled sequences (the last
    L states before a common next state); the chain is stationary, so each
    estimate is unbiased and their differences have low variance.
    """
    lengths = [int(n) for n in lengths]
    rng = np.random.default_rng(seed)
    tmpl, stat = world.templates, world.stationary
    log_t = np.log(tmpl)
    longest = max(lengths)
    total = np.zeros(len(lengths))
    for _ in range(n_samples):
        k = int(rng.integers(len(tmpl)))
        seq = world.sample_states(rng, k, longest + 1)
        nxt = seq[-1]
        for j, n in enumerate(lengths):
            ctx = seq[longest - n:longest]
            logpost = np.log(stat[:, ctx[0]]) + log_t[:, ctx[:-1], ctx[1:]].sum(axis=1)
            post = np.exp(logpost - logpost.max())
            post /= post.sum()
            total[j] -= math.log(float(post @ tmpl[:, ctx[-1], nxt]))
    return total / n_samples


# ------------------------------------------------------------------ batching

@dataclass
class SpeakerBatch:
    """Concatenated utterances, grouped so each speaker forms one contiguous block."""

    utterances: list[Utterance]
    max_frames: int
    code_targets: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return sum(u.frames for u in self.utterances)

    @property
    def mel(self) -> np.ndarray:
        return np.concatenate([u.mel for u in self.utterances], axis=0)

    @property
    def segment_table(self) -> list[tuple[int, int, int]]:
        return speaker_segments([u.frames for u in self.utterances],
                                [u.speaker_id for u in self.utterances])

    @property
    def attn_mask(self) -> np.ndarray:
        return block_causal(self.block_ids([u.frames for u in self.utterances]))

    def block_ids(self, lengths: list[int]) -> np.ndarray:
        """Speaker-block index per position, given per-utterance lengths in any unit."""
        return speaker_block_ids(lengths, [u.speaker_id for u in self.utterances])


def speaker_segments(lengths: list[int], speakers: list[int]) -> list[tuple[int, int, int]]:
    segs: list[tuple[int, int, int]] = []
    pos = 0
    for n, spk in zip(lengths, speakers):
        if segs and segs[-1][0] == spk:
            segs[-1] = (spk, segs[-1][1], pos + n)
        else:
            segs.append((spk, pos, pos + n))
        pos += n
    return segs


def speaker_block_ids(lengths: list[int], speakers: list[int]) -> np.ndarray:
    ids = np.empty(sum(lengths), dtype=np.int64)
    for b, (_, start, end) in enumerate(speaker_segments(lengths, speakers)):
        ids[start:end] = b
    return ids


def block_causal(block_ids: np.ndarray) -> np.ndarray:
    same = block_ids[:, None] == block_ids[None, :]
    return same & np.tri(len(block_ids), dtype=bool)


def build_batch(utts: list[Utterance], max_frames: int, size_of=None) -> SpeakerBatch:
    """Greedy first-fit packing led by the first utterance's speaker.

    All of the lead speaker's utterances are placed first; remaining room is
    filled with other speakers' utterances, grouped by speaker in order of
    first appearance. Utterances are never split. ``size_of`` measures an
    utterance (default: frames), e.g. to cap phonemes instead.
    """
    size_of = (lambda u: u.frames) if size_of is None else size_of
    if not utts:
        raise BatchError("no utterances to batch")
    for u in utts:
        if size_of(u) > max_frames:
            raise BatchError(f"utterance of size {size_of(u)} exceeds max_frames={max_frames}")
    groups: dict[int, list[Utterance]] = {}
    for u in utts:
        groups.setdefault(u.speaker_id, []).append(u)
    chosen, total = [], 0
    for group in groups.values():
        for u in group:
            if total + size_of(u) <= max_frames:
                chosen.append(u)
                total += size_of(u)
    return SpeakerBatch(chosen, max_frames)


def iter_batches(utts: list[Utterance], max_frames: int) -> list[SpeakerBatch]:
    queue = list(utts)
    out = []
    while queue:
        b = build_batch(queue, max_frames)
        taken = {id(u) for u in b.utterances}
        queue = [u for u in queue if id(u) not in taken]
        out.append(b)
    return out


# --------------------------------------------------------------- persistence

def _encode_mel(mel: np.ndarray) -> str:
    return base64.b64encode(mel.astype("<f4").tobytes()).decode("ascii")


def _decode_mel(s: str, bins: int) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    if len(raw) % (4 * bins):
        raise ValueError("mel payload is not a whole number of rows")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, bins).astype(np.float32)


def dumps_corpus(corpus: Corpus) -> str:
    header = {
        "version": FORMAT_VERSION,
        "bins": corpus.bins,
        "V_ph": corpus.n_phonemes,
        "hop": corpus.hop,
        "n_utterances": len(corpus.utterances),
        "speakers": {str(k): v.to_json() for k, v in sorted(corpus.speakers.items())},
    }
    lines = [json.dumps(header, sort_keys=True)]
    for u in corpus.utterances:
        rec = {
            "speaker_id": u.speaker_id,
            "phonemes": u.phonemes.tolist(),
            "durations": u.durations.tolist(),
            "mel": _encode_mel(u.mel),
        }
        if u.prosody is not None:
            rec["prosody"] = u.prosody.tolist()
        lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def loads_corpus(text: str) -> Corpus:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusFormatError("empty corpus file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"bad header: {e.msg} at offset {e.pos}", 1) from None
    if not isinstance(header, dict) or "version" not in header:
        raise CorpusFormatError("header lacks a version field", 1)
    if header["version"] != FORMAT_VERSION:
        raise CorpusVersionError(f"unsupported corpus version {header['version']!r}", 1)
    try:
        bins, n_ph = int(header["bins"]), int(header["V_ph"])
        hop, expected = int(header.get("hop", 4)), int(header["n_utterances"])
        speakers = {int(k): SpeakerStyle.from_json(v) for k, v in header.get("speakers", {}).items()}
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusFormatError(f"bad header field: {e}", 1) from None
    utts = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"{e.msg} at offset {e.pos}", i) from None
        try:
            ph = np.asarray(rec["phonemes"], dtype=np.int64)
            if ph.size and (ph.min() < 0 or ph.max() >= n_ph):
                raise ValueError("phoneme id outside vocabulary")
            utts.append(Utterance(int(rec["speaker_id"]), ph, rec["durations"],
                                  _decode_mel(rec["mel"], bins), rec.get("prosody")))
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusFormatError(f"bad utterance record: {e}", i) from None
    if len(utts) != expected:
        raise CorpusFormatError(f"expected {expected} utterances, found {len(utts)} (truncated?)",
                                len(lines) + 1)
    return Corpus(bins, n_ph, utts, hop, speakers)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(dumps_corpus(corpus), encoding="utf-8")


def load_corpus(path: str | Path) -> Corpus:
    return loads_corpus(Path(path).read_text(encoding="utf-8"))
