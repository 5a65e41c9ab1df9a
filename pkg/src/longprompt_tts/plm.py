"""Decoder-only prosody language model over VQ prosody codes.

Position ``t`` sees the previous code of its own speaker block (or a learned
begin vector at a block start) plus the frame-rate condition average-pooled to
code rate, and predicts code ``t``. Training streams are whole speakers
concatenated along time, so at inference any amount of earlier speech can act
as the prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from . import numerics as nx
from .corpus import SpeakerBatch, speaker_block_ids
from .layers import CausalDecoder, ContextLengthError, Embedding, Linear, block_causal_mask
from .mrte import CondSeq, pad_stack


@dataclass
class PLMConfig:
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    K: int = 64
    max_context: int = 512
    conv_kernel: int = 1
    d_cond: int = 64
    hop: int = 4


def pool_cond(hidden: Tensor, hop: int) -> Tensor:
    """Average ``[frames, d]`` over consecutive ``hop``-frame blocks (last may be partial)."""
    frames = hidden.shape[0]
    n = math.ceil(frames / hop)
    pad = n * hop - frames
    counts = torch.full((n, 1), float(hop), dtype=hidden.dtype)
    if pad:
        hidden = torch.cat([hidden, hidden.new_zeros(pad, hidden.shape[1])], dim=0)
        counts[-1] = hop - pad
    return hidden.view(n, hop, -1).sum(dim=1) / counts


def block_layout(mask: Tensor) -> tuple[Tensor, Tensor]:
    """Block-start flags and within-block positions implied by a block-causal mask."""
    t = mask.shape[-1]
    starts = torch.ones(mask.shape[:-1], dtype=torch.bool)
    if t > 1:
        idx = torch.arange(1, t)
        starts[..., 1:] = ~mask[..., idx, idx - 1]
    first = mask.to(torch.int64).argmax(dim=-1)
    positions = torch.arange(t) - first
    return starts, positions


def shift_in(x: Tensor, bos: Tensor, starts: Tensor) -> Tensor:
    """Input at ``t`` is ``x[t-1]``, or ``bos`` where a block starts."""
    prev = torch.cat([x.new_zeros(*x.shape[:-2], 1, x.shape[-1]), x[..., :-1, :]], dim=-2)
    return torch.where(starts.unsqueeze(-1), bos.expand_as(prev), prev)


class PLM(nn.Module):
    def __init__(self, cfg: PLMConfig):
        super().__init__()
        self.cfg = cfg
        self.code_emb = Embedding(cfg.K, cfg.d_model, std=0.5)
        self.bos = nn.Parameter(torch.randn(cfg.d_model) * 0.5)
        self.cond_in = Linear(cfg.d_cond, cfg.d_model)
        self.decoder = CausalDecoder(cfg.d_model, cfg.layers, cfg.heads, cfg.max_context, cfg.conv_kernel)
        self.head = Linear(cfg.d_model, cfg.K)
        with torch.no_grad():
            self.head.weight.mul_(0.1)

    def forward(self, codes: Tensor, cond: Tensor, mask: Tensor) -> Tensor:
        """Logits ``[..., T, K]`` for codes ``[..., T]``, pooled cond ``[..., T, d_cond]``,
        and a speaker-block causal mask ``[..., T, T]``."""
        squeeze = codes.dim() == 1
        if squeeze:
            codes, cond, mask = codes.unsqueeze(0), cond.unsqueeze(0), mask.unsqueeze(0)
        if codes.shape[-1] > self.cfg.max_context:
            raise ContextLengthError(f"{codes.shape[-1]} codes exceed context {self.cfg.max_context}")
        starts, positions = block_layout(mask)
        x = shift_in(self.code_emb(codes), self.bos, starts) + self.cond_in(cond)
        logits = self.head(self.decoder(x, positions, mask))
        return logits[0] if squeeze else logits


# ------------------------------------------------------------------ training

@dataclass
class SeqBatch:
    """Padded batch of concatenated speaker streams at one time resolution."""

    targets: Tensor  # [B, T] (codes or durations)
    cond: Tensor  # [B, T, d_cond]
    mask: Tensor  # [B, T, T]
    valid: Tensor  # [B, T]


def stack_streams(streams: list[tuple[Tensor, Tensor, np.ndarray]]) -> SeqBatch:
    """``streams`` holds ``(targets [T], cond [T, d], block_ids [T])`` per row."""
    targets, valid = pad_stack([s[0] for s in streams])
    cond, _ = pad_stack([s[1] for s in streams])
    t = targets.shape[1]
    blocks = torch.full((len(streams), t), -1, dtype=torch.long)
    for i, (_, _, ids) in enumerate(streams):
        blocks[i, : len(ids)] = torch.as_tensor(ids)
    # padding gets distinct ids so it never joins a real block
    blocks = torch.where(valid, blocks, -1 - torch.arange(t).expand_as(blocks))
    return SeqBatch(targets, cond, block_causal_mask(blocks, valid), valid)


def batch_stream(batch: SpeakerBatch, per_utt: dict[int, tuple[np.ndarray, Tensor]]):
    """Concatenate per-utterance ``(targets, cond)`` in batch order, keyed by ``id(utt)``."""
    parts = [per_utt[id(u)] for u in batch.utterances]
    targets = torch.as_tensor(np.concatenate([p[0] for p in parts]))
    cond = torch.cat([p[1] for p in parts], dim=0)
    ids = speaker_block_ids([len(p[0]) for p in parts], [u.speaker_id for u in batch.utterances])
    return targets, cond, ids


def plm_loss(plm: PLM, b: SeqBatch) -> Tensor:
    logits = plm(b.targets, b.cond, b.mask)
    return nx.cross_entropy(logits, b.targets, b.valid)


@torch.no_grad()
def teacher_forced_accuracy(plm: PLM, b: SeqBatch, score: Tensor | None = None) -> Tensor:
    """Per-row fraction of positions whose argmax equals the target."""
    logits = plm(b.targets, b.cond, b.mask)
    hit = (logits.argmax(dim=-1) == b.targets) & b.valid
    keep = b.valid if score is None else b.valid & score
    return (hit & keep).sum(dim=-1).to(torch.float64) / keep.sum(dim=-1).clamp_min(1)


# ---------------------------------------------------------------- inference

class DecodeContext:
    """Incremental (key/value cached) decoding state over one prompt.

    ``cond`` covers prompt and continuation at code rate; the prompt codes are
    the history the continuation is conditioned on.
    """

    def __init__(self, plm: PLM, prompt_codes, cond: Tensor):
        if cond.shape[0] > plm.cfg.max_context:
            raise ContextLengthError(f"{cond.shape[0]} positions exceed context {plm.cfg.max_context}")
        self.plm = plm
        self.cond = cond
        self.history = [int(c) for c in np.asarray(prompt_codes).reshape(-1)]
        self.prompt_len = len(self.history)
        self.cache = plm.decoder.new_cache()
        self.fed = 0
        self._logits: Tensor | None = None

    @torch.no_grad()
    def next_logits(self) -> Tensor:
        t = len(self.history)
        if t >= self.cond.shape[0]:
            raise ContextLengthError("no condition left for another position")
        p = self.plm
        while self.fed <= t:
            if self.fed == 0:
                x = p.bos
            else:
                x = p.code_emb(torch.tensor(self.history[self.fed - 1]))
            x = (x + p.cond_in(self.cond[self.fed:self.fed + 1])[0]).view(1, 1, -1)
            self._logits = p.head(p.decoder.step(x, self.fed, self.cache))[0, 0]
            self.fed += 1
        return self._logits

    def push(self, token: int) -> None:
        self.history.append(int(token))

    @property
    def generated(self) -> list[int]:
        return self.history[self.prompt_len:]


def _pooled(cond: CondSeq | Tensor, hop: int) -> Tensor:
    return pool_cond(cond.hidden, hop) if isinstance(cond, CondSeq) else cond


def mix_step(contexts: list[DecodeContext], weights: list[float]) -> tuple[int, Tensor]:
    """Convex mixture of next-code distributions; greedy token fed to every context."""
    p_mix = None
    for ctx, w in zip(contexts, weights):
        p = w * nx.softmax(ctx.next_logits())
        p_mix = p if p_mix is None else p_mix + p
    token = int(torch.argmax(p_mix))
    for ctx in contexts:
        ctx.push(token)
    return token, p_mix


def plm_generate(plm: PLM, prompt_codes, prompt_cond: CondSeq | Tensor,
                 target_cond: CondSeq | Tensor) -> np.ndarray:
    """Greedy (top-1) continuation: one code per ``hop`` target frames."""
    hop = plm.cfg.hop
    pc, tc = _pooled(prompt_cond, hop), _pooled(target_cond, hop)
    prompt = np.asarray(getattr(prompt_codes, "codes", prompt_codes))
    if len(prompt) != pc.shape[0]:
        raise ValueError("prompt codes and prompt condition disagree in length")
    steps = tc.shape[0]
    if len(prompt) + steps > plm.cfg.max_context:
        raise ContextLengthError(f"prompt {len(prompt)} + target {steps} exceed context {plm.cfg.max_context}")
    ctx = DecodeContext(plm, prompt, torch.cat([pc, tc], dim=0))
    for _ in range(steps):
        mix_step([ctx], [1.0])
    return np.asarray(ctx.generated, dtype=np.int64)
