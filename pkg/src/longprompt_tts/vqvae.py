"""First-stage model: VQ prosody encoder, timbre/content condition, mel decoder.

The adversarial term of the original recipe is not used; training minimises an
L1 reconstruction loss plus the usual codebook and commitment terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.cluster.vq import kmeans2
from torch import Tensor, nn

from . import numerics as nx
from .corpus import Utterance
from .layers import ConvStack, Conv1d, Linear, apply_mask
from .mrte import (
    MRTE,
    AlignmentError,
    CondSeq,
    MRTEConfig,
    collate_refs,
    length_regulate,
    masked_mean_pool,
    pad_stack,
)


class InputTooShortError(ValueError):
    pass


@dataclass
class VQConfig:
    bins: int = 16
    hop: int = 4
    hidden: int = 64
    conv_blocks: int = 5
    kernel: int = 5
    codebook_size: int = 64
    code_dim: int = 32
    commit_weight: float = 0.25
    normalize_codes: bool = True
    center_input: bool = True  # remove each utterance's mean frame before encoding prosody
    mrte: MRTEConfig = field(default_factory=MRTEConfig)


@dataclass
class ProsodyCodeSeq:
    codes: np.ndarray
    hop: int

    def __len__(self) -> int:
        return len(self.codes)


def n_codes(frames: int, hop: int) -> int:
    return math.ceil(frames / hop)


class Codebook(nn.Module):
    """``size`` code vectors; with ``normalize`` the entries live on the unit sphere."""

    def __init__(self, size: int, dim: int, normalize: bool = False):
        super().__init__()
        if size < 2:
            raise ValueError("codebook needs at least two entries")
        self.normalize = normalize
        self.weight = nn.Parameter(torch.randn(size, dim) * 0.1)

    @property
    def entries(self) -> Tensor:
        return F.normalize(self.weight, dim=-1) if self.normalize else self.weight

    def distances(self, h: Tensor) -> Tensor:
        return ((h.unsqueeze(-2) - self.entries) ** 2).sum(dim=-1)

    def quantize(self, h: Tensor, commit_weight: float = 0.25, mask: Tensor | None = None):
        """Nearest entry (ties -> lowest index) with straight-through output.

        Returns ``(index, q_st, {"codebook", "commit"})`` where ``q_st`` has the
        value of the chosen entry and passes gradients to ``h`` unchanged.
        """
        if h.shape[-1] != self.weight.shape[1]:
            raise nx.ShapeError("vector and codebook widths differ")
        idx = torch.argmin(self.distances(h.detach()), dim=-1)
        e = self.entries[idx]
        cb = ((h.detach() - e) ** 2).sum(dim=-1)
        cm = ((h - e.detach()) ** 2).sum(dim=-1)
        if mask is None:
            cb, cm = cb.mean(), cm.mean()
        else:
            m = mask.to(cb.dtype)
            cb = (cb * m).sum() / m.sum()
            cm = (cm * m).sum() / m.sum()
        q_st = e.detach() + (h - h.detach())  # value exactly e, gradient passes to h
        return idx, q_st, {"codebook": cb, "commit": commit_weight * cm}


class ProsodyEncoder(nn.Module):
    """Conv stack then a patchifying conv with stride ``hop``: one vector per code."""

    def __init__(self, cfg: VQConfig):
        super().__init__()
        self.hop = cfg.hop
        self.inp = Linear(cfg.bins, cfg.hidden)
        self.convs = ConvStack(cfg.conv_blocks, cfg.hidden, cfg.kernel)
        self.down = Conv1d(cfg.hidden, cfg.hidden, cfg.hop, stride=cfg.hop, padding=0)
        self.out = Linear(cfg.hidden, cfg.code_dim)
        self.normalize = cfg.normalize_codes
        self.center = cfg.center_input

    def forward(self, mel: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        if self.center:
            # utterance-constant offsets (timbre, recording colour) carry no prosody
            mel = mel - masked_mean_pool(mel, mask).unsqueeze(1)
        t = mel.shape[1]
        pad = (-t) % self.hop
        if pad:
            mel = torch.cat([mel, mel.new_zeros(mel.shape[0], pad, mel.shape[2])], dim=1)
            mask = torch.cat([mask, mask.new_zeros(mask.shape[0], pad)], dim=1)
        h = self.convs(apply_mask(self.inp(mel), mask), mask)
        code_mask = mask[:, :: self.hop]
        out = self.out(self.down(h))
        if self.normalize:
            out = F.normalize(out, dim=-1)
        return apply_mask(out, code_mask), code_mask


class MelDecoder(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        self.hop = cfg.hop
        self.code_in = Linear(cfg.code_dim, cfg.hidden)
        self.cond_in = Linear(cfg.mrte.d_model, cfg.hidden)
        self.convs = ConvStack(cfg.conv_blocks, cfg.hidden, cfg.kernel)
        self.out = Linear(cfg.hidden, cfg.bins)

    def forward(self, q: Tensor, cond: Tensor, mask: Tensor) -> Tensor:
        t = cond.shape[1]
        up = q.repeat_interleave(self.hop, dim=1)
        if up.shape[1] < t:
            up = torch.cat([up, up[:, -1:].expand(-1, t - up.shape[1], -1)], dim=1)
        x = self.code_in(up[:, :t]) + self.cond_in(cond)
        return apply_mask(self.out(self.convs(apply_mask(x, mask), mask)), mask)

    @property
    def radius(self) -> int:
        return self.convs.radius


@dataclass
class Stage1Batch:
    mel: Tensor
    mask: Tensor
    ph: Tensor
    ph_mask: Tensor
    durations: Tensor
    refs: tuple


def collate_stage1(items: list[tuple[Utterance, list[np.ndarray]]], dtype=torch.float32) -> Stage1Batch:
    mel, mask = pad_stack([torch.as_tensor(u.mel, dtype=dtype) for u, _ in items])
    ph, ph_mask = pad_stack([torch.as_tensor(u.phonemes) for u, _ in items])
    dur, _ = pad_stack([torch.as_tensor(u.durations) for u, _ in items])
    refs = collate_refs([r for _, r in items], dtype)
    return Stage1Batch(mel, mask, ph, ph_mask, dur, refs)


class VQTTS(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ProsodyEncoder(cfg)
        self.codebook = Codebook(cfg.codebook_size, cfg.code_dim, cfg.normalize_codes)
        self.mrte = MRTE(cfg.mrte)
        self.decoder = MelDecoder(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.codebook.weight.dtype

    def forward_batch(self, b: Stage1Batch, quantize: bool = True) -> tuple[Tensor, dict[str, Tensor], Tensor]:
        """Reconstruction and loss terms; ``quantize=False`` bypasses the codebook
        (continuous warm-up before the codebook is fitted)."""
        pre_q, code_mask = self.encoder(b.mel, b.mask)
        if quantize:
            idx, q_st, vq = self.codebook.quantize(pre_q, self.cfg.commit_weight, code_mask)
        else:
            zero = pre_q.new_zeros(())
            idx, q_st, vq = None, pre_q, {"codebook": zero, "commit": zero}
        ph_vec, _ = self.mrte.phoneme_states(b.ph, b.ph_mask, *b.refs)
        cond, _ = length_regulate(ph_vec, b.durations, b.ph_mask, b.mel.shape[1])
        out = self.decoder(q_st, cond, b.mask)
        losses = {"recon_l1": nx.l1(out, b.mel, b.mask), **vq}
        return out, losses, idx

    # ---- single-item API

    def encode_prosody(self, mel) -> tuple[Tensor, ProsodyCodeSeq]:
        m = torch.as_tensor(np.asarray(mel), dtype=self.dtype)
        if m.shape[0] < self.cfg.hop:
            raise InputTooShortError(f"{m.shape[0]} frames is shorter than hop {self.cfg.hop}")
        pre_q, _ = self.encoder(m.unsqueeze(0), torch.ones(1, m.shape[0], dtype=torch.bool))
        idx, _, _ = self.codebook.quantize(pre_q[0])
        return pre_q[0], ProsodyCodeSeq(idx.numpy().astype(np.int64), self.cfg.hop)

    def quantize(self, h: Tensor):
        idx, q, losses = self.codebook.quantize(h, self.cfg.commit_weight)
        return int(idx), q, losses

    def decode_mel(self, codes: ProsodyCodeSeq | np.ndarray, cond: CondSeq) -> Tensor:
        c = np.asarray(codes.codes if isinstance(codes, ProsodyCodeSeq) else codes)
        span = len(c) * self.cfg.hop
        if not cond.frames - self.cfg.hop < span < cond.frames + self.cfg.hop:
            raise AlignmentError(f"{len(c)} codes do not cover {cond.frames} frames at hop {self.cfg.hop}")
        q = self.codebook.entries[torch.as_tensor(c, dtype=torch.long)].unsqueeze(0)
        mask = torch.ones(1, cond.frames, dtype=torch.bool)
        return self.decoder(q, cond.hidden.unsqueeze(0), mask)[0]

    def encode_batch_codes(self, utts: list[Utterance]) -> list[np.ndarray]:
        with torch.no_grad():
            mel, mask = pad_stack([torch.as_tensor(u.mel, dtype=self.dtype) for u in utts])
            pre_q, _ = self.encoder(mel, mask)
            idx = torch.argmin(self.codebook.distances(pre_q), dim=-1)
        return [idx[i, : n_codes(u.frames, self.cfg.hop)].numpy().astype(np.int64)
                for i, u in enumerate(utts)]

    @torch.no_grad()
    def init_codebook(self, b: Stage1Batch, seed: int = 0) -> None:
        """Fit the codebook to encoder outputs of a data batch with k-means."""
        pre_q, code_mask = self.encoder(b.mel, b.mask)
        vecs = pre_q[code_mask].double().numpy()
        k = self.codebook.weight.shape[0]
        centroids, _ = kmeans2(vecs, k, minit="++", seed=seed)
        self.codebook.weight.copy_(torch.as_tensor(centroids, dtype=self.dtype))


class NonFiniteLossError(FloatingPointError):
    pass


def vq_train_step(model: VQTTS, opt: nx.Adam, batch: Stage1Batch, lr: float,
                  quantize: bool = True) -> dict[str, float]:
    """One optimizer step on the stage-1 objective; returns loss components."""
    _, losses, _ = model.forward_batch(batch, quantize)
    total = losses["recon_l1"] + losses["codebook"] + losses["commit"]
    if not torch.isfinite(total):
        raise NonFiniteLossError({k: float(v) for k, v in losses.items()})
    opt.zero_grad()
    total.backward()
    opt.step(lr)
    return {k: float(v.detach()) for k, v in losses.items()}
