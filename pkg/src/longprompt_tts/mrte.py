"""Multi-reference timbre encoder.

Reference mels of one speaker are joined along time and encoded into acoustic
hidden states; phoneme-level content states query them through a
mel-to-phoneme attention; a global encoder pools time-invariant timbre over all
reference frames; the concatenation is projected, and a length regulator
expands it to frame rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import numerics as nx
from .layers import (ConvStack, Embedding, LayerNorm, Linear, MultiHeadAttention,
                     TransformerLayer, apply_mask, sinusoid_table)


class AlignmentError(ValueError):
    pass


@dataclass
class CondSeq:
    """Frame-rate condition: content plus timbre, one row per output frame."""

    hidden: Tensor  # [frames, d_model]

    @property
    def frames(self) -> int:
        return self.hidden.shape[0]


def _as_tensor(x, dtype) -> Tensor:
    return x.to(dtype) if isinstance(x, Tensor) else torch.as_tensor(np.asarray(x), dtype=dtype)


def pad_stack(seqs: Sequence[Tensor], length: int | None = None, value: float = 0.0) -> tuple[Tensor, Tensor]:
    """Right-pad ``[T_i, ...]`` tensors into ``[B, T, ...]`` plus a ``[B, T]`` mask."""
    t = max(s.shape[0] for s in seqs) if length is None else length
    out = seqs[0].new_full((len(seqs), t, *seqs[0].shape[1:]), value)
    mask = torch.zeros(len(seqs), t, dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return out, mask


def length_regulate(ph_vec: Tensor, durations: Tensor, ph_mask: Tensor | None = None,
                    frames: int | None = None) -> tuple[Tensor, Tensor]:
    """Repeat each phoneme vector ``durations[i]`` times. Batched: ``[B, N, d]``."""
    rows = []
    for b in range(ph_vec.shape[0]):
        n = ph_vec.shape[1] if ph_mask is None else int(ph_mask[b].sum())
        d = durations[b, :n]
        if (d < 1).any():
            raise AlignmentError("durations must be >= 1")
        rows.append(torch.repeat_interleave(ph_vec[b, :n], d, dim=0))
    return pad_stack(rows, frames)


def masked_mean_pool(x: Tensor, mask: Tensor) -> Tensor:
    """Temporal mean of ``[..., T, d]`` over frames where ``mask`` is set."""
    m = mask.to(x.dtype).unsqueeze(-1)
    return (x * m).sum(dim=-2) / m.sum(dim=-2)


class MelEncoder(nn.Module):
    def __init__(self, bins: int, hidden: int, d_out: int, blocks: int, kernel: int):
        super().__init__()
        self.inp = Linear(bins, hidden)
        self.convs = ConvStack(blocks, hidden, kernel)
        self.out = Linear(hidden, d_out)

    def forward(self, mel: Tensor, mask: Tensor) -> Tensor:
        h = apply_mask(self.inp(mel), mask)
        return apply_mask(self.out(self.convs(h, mask)), mask)


class ContentEncoder(nn.Module):
    def __init__(self, n_phonemes: int, d_model: int, layers: int, heads: int, kernel: int):
        super().__init__()
        self.n_phonemes = n_phonemes
        self.emb = Embedding(n_phonemes, d_model)
        self.layers = nn.ModuleList(TransformerLayer(d_model, heads, 2 * d_model, kernel)
                                    for _ in range(layers))
        self.norm = LayerNorm(d_model)
        self.register_buffer("pos", sinusoid_table(512, d_model), persistent=False)

    def forward(self, ph: Tensor, mask: Tensor) -> Tensor:
        x = self.emb(ph) + self.pos[: ph.shape[1]].to(self.emb.weight.dtype)
        x = apply_mask(x, mask)
        attn_mask = mask.unsqueeze(1).expand(-1, ph.shape[1], -1)
        for layer in self.layers:
            x = layer(x, attn_mask, mask)
        return apply_mask(self.norm(x), mask)


class GlobalTimbreEncoder(nn.Module):
    """Conv encoder followed by temporal average pooling over every reference frame.

    Each reference is encoded on its own, so pooling over ``{A, A}`` equals
    pooling over ``{A}``.
    """

    def __init__(self, bins: int, hidden: int, d_out: int, blocks: int, kernel: int):
        super().__init__()
        self.enc = MelEncoder(bins, hidden, d_out, blocks, kernel)

    def forward(self, refs: Tensor, mask: Tensor, owner: Tensor, n_items: int) -> Tensor:
        feats = self.enc(refs, mask) * mask.unsqueeze(-1).to(refs.dtype)
        sums = feats.new_zeros(n_items, feats.shape[-1]).index_add(0, owner, feats.sum(dim=1))
        counts = feats.new_zeros(n_items).index_add(0, owner, mask.sum(dim=1).to(feats.dtype))
        return sums / counts.unsqueeze(-1)


@dataclass
class MRTEConfig:
    bins: int = 16
    n_phonemes: int = 32
    hidden: int = 64
    d_model: int = 64
    d_global: int = 32
    conv_blocks: int = 3
    kernel: int = 5
    content_layers: int = 2
    content_heads: int = 2
    attn_heads: int = 1
    use_attention: bool = True  # False: global pooled encoder only (ablation baseline)


class MRTE(nn.Module):
    def __init__(self, cfg: MRTEConfig):
        super().__init__()
        self.cfg = cfg
        self.content = ContentEncoder(cfg.n_phonemes, cfg.d_model, cfg.content_layers,
                                      cfg.content_heads, cfg.kernel)
        self.global_enc = GlobalTimbreEncoder(cfg.bins, cfg.hidden, cfg.d_global,
                                              cfg.conv_blocks, cfg.kernel)
        if cfg.use_attention:
            self.mel_enc = MelEncoder(cfg.bins, cfg.hidden, cfg.d_model, cfg.conv_blocks, cfg.kernel)
            self.attn = MultiHeadAttention(cfg.d_model, cfg.attn_heads)
        self.proj = Linear(cfg.d_model + cfg.d_global, cfg.d_model)

    @property
    def dtype(self) -> torch.dtype:
        return self.proj.weight.dtype

    # ---- batched path used in training

    def phoneme_states(self, ph: Tensor, ph_mask: Tensor, ref_mel: Tensor | None,
                       ref_mask: Tensor | None, ge_mel: Tensor, ge_mask: Tensor,
                       ge_owner: Tensor) -> tuple[Tensor, Tensor]:
        """Projected phoneme-level vectors ``[B, N, d]`` and content states."""
        h_content = self.content(ph, ph_mask)
        g = self.global_enc(ge_mel, ge_mask, ge_owner, ph.shape[0])
        x = h_content
        if self.cfg.use_attention:
            h_mel = self.mel_enc(ref_mel, ref_mask)
            x = x + self.attn(h_content, h_mel, ref_mask.unsqueeze(1).expand(-1, ph.shape[1], -1))
        g_rep = g.unsqueeze(1).expand(-1, ph.shape[1], -1)
        return apply_mask(self.proj(torch.cat([x, g_rep], dim=-1)), ph_mask), h_content

    # ---- single-item API

    def _refs(self, refs) -> list[Tensor]:
        if len(refs) == 0:
            raise ValueError("timbre reference set is empty")
        out = [_as_tensor(r, self.dtype) for r in refs]
        if len({r.shape[1] for r in out}) != 1:
            raise ValueError("references must share a bin count")
        return out

    def mel_encode(self, refs) -> Tensor:
        """Acoustic hidden states of the time-concatenated references, ``[T_ref, d]``."""
        if not self.cfg.use_attention:
            raise RuntimeError("pool-only encoder has no mel-to-phoneme path")
        mel = torch.cat(self._refs(refs), dim=0).unsqueeze(0)
        mask = torch.ones(mel.shape[:2], dtype=torch.bool)
        return self.mel_enc(mel, mask)[0]

    def content_encode(self, ph) -> Tensor:
        ids = torch.as_tensor(np.asarray(ph), dtype=torch.long)
        if ids.numel() == 0:
            raise ValueError("empty phoneme sequence")
        if int(ids.min()) < 0 or int(ids.max()) >= self.cfg.n_phonemes:
            raise nx.VocabularyError(f"phoneme id outside [0, {self.cfg.n_phonemes})")
        return self.content(ids.unsqueeze(0), torch.ones(1, len(ids), dtype=torch.bool))[0]

    def mel_to_phoneme_attend(self, h_content: Tensor, h_mel: Tensor, mask: Tensor | None = None,
                              return_weights: bool = False):
        """Content states query acoustic states; ``[N, d]`` readout (and weights)."""
        if h_mel.shape[0] == 0:
            raise ValueError("no acoustic states to attend to")
        if h_content.shape[-1] != h_mel.shape[-1]:
            raise nx.ShapeError("content and acoustic state widths differ")
        m = None if mask is None else mask.unsqueeze(0)
        out, w = self.attn(h_content.unsqueeze(0), h_mel.unsqueeze(0), m, return_weights=True)
        return (out[0], w[0]) if return_weights else out[0]

    def global_timbre(self, refs) -> Tensor:
        rs = self._refs(refs)
        mel, mask = pad_stack(rs)
        owner = torch.zeros(len(rs), dtype=torch.long)
        return self.global_enc(mel, mask, owner, 1)[0]

    def build_cond(self, ph, durations, refs) -> CondSeq:
        ph = np.asarray(ph)
        durations = np.asarray(durations)
        if len(ph) != len(durations):
            raise AlignmentError("need one duration per phoneme")
        if (durations < 1).any():
            raise AlignmentError("durations must be >= 1")
        batch = collate_refs([list(refs)], self.dtype)
        ids = torch.as_tensor(ph, dtype=torch.long).unsqueeze(0)
        self.content_encode(ph)  # vocabulary check
        ph_vec, _ = self.phoneme_states(ids, torch.ones_like(ids, dtype=torch.bool), *batch)
        hidden, _ = length_regulate(ph_vec, torch.as_tensor(durations, dtype=torch.long).unsqueeze(0))
        return CondSeq(hidden[0])


def collate_refs(ref_sets: list[list], dtype: torch.dtype):
    """Pack per-item reference lists for both the attention and pooled paths."""
    joined = []
    flat, owner = [], []
    for i, refs in enumerate(ref_sets):
        if not refs:
            raise ValueError("timbre reference set is empty")
        rs = [_as_tensor(r, dtype) for r in refs]
        joined.append(torch.cat(rs, dim=0))
        flat.extend(rs)
        owner.extend([i] * len(rs))
    ref_mel, ref_mask = pad_stack(joined)
    ge_mel, ge_mask = pad_stack(flat)
    return ref_mel, ref_mask, ge_mel, ge_mask, torch.as_tensor(owner, dtype=torch.long)
