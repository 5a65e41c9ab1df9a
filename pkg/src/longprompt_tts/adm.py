"""Phoneme-level autoregressive duration model and its non-autoregressive baseline.

The duration model shares the prosody model's decoder stack; it regresses
log-durations with a squared-error loss. Integer durations are recovered by
``exp``, round-half-up and a floor of one frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import numerics as nx
from .layers import CausalDecoder, ContextLengthError, Conv1d, LayerNorm, Linear, apply_mask
from .mrte import AlignmentError
from .plm import block_layout, shift_in


@dataclass
class ADMConfig:
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    max_context: int = 512
    conv_kernel: int = 1
    d_cond: int = 64


def integerize(log_durs) -> np.ndarray:
    """``exp``, round half up, clamp to at least one frame."""
    d = np.floor(np.exp(np.asarray(log_durs, dtype=np.float64)) + 0.5)
    return np.maximum(d, 1).astype(np.int64)


def log_mse(pred_log: Tensor, durations: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean squared error between predicted log-durations and ``log(durations)``."""
    d = durations.to(pred_log.dtype)
    if mask is not None:
        d = torch.where(mask, d, torch.ones_like(d))  # padding may hold zeros
    return nx.mse(pred_log, torch.log(d), mask)


class ADM(nn.Module):
    def __init__(self, cfg: ADMConfig):
        super().__init__()
        self.cfg = cfg
        self.dur_in = Linear(1, cfg.d_model)
        self.bos = nn.Parameter(torch.randn(cfg.d_model) * 0.5)
        self.cond_in = Linear(cfg.d_cond, cfg.d_model)
        self.decoder = CausalDecoder(cfg.d_model, cfg.layers, cfg.heads, cfg.max_context, cfg.conv_kernel)
        self.head = Linear(cfg.d_model, 1)

    def forward(self, durations: Tensor, ph_cond: Tensor, mask: Tensor) -> Tensor:
        """Predicted log-duration per phoneme from earlier durations of the same block.

        ``durations`` are frame counts (model space, ``>= 1`` where valid),
        ``ph_cond`` is ``[..., N, d_cond]`` and ``mask`` the block-causal grid.
        """
        squeeze = durations.dim() == 1
        if squeeze:
            durations, ph_cond, mask = durations.unsqueeze(0), ph_cond.unsqueeze(0), mask.unsqueeze(0)
        if durations.shape != ph_cond.shape[:-1] or mask.shape[-1] != durations.shape[-1]:
            raise AlignmentError("durations, phoneme condition and mask disagree in length")
        if durations.shape[-1] > self.cfg.max_context:
            raise ContextLengthError(f"{durations.shape[-1]} phonemes exceed context {self.cfg.max_context}")
        starts, positions = block_layout(mask)
        logd = torch.log(durations.to(ph_cond.dtype).clamp_min(1.0)).unsqueeze(-1)
        x = shift_in(self.dur_in(logd), self.bos, starts) + self.cond_in(ph_cond)
        out = self.head(self.decoder(x, positions, mask)).squeeze(-1)
        return out[0] if squeeze else out


def adm_loss(adm: ADM, durations: Tensor, ph_cond: Tensor, mask: Tensor, valid: Tensor) -> Tensor:
    return log_mse(adm(durations, ph_cond, mask), durations, valid)


@torch.no_grad()
def adm_generate(adm: ADM, prompt_durs, prompt_ph_cond: Tensor, target_ph_cond: Tensor) -> np.ndarray:
    """Greedy autoregressive durations for the target phonemes, continuing a prompt."""
    prompt = [int(d) for d in np.asarray(prompt_durs).reshape(-1)]
    if len(prompt) != prompt_ph_cond.shape[0]:
        raise AlignmentError("prompt durations and prompt condition disagree in length")
    cond = torch.cat([prompt_ph_cond, target_ph_cond], dim=0)
    if cond.shape[0] > adm.cfg.max_context:
        raise ContextLengthError(f"{cond.shape[0]} phonemes exceed context {adm.cfg.max_context}")
    cache = adm.decoder.new_cache()
    history = list(prompt)
    out = []
    for t in range(cond.shape[0]):
        if t == 0:
            x = adm.bos
        else:
            x = adm.dur_in(torch.log(torch.tensor([[float(history[t - 1])]], dtype=cond.dtype)))[0]
        x = (x + adm.cond_in(cond[t:t + 1])[0]).view(1, 1, -1)
        pred = adm.head(adm.decoder.step(x, t, cache))[0, 0, 0]
        if t >= len(prompt):
            d = int(integerize(float(pred)))
            history.append(d)
            out.append(d)
    return np.asarray(out, dtype=np.int64)


class DurationPredictor(nn.Module):
    """Two-layer conv regressor of log-duration from phoneme states (ablation baseline)."""

    def __init__(self, d_cond: int, hidden: int = 64, kernel: int = 3):
        super().__init__()
        self.c1 = Conv1d(d_cond, hidden, kernel)
        self.n1 = LayerNorm(hidden)
        self.c2 = Conv1d(hidden, hidden, kernel)
        self.n2 = LayerNorm(hidden)
        self.out = Linear(hidden, 1)

    def forward(self, ph_cond: Tensor, mask: Tensor | None = None) -> Tensor:
        h = apply_mask(self.n1(F.gelu(self.c1(apply_mask(ph_cond, mask)))), mask)
        h = apply_mask(self.n2(F.gelu(self.c2(h))), mask)
        return self.out(h).squeeze(-1)
