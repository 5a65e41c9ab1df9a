"""Prosody interpolation: decode once from a convex mixture of several
shared-parameter prosody-model contexts that differ only in their prompts.

At every step the per-context next-code distributions are mixed in probability
space, the greedy code of the mixture is emitted, and that code is appended to
every context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .mrte import CondSeq
from .plm import PLM, DecodeContext, _pooled, mix_step


class InterpolationError(ValueError):
    pass


@dataclass
class InterpSession:
    contexts: list[DecodeContext]
    weights: list[float]

    def step(self) -> tuple[int, Tensor]:
        return mix_step(self.contexts, self.weights)

    @property
    def generated(self) -> list[int]:
        return self.contexts[0].generated


def check_weights(weights) -> list[float]:
    w = [float(x) for x in weights]
    if not w or any(not 0.0 <= x <= 1.0 for x in w) or abs(sum(w) - 1.0) > 1e-12:
        raise InterpolationError(f"weights must lie on the probability simplex, got {w}")
    return w


def open_session(plm: PLM, prompts: list[tuple], target_cond: CondSeq | Tensor, weights) -> InterpSession:
    """One decoding context per ``(codes, prompt_cond)``, all continuing into ``target_cond``."""
    weights = check_weights(weights)
    if len(weights) != len(prompts):
        raise InterpolationError("need one weight per prompt")
    hop = plm.cfg.hop
    tc = _pooled(target_cond, hop)
    ctxs = []
    for codes, cond in prompts:
        codes = np.asarray(getattr(codes, "codes", codes))
        pc = _pooled(cond, hop)
        if len(codes) != pc.shape[0]:
            raise InterpolationError("prompt codes and prompt condition disagree in length")
        ctxs.append(DecodeContext(plm, codes, torch.cat([pc, tc], dim=0)))
    return InterpSession(ctxs, weights)


def interp_generate(plm: PLM, flat_prompt: tuple, rhy_prompt: tuple, target_cond: CondSeq | Tensor,
                    gamma: float, steps: int | None = None) -> np.ndarray:
    """``gamma`` weights the target speaker's own (flat) prompt, ``1 - gamma`` the other one."""
    if not 0.0 <= gamma <= 1.0:
        raise InterpolationError(f"gamma must lie in [0, 1], got {gamma}")
    n_target = _pooled(target_cond, plm.cfg.hop).shape[0]
    steps = n_target if steps is None else steps
    if not 1 <= steps <= n_target:
        raise InterpolationError(f"steps must lie in [1, {n_target}]")
    session = open_session(plm, [flat_prompt, rhy_prompt], target_cond, [gamma, 1.0 - gamma])
    for _ in range(steps):
        session.step()
    return np.asarray(session.generated, dtype=np.int64)
