"""Dense tensor primitives, optimizer and finite-difference gradient checking.

Reverse-mode differentiation is delegated to ``torch.autograd``; everything in
here is written against plain ``torch.Tensor`` objects so the model modules can
use the same functions in both 64-bit test mode and 32-bit training mode.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

NEG_INF = -1e30


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class MaskError(ValueError):
    """An attention mask leaves a query with no admissible key."""


class NumericError(FloatingPointError):
    """A value that must be finite is NaN or infinite."""


class VocabularyError(IndexError):
    """A token id falls outside its vocabulary."""


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"{what} contains non-finite values")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def masked_softmax(scores: Tensor, mask: Tensor, axis: int = -1) -> Tensor:
    """Softmax where ``mask == False`` entries get weight exactly zero."""
    if mask.shape != scores.shape:
        mask = mask.expand_as(scores)
    if not mask.any(dim=axis).all():
        raise MaskError("fully masked attention row")
    filled = scores.masked_fill(~mask, NEG_INF)
    w = softmax(filled, axis=axis)
    return w.masked_fill(~mask, 0.0)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None,
                     return_weights: bool = False):
    """Scaled dot-product attention over the last two axes.

    ``q`` is ``[..., Tq, d]``, ``k``/``v`` are ``[..., Tk, d]`` and ``mask`` is a
    boolean ``[..., Tq, Tk]`` grid (broadcastable), True where attending is allowed.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if mask is None:
        w = softmax(scores)
    else:
        w = masked_softmax(scores, mask.expand(scores.shape))
    out = w @ v
    return (out, w) if return_weights else out


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | str = "same") -> Tensor:
    """1-D convolution on time-major input ``[..., T, C_in]`` -> ``[..., T', C_out]``.

    ``weight`` has shape ``[C_out, C_in, kernel]``. ``padding="same"`` zero-pads
    ``(kernel - 1) // 2`` frames each side (odd kernels keep the length at stride 1).
    """
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} != weight channels {weight.shape[1]}")
    kernel = weight.shape[-1]
    pad = (kernel - 1) // 2 if padding == "same" else int(padding)
    lead = x.shape[:-2]
    xt = x.reshape(-1, *x.shape[-2:]).transpose(1, 2)
    y = F.conv1d(xt, weight, bias, stride=stride, padding=pad)
    return y.transpose(1, 2).reshape(*lead, y.shape[-1], weight.shape[0])


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise VocabularyError(f"ids outside [0, {table.shape[0]})")
    return table[ids]


def cross_entropy(logits: Tensor, targets: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    logp = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return nll.mean()
    m = mask.to(nll.dtype)
    return (nll * m).sum() / m.sum().clamp_min(1.0)


def mse(pred: Tensor, target: Tensor, mask: Tensor | None = None) -> Tensor:
    sq = (pred - target) ** 2
    if mask is None:
        return sq.mean()
    m = mask.to(sq.dtype)
    while m.dim() < sq.dim():
        m = m.unsqueeze(-1)
    return (sq * m).sum() / (m.expand_as(sq).sum().clamp_min(1.0))


def l1(pred: Tensor, target: Tensor, mask: Tensor | None = None) -> Tensor:
    ab = (pred - target).abs()
    if mask is None:
        return ab.mean()
    m = mask.to(ab.dtype)
    while m.dim() < ab.dim():
        m = m.unsqueeze(-1)
    return (ab * m).sum() / (m.expand_as(ab).sum().clamp_min(1.0))


# --------------------------------------------------------------------- optim

class Adam:
    """Adam with explicit, serialisable state.

    Defaults follow the large-model recipe: betas (0.9, 0.98), eps 1e-9.
    """

    def __init__(self, params: Iterable[tuple[str, Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float | None = None) -> None:
        self.step_count += 1
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            adam_step(p, g, self.m[name], self.v[name], self.step_count, lr,
                      self.betas, self.eps, self.weight_decay)

    def state_tensors(self) -> dict[str, Tensor]:
        out = {}
        for n in self.params:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors: dict[str, Tensor], step_count: int) -> None:
        for n in self.params:
            self.m[n].copy_(tensors[f"m.{n}"])
            self.v[n].copy_(tensors[f"v.{n}"])
        self.step_count = step_count


@torch.no_grad()
def adam_step(param: Tensor, grad: Tensor, m: Tensor, v: Tensor, step: int, lr: float,
              betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9,
              weight_decay: float = 0.0) -> None:
    """One in-place Adam update of ``param`` (``step`` is 1-based)."""
    b1, b2 = betas
    if weight_decay:
        grad = grad + weight_decay * param
    m.mul_(b1).add_(grad, alpha=1 - b1)
    v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def noam_lr(step: int, d_model: int, warmup: int = 400, scale: float = 1.0) -> float:
    """Inverse-square-root schedule with linear warmup (``step`` is 1-based)."""
    step = max(step, 1)
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


# --------------------------------------------------------------- grad check

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and finite-difference gradients.

    ``f`` is re-evaluated with each checked entry perturbed in place. The
    finite-difference estimate uses the fourth-order central stencil
    ``(8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h``. The error of an entry
    is ``|g_auto - g_fd| / max(|g_auto|, 1e-8)``. ``max_entries`` caps the
    number of entries probed per parameter (chosen with a seeded generator).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = list(params)
    out = f()
    check_finite(out, "grad_check objective")
    grads = torch.autograd.grad(out, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0

    def value() -> float:
        with torch.no_grad():
            y = f()
        check_finite(y, "grad_check objective")
        return float(y)

    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        flat = p.data.view(-1)
        n = flat.numel()
        idx = torch.arange(n)
        if max_entries is not None and n > max_entries:
            idx = torch.randperm(n, generator=gen)[:max_entries]
        for i in idx.tolist():
            orig = flat[i].item()
            samples = []
            for off in (eps, -eps, 2 * eps, -2 * eps):
                flat[i] = orig + off
                samples.append(value())
            flat[i] = orig
            fp, fm, f2p, f2m = samples
            fd = (8 * (fp - fm) - (f2p - f2m)) / (12 * eps)
            ga = float(g.view(-1)[i])
            worst = max(worst, abs(ga - fd) / max(abs(ga), 1e-8))
    return worst
