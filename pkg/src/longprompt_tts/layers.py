"""Parameterised building blocks shared by every model in the package.

All blocks are time-major: sequences are ``[B, T, C]``. Padding masks are
boolean ``[B, T]`` grids (True = real frame).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import numerics as nx


class ContextLengthError(ValueError):
    """A sequence does not fit in a model's positional context."""


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(d_in, d_out) / math.sqrt(d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.weight, self.bias)


class Embedding(nn.Module):
    def __init__(self, n: int, d: int, std: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n, d) * std)

    def forward(self, ids: Tensor) -> Tensor:
        return nx.embedding_lookup(self.weight, ids)


class Conv1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int | str = "same"):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(c_out, c_in, kernel) / math.sqrt(c_in * kernel))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return nx.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


def apply_mask(x: Tensor, mask: Tensor | None) -> Tensor:
    return x if mask is None else x * mask.unsqueeze(-1).to(x.dtype)


class ConvBlock(nn.Module):
    """Pre-norm residual conv block: ``x + conv(gelu(norm(x)))``."""

    def __init__(self, channels: int, kernel: int = 5):
        super().__init__()
        self.norm = LayerNorm(channels)
        self.conv = Conv1d(channels, channels, kernel)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        h = self.conv(apply_mask(F.gelu(self.norm(x)), mask))
        return apply_mask(x + h, mask)


class ConvStack(nn.Module):
    def __init__(self, n_blocks: int, channels: int, kernel: int = 5):
        super().__init__()
        self.blocks = nn.ModuleList(ConvBlock(channels, kernel) for _ in range(n_blocks))

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, mask)
        return x

    @property
    def radius(self) -> int:
        """Frames of context each output sees on either side."""
        return sum((b.conv.weight.shape[-1] - 1) // 2 for b in self.blocks)


def sinusoid_table(n: int, d: int) -> Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, d, 2, dtype=torch.float64)
    ang = pos / (10000.0 ** (i / d))
    tab = torch.zeros(n, d, dtype=torch.float64)
    tab[:, 0::2] = torch.sin(ang)
    tab[:, 1::2] = torch.cos(ang[:, : d // 2])
    return tab


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, d_kv: int | None = None):
        super().__init__()
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        d_kv = d_model if d_kv is None else d_kv
        self.heads = heads
        self.q = Linear(d_model, d_model)
        self.k = Linear(d_kv, d_model, bias=False)  # a key bias cannot change softmax weights
        self.v = Linear(d_kv, d_model)
        self.o = Linear(d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.view(b, t, self.heads, d // self.heads).transpose(1, 2)

    def project_kv(self, kv: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.k(kv)), self._split(self.v(kv))

    def attend(self, x: Tensor, k: Tensor, v: Tensor, mask: Tensor | None,
               return_weights: bool = False):
        q = self._split(self.q(x))
        m = None if mask is None else mask.unsqueeze(1)
        out, w = nx.masked_attention(q, k, v, m, return_weights=True)
        b, h, t, dh = out.shape
        out = self.o(out.transpose(1, 2).reshape(b, t, h * dh))
        return (out, w) if return_weights else out

    def forward(self, x: Tensor, kv: Tensor, mask: Tensor | None = None,
                return_weights: bool = False):
        k, v = self.project_kv(kv)
        return self.attend(x, k, v, mask, return_weights)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, kernel: int = 1):
        super().__init__()
        self.c1 = Conv1d(d_model, d_ff, kernel)
        self.c2 = Conv1d(d_ff, d_model, kernel)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        return apply_mask(self.c2(apply_mask(F.gelu(self.c1(x)), mask)), mask)


class TransformerLayer(nn.Module):
    """Pre-norm self-attention layer. With ``kernel == 1`` it is position-wise
    outside attention, so it can be run causally and incrementally."""

    def __init__(self, d_model: int, heads: int, d_ff: int, kernel: int = 1):
        super().__init__()
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        self.norm2 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, kernel)

    def forward(self, x: Tensor, attn_mask: Tensor | None, pad_mask: Tensor | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, attn_mask)
        return apply_mask(x + self.ff(self.norm2(x), pad_mask), pad_mask)

    def step(self, x: Tensor, cache: dict) -> Tensor:
        """Append one position (``x`` is ``[B, 1, d]``) using cached keys/values."""
        h = self.norm1(x)
        k, v = self.attn.project_kv(h)
        if "k" in cache:
            k = torch.cat([cache["k"], k], dim=2)
            v = torch.cat([cache["v"], v], dim=2)
        cache["k"], cache["v"] = k, v
        x = x + self.attn.attend(h, k, v, None)
        return x + self.ff(self.norm2(x))


class CausalDecoder(nn.Module):
    """Decoder-only transformer stack with learned absolute positions.

    Callers provide the full boolean self-attention mask, so the same module
    serves plain causal decoding and speaker-block causal training.
    """

    def __init__(self, d_model: int, layers: int, heads: int, max_context: int, kernel: int = 1):
        super().__init__()
        if kernel != 1:
            raise ValueError("causal decoder requires a pointwise (kernel 1) feed-forward")
        self.max_context = max_context
        self.pos = Embedding(max_context, d_model, std=0.02)
        self.layers = nn.ModuleList(TransformerLayer(d_model, heads, 4 * d_model, kernel)
                                    for _ in range(layers))
        self.norm = LayerNorm(d_model)

    def _positions(self, positions: Tensor) -> Tensor:
        if positions.numel() and int(positions.max()) >= self.max_context:
            raise ContextLengthError(f"position {int(positions.max())} exceeds context {self.max_context}")
        return self.pos(positions)

    def forward(self, x: Tensor, positions: Tensor, attn_mask: Tensor) -> Tensor:
        x = x + self._positions(positions)
        for layer in self.layers:
            x = layer(x, attn_mask)
        return self.norm(x)

    def new_cache(self) -> list[dict]:
        return [{} for _ in self.layers]

    def step(self, x: Tensor, position: int, cache: list[dict]) -> Tensor:
        pos = torch.full(x.shape[:2], position, dtype=torch.long)
        x = x + self._positions(pos)
        for layer, c in zip(self.layers, cache):
            x = layer.step(x, c)
        return self.norm(x)


def block_causal_mask(block_ids: Tensor, valid: Tensor | None = None) -> Tensor:
    """``mask[b, i, j] = block[i] == block[j] and j <= i`` (and both valid)."""
    t = block_ids.shape[-1]
    same = block_ids.unsqueeze(-1) == block_ids.unsqueeze(-2)
    causal = torch.ones(t, t, dtype=torch.bool).tril()
    mask = same & causal
    if valid is not None:
        mask = mask & valid.unsqueeze(-1) & valid.unsqueeze(-2)
        # padded query rows attend to themselves only, keeping softmax defined
        eye = torch.eye(t, dtype=torch.bool)
        mask = mask | (eye & ~valid.unsqueeze(-1))
    return mask
