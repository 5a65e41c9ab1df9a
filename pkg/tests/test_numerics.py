import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from longprompt_tts import numerics as nx

F64 = torch.float64


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i][j] = s
    return torch.tensor(out, dtype=F64)


def test_matmul_identity_and_zero():
    eye = torch.eye(2, dtype=F64)
    assert torch.equal(nx.matmul(eye, eye), eye)
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=F64)
    assert torch.equal(nx.matmul(a, torch.zeros(2, 2, dtype=F64)), torch.zeros(2, 2, dtype=F64))


def test_matmul_triple_loop_oracle():
    g = torch.Generator().manual_seed(1)
    a, b = torch.randn(3, 4, generator=g, dtype=F64), torch.randn(4, 2, generator=g, dtype=F64)
    assert torch.allclose(nx.matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-14)


def test_matmul_shape_error():
    with pytest.raises(nx.ShapeError):
        nx.matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_softmax_symmetric_pair():
    assert torch.equal(nx.softmax(torch.zeros(2, dtype=F64)), torch.tensor([0.5, 0.5], dtype=F64))


def test_softmax_extended_precision_oracle():
    mpmath.mp.dps = 50
    xs = [1, 2, 3]
    den = sum(mpmath.e ** x for x in xs)
    ref = torch.tensor([float(mpmath.e ** x / den) for x in xs], dtype=F64)
    got = nx.softmax(torch.tensor(xs, dtype=F64))
    assert (got - ref).abs().max() < 1e-12


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalised(x, c):
    t = torch.as_tensor(x)
    p = nx.softmax(t)
    assert abs(float(p.sum()) - 1.0) < 1e-12
    assert torch.allclose(nx.softmax(t + c), p, rtol=0, atol=1e-12)


def prefix_attention(q, k, v):
    """Query i recomputes softmax attention over keys 0..i only."""
    rows = []
    for i in range(q.shape[0]):
        s = (k[: i + 1] @ q[i]) / math.sqrt(q.shape[1])
        w = torch.exp(s - s.max())
        rows.append((w / w.sum()) @ v[: i + 1])
    return torch.stack(rows)


def test_causal_attention_prefix_oracle():
    g = torch.Generator().manual_seed(2)
    q, k, v = (torch.randn(3, 4, generator=g, dtype=F64) for _ in range(3))
    mask = torch.ones(3, 3, dtype=torch.bool).tril()
    assert (nx.masked_attention(q, k, v, mask) - prefix_attention(q, k, v)).abs().max() < 1e-10


@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_masked_weights_exactly_zero(tq, tk, seed):
    g = torch.Generator().manual_seed(seed)
    mask = torch.rand(tq, tk, generator=g) < 0.6
    mask[:, 0] = True
    q, k, v = torch.randn(tq, 3, generator=g, dtype=F64), torch.randn(tk, 3, generator=g, dtype=F64), \
        torch.randn(tk, 3, generator=g, dtype=F64)
    _, w = nx.masked_attention(q, k, v, mask, return_weights=True)
    assert torch.all(w[~mask] == 0)
    assert torch.allclose(w.sum(-1), torch.ones(tq, dtype=F64), atol=1e-12)


def test_fully_masked_row_raises():
    q = torch.zeros(2, 3)
    mask = torch.tensor([[True, False], [False, False]])
    with pytest.raises(nx.MaskError):
        nx.masked_attention(q, q, q, mask)


def test_layer_norm_moments():
    x = torch.randn(5, 16, dtype=F64) * 3 + 2
    y = nx.layer_norm(x, eps=0.0)
    assert y.mean(-1).abs().max() < 1e-12
    assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-12


def test_conv1d_direct_sum_oracle():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(7, 2, generator=g, dtype=F64)
    w = torch.randn(3, 2, 5, generator=g, dtype=F64)
    b = torch.randn(3, generator=g, dtype=F64)
    y = nx.conv1d(x, w, b)
    ref = torch.zeros(7, 3, dtype=F64)
    for t in range(7):
        for o in range(3):
            s = float(b[o])
            for j in range(5):
                src = t + j - 2
                if 0 <= src < 7:
                    s += float((w[o, :, j] * x[src]).sum())
            ref[t, o] = s
    assert (y - ref).abs().max() < 1e-12


def test_embedding_vocabulary_error():
    with pytest.raises(nx.VocabularyError):
        nx.embedding_lookup(torch.zeros(4, 2), torch.tensor([4]))


def test_cross_entropy_manual_oracle():
    g = torch.Generator().manual_seed(4)
    logits = torch.randn(2, 5, 7, generator=g, dtype=F64)
    tg = torch.randint(0, 7, (2, 5), generator=g)
    mask = torch.rand(2, 5, generator=g) < 0.7
    mask[0, 0] = True
    total, n = 0.0, 0
    for i in range(2):
        for t in range(5):
            if mask[i, t]:
                row = logits[i, t].tolist()
                z = math.log(sum(math.exp(v) for v in row))
                total += z - row[int(tg[i, t])]
                n += 1
    assert abs(float(nx.cross_entropy(logits, tg, mask)) - total / n) < 1e-10


def test_mse_manual_oracle():
    p = torch.tensor([[1.0, 2.0, 3.0]], dtype=F64)
    t = torch.tensor([[0.0, 2.0, 5.0]], dtype=F64)
    m = torch.tensor([[True, False, True]])
    assert abs(float(nx.mse(p, t, m)) - (1 + 4) / 2) < 1e-12


def test_adam_matches_torch_optimizer():
    g = torch.Generator().manual_seed(5)
    w0 = torch.randn(4, 3, generator=g, dtype=F64)
    grads = [torch.randn(4, 3, generator=g, dtype=F64) for _ in range(6)]
    a = w0.clone().requires_grad_()
    b = w0.clone().requires_grad_()
    ours = nx.Adam([("w", a)], lr=1e-2)
    ref = torch.optim.Adam([b], lr=1e-2, betas=(0.9, 0.98), eps=1e-9)
    for gr in grads:
        a.grad = gr.clone()
        b.grad = gr.clone()
        ours.step()
        ref.step()
    assert (a - b).abs().max() < 1e-14


def test_adam_state_round_trip():
    p = torch.ones(3, dtype=F64, requires_grad=True)
    opt = nx.Adam([("p", p)], lr=0.1)
    p.grad = torch.tensor([1.0, -2.0, 0.5], dtype=F64)
    opt.step()
    q = p.detach().clone().requires_grad_()
    opt2 = nx.Adam([("p", q)], lr=0.1)
    opt2.load_state_tensors({k: v.clone() for k, v in opt.state_tensors().items()}, opt.step_count)
    for o, t in ((opt, p), (opt2, q)):
        t.grad = torch.tensor([0.3, 0.1, -1.0], dtype=F64)
        o.step()
    assert torch.equal(p, q)


def test_noam_peaks_at_warmup():
    lrs = [nx.noam_lr(s, 64, 400) for s in range(1, 2000)]
    assert int(np.argmax(lrs)) + 1 == 400


def test_grad_check_catches_wrong_gradient():
    w = torch.randn(3, dtype=F64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=F64)

    assert nx.grad_check(lambda: Wrong.apply(w), [w]) > 1e-2
    assert nx.grad_check(lambda: (w ** 3).sum(), [w]) < 1e-8


def test_grad_check_rejects_bad_eps_and_nan():
    w = torch.ones(2, dtype=F64, requires_grad=True)
    with pytest.raises(ValueError):
        nx.grad_check(lambda: w.sum(), [w], eps=1e-2)
    with pytest.raises(nx.NumericError):
        nx.grad_check(lambda: (w * float("nan")).sum(), [w])
