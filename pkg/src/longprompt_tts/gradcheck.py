"""Finite-difference gradient checks over every trainable module at toy size (64-bit).

Objectives are smooth readouts (fixed random projections or the model's own
smooth loss). The straight-through path of the quantizer is excluded by design:
its forward value is piecewise constant, so a difference quotient cannot see
the surrogate gradient. That identity is tested exactly elsewhere.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from . import numerics as nx
from .adm import ADM, ADMConfig, DurationPredictor, adm_loss, log_mse
from .corpus import CorpusConfig, gen_corpus
from .layers import Linear, TransformerLayer, block_causal_mask
from .mrte import MRTE, MRTEConfig
from .plm import PLM, PLMConfig, plm_loss, stack_streams
from .vqvae import VQConfig, VQTTS, collate_stage1

Case = tuple[Callable[[], Tensor], nn.Module]
DT = torch.float64


def _readout(shape, seed: int) -> Tensor:
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DT)


def _toy_corpus():
    return gen_corpus(CorpusConfig(seed=3, n_speakers=2, utts_per_speaker=2, bins=16, n_phonemes=8,
                                   min_phonemes=3, max_phonemes=5))


def _mrte_cfg() -> MRTEConfig:
    return MRTEConfig(bins=16, n_phonemes=8, hidden=8, d_model=8, d_global=4, conv_blocks=1, kernel=3,
                      content_layers=1, content_heads=2)


def case_transformer() -> Case:
    torch.manual_seed(0)
    m = nn.ModuleDict({"layer": TransformerLayer(8, 2, 16, kernel=3), "head": Linear(8, 5)}).to(DT)
    x = _readout((2, 6, 8), 1)
    mask = block_causal_mask(torch.tensor([[0, 0, 0, 1, 1, 1], [0, 0, 0, 0, 0, 0]]))
    tgt = torch.randint(0, 5, (2, 6), generator=torch.Generator().manual_seed(2))
    return (lambda: nx.cross_entropy(m["head"](m["layer"](x, mask)), tgt)), m


def case_mrte() -> Case:
    torch.manual_seed(0)
    m = MRTE(_mrte_cfg()).to(DT)
    c = _toy_corpus()
    b = collate_stage1([(c.utterances[0], [c.utterances[1].mel]),
                        (c.utterances[2], [c.utterances[3].mel, c.utterances[2].mel])], DT)
    w = _readout((2, b.ph.shape[1], 8), 4)

    def f():
        ph_vec, _ = m.phoneme_states(b.ph, b.ph_mask, *b.refs)
        return (ph_vec * w * b.ph_mask.unsqueeze(-1)).sum()

    return f, m


def _toy_vq() -> tuple[VQTTS, object]:
    torch.manual_seed(0)
    cfg = VQConfig(bins=16, hop=2, hidden=8, conv_blocks=1, kernel=3, codebook_size=5, code_dim=4,
                   mrte=_mrte_cfg())
    m = VQTTS(cfg).to(DT)
    c = _toy_corpus()
    b = collate_stage1([(c.utterances[0], [c.utterances[1].mel]), (c.utterances[3], [c.utterances[2].mel])], DT)
    return m, b


def case_vq_continuous() -> Case:
    m, b = _toy_vq()
    w = _readout(b.mel.shape, 5)

    def f():
        out, _, _ = m.forward_batch(b, quantize=False)
        return (out * w * b.mask.unsqueeze(-1)).sum()

    return f, nn.ModuleDict({"encoder": m.encoder, "mrte": m.mrte, "decoder": m.decoder})


def _vq_term(term: str) -> Case:
    m, b = _toy_vq()

    def f():
        _, losses, _ = m.forward_batch(b, quantize=True)
        return losses[term]

    # each term reaches one side only through the stop-gradient
    return f, (m.codebook if term == "codebook" else m.encoder)


def case_vq_codebook() -> Case:
    return _vq_term("codebook")


def case_vq_commit() -> Case:
    return _vq_term("commit")


def case_plm() -> Case:
    torch.manual_seed(0)
    m = PLM(PLMConfig(layers=1, d_model=8, heads=2, K=5, max_context=16, conv_kernel=1, d_cond=4, hop=2)).to(DT)
    g = torch.Generator().manual_seed(6)
    streams = [(torch.randint(0, 5, (7,), generator=g), _readout((7, 4), 7), np.array([0, 0, 0, 1, 1, 1, 1])),
               (torch.randint(0, 5, (5,), generator=g), _readout((5, 4), 8), np.zeros(5, dtype=np.int64))]
    b = stack_streams(streams)
    return (lambda: plm_loss(m, b)), m


def case_adm() -> Case:
    torch.manual_seed(0)
    m = ADM(ADMConfig(layers=1, d_model=8, heads=2, max_context=16, conv_kernel=1, d_cond=4)).to(DT)
    g = torch.Generator().manual_seed(9)
    streams = [(torch.randint(1, 9, (6,), generator=g), _readout((6, 4), 10), np.array([0, 0, 0, 1, 1, 1])),
               (torch.randint(1, 9, (4,), generator=g), _readout((4, 4), 11), np.zeros(4, dtype=np.int64))]
    b = stack_streams(streams)
    return (lambda: adm_loss(m, b.targets, b.cond, b.mask, b.valid)), m


def case_dp() -> Case:
    torch.manual_seed(0)
    m = DurationPredictor(4, hidden=8, kernel=3).to(DT)
    cond = _readout((2, 6, 4), 12)
    mask = torch.tensor([[True] * 6, [True] * 4 + [False] * 2])
    durs = torch.randint(1, 9, (2, 6), generator=torch.Generator().manual_seed(13))
    return (lambda: log_mse(m(cond, mask), durs, mask)), m


CASES: dict[str, Callable[[], Case]] = {
    "transformer": case_transformer,
    "mrte": case_mrte,
    "vqvae.continuous": case_vq_continuous,
    "vqvae.codebook": case_vq_codebook,
    "vqvae.commit": case_vq_commit,
    "plm": case_plm,
    "adm": case_adm,
    "dp": case_dp,
}


def run(names=None, eps: float = 1e-4, max_entries: int | None = 6, seed: int = 0) -> dict[str, dict[str, float]]:
    """Max relative error per parameter tensor, for each named case."""
    names = list(CASES) if names is None else list(names)
    unknown = set(names) - set(CASES)
    if unknown:
        raise ValueError(f"unknown grad-check cases {sorted(unknown)}; choose from {sorted(CASES)}")
    out = {}
    for name in names:
        f, module = CASES[name]()
        out[name] = {pname: nx.grad_check(f, [p], eps=eps, max_entries=max_entries, seed=seed)
                     for pname, p in module.named_parameters() if p.requires_grad}
    return out
