from math import comb

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from longprompt_tts.corpus import CorpusConfig, gen_corpus
from longprompt_tts.evaluation import cosine, sign_test, split_speakers, window_batch
from longprompt_tts import gradcheck


def binom_tail(wins, n):
    return sum(comb(n, k) for k in range(wins, n + 1)) / 2 ** n


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_sign_test_matches_exact_binomial_tail(pairs):
    a, b = zip(*pairs)
    r = sign_test(a, b)
    d = np.subtract(b, a)
    assert (r["wins"], r["losses"], r["ties"]) == ((d > 0).sum(), (d < 0).sum(), (d == 0).sum())
    n = r["wins"] + r["losses"]
    want = binom_tail(r["wins"], n) if n else 1.0
    assert abs(r["p"] - want) < 1e-12


def test_sign_test_known_value():
    # 15 of 20 paired wins: exact one-sided tail 21700 / 2**20
    r = sign_test(np.zeros(20), [1] * 15 + [-1] * 5)
    assert abs(r["p"] - 21700 / 2 ** 20) < 1e-15


def test_split_speakers_holds_out_highest_ids():
    utts = gen_corpus(CorpusConfig(n_speakers=5, utts_per_speaker=2)).utterances
    train, held = split_speakers(utts, 2)
    assert {u.speaker_id for u in held} == {3, 4}
    assert {u.speaker_id for u in train} == {0, 1, 2}
    assert split_speakers(utts, 0)[1] == []


def test_cosine_oracle():
    a, b = torch.tensor([1.0, 2.0, 2.0]), torch.tensor([2.0, 0.0, 1.0])
    assert abs(cosine(a, b) - 4 / (3 * 5 ** 0.5)) < 1e-7


def test_window_batch_scores_tail_only():
    pieces = [(torch.arange(6), torch.zeros(6, 2)), (torch.arange(4), torch.zeros(4, 2))]
    b, score = window_batch(pieces, 3)
    assert score.tolist() == [[False, False, False, True, True, True], [False, True, True, True, False, False]]
    assert b.mask[1, 3, :4].all() and not b.mask[1, 3, 4:].any()


@pytest.mark.parametrize("case", ["transformer", "dp", "adm"])
def test_gradcheck_cases_pass(case):
    errs = gradcheck.run([case], max_entries=4)[case]
    assert errs and max(errs.values()) < 1e-4


def test_gradcheck_unknown_case():
    with pytest.raises(ValueError):
        gradcheck.run(["nope"])
