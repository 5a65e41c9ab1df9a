import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from longprompt_tts.corpus import (
    BatchError,
    Corpus,
    CorpusConfig,
    CorpusFormatError,
    CorpusVersionError,
    SpeakerStyle,
    Utterance,
    World,
    bigram_tv,
    build_batch,
    dumps_corpus,
    gen_corpus,
    gen_speaker,
    iter_batches,
    load_corpus,
    loads_corpus,
    prompt_entropy_curve,
    save_corpus,
)

SMALL = CorpusConfig(seed=7, n_speakers=3, utts_per_speaker=4)


@pytest.fixture(scope="module")
def small():
    return gen_corpus(SMALL)


def fake_utt(spk, frames, bins=2):
    return Utterance(spk, [0], [frames], np.zeros((frames, bins), np.float32))


def test_same_seed_bit_identical(small):
    again = gen_corpus(SMALL)
    assert dumps_corpus(again) == dumps_corpus(small)


def test_frames_match_durations_and_hop(small):
    for u in small.utterances:
        assert u.durations.sum() == u.frames
        assert (u.durations >= 1).all()
        assert u.frames % SMALL.hop == 0


def test_timbre_imprint_separates_speakers():
    w = World(SMALL)
    rng = np.random.default_rng(0)
    a, b = w.sample_style(rng), w.sample_style(rng)
    ph, dur = np.array([1, 2, 3]), np.array([4, 4, 4])
    states = np.zeros(3, dtype=np.int64)
    b.pitch_base, b.pitch_range, b.pattern = a.pitch_base, a.pitch_range, a.pattern
    ma, mb = w.render_mel(ph, dur, states, a), w.render_mel(ph, dur, states, b)
    assert not np.allclose(ma, mb)
    # with no coloration the difference is exactly the timbre vector on every row
    a.coloration = b.coloration = None
    diff = w.render_mel(ph, dur, states, a).astype(np.float64) - w.render_mel(ph, dur, states, b)
    assert np.allclose(diff, (a.timbre_vec - b.timbre_vec)[None, :], atol=1e-5)


def test_style_range_checked():
    w = World(SMALL)
    bad = SpeakerStyle(10.0, 10.0, 1.0, np.zeros(SMALL.bins))
    with pytest.raises(ValueError):
        gen_speaker(0, bad, w, 1)


def test_state_bigrams_match_generator_matrix():
    w = World(CorpusConfig(seed=1))
    rng = np.random.default_rng(5)
    seqs = [w.sample_states(rng, 2, 101) for _ in range(100)]  # 10k transitions
    assert bigram_tv(seqs, w.templates[2], w.stationary[2]) < 0.05


def test_prompt_entropy_non_increasing():
    h = prompt_entropy_curve(World(CorpusConfig()), [1, 8, 64], n_samples=2000, seed=0)
    assert h[0] >= h[1] >= h[2]


def test_batch_one_speaker_pure_causal():
    b = build_batch([fake_utt(0, 5), fake_utt(0, 3)], 32)
    assert b.segment_table == [(0, 0, 8)]
    assert np.array_equal(b.attn_mask, np.tri(8, dtype=bool))


def test_batch_two_speaker_blocks():
    b = build_batch([fake_utt(0, 60), fake_utt(1, 40)], 128)
    m = b.attn_mask
    assert b.segment_table == [(0, 0, 60), (1, 60, 100)]
    assert not m[60:, :60].any() and not m[:60, 60:].any()
    assert np.array_equal(m[:60, :60], np.tri(60, dtype=bool))
    assert np.array_equal(m[60:, 60:], np.tri(40, dtype=bool))


def test_batch_rejects_oversize_utterance():
    with pytest.raises(BatchError):
        build_batch([fake_utt(0, 40)], 32)


def brute_mask(utts):
    spk = [u.speaker_id for u in utts for _ in range(u.frames)]
    n = len(spk)
    return np.array([[spk[i] == spk[j] and j <= i for j in range(n)] for i in range(n)])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 12)), min_size=1, max_size=10),
       st.integers(12, 60))
def test_batch_mask_matches_brute_force(layout, max_frames):
    utts = [fake_utt(s, f) for s, f in layout]
    b = build_batch(utts, max_frames)
    assert b.frames <= max_frames
    lead = utts[0].speaker_id
    assert b.utterances[0].speaker_id == lead
    # the lead speaker's utterances come first, first-fit in order
    fit, room = [], max_frames
    for u in utts:
        if u.speaker_id == lead and u.frames <= room:
            fit.append(id(u))
            room -= u.frames
    assert [id(u) for u in b.utterances[: len(fit)]] == fit
    assert np.array_equal(b.attn_mask, brute_mask(b.utterances))
    segs = b.segment_table
    assert segs[0][1] == 0 and segs[-1][2] == b.frames
    assert all(x[2] == y[1] for x, y in zip(segs, segs[1:]))
    assert len({s for s, _, _ in segs}) == len(segs)


def test_iter_batches_covers_everything(small):
    batches = iter_batches(small.utterances, 400)
    seen = [id(u) for b in batches for u in b.utterances]
    assert sorted(seen) == sorted(id(u) for u in small.utterances)


def test_save_load_round_trip(tmp_path, small):
    p = tmp_path / "c.jsonl"
    save_corpus(small, p)
    back = load_corpus(p)
    assert back == small
    assert dumps_corpus(back) == p.read_text()


def test_truncated_file_rejected(small):
    text = dumps_corpus(small)
    cut = "\n".join(text.splitlines()[:3]) + "\n"
    with pytest.raises(CorpusFormatError):
        loads_corpus(cut)
    half = text[: len(text) // 2]
    with pytest.raises(CorpusFormatError) as e:
        loads_corpus(half)
    assert e.value.line is not None


def test_version_mismatch(small):
    text = dumps_corpus(small).replace('"version": 1', '"version": 2', 1)
    with pytest.raises(CorpusVersionError):
        loads_corpus(text)


def test_out_of_vocab_phoneme_line_number(small):
    lines = dumps_corpus(small).splitlines()
    lines[2] = lines[2].replace('"phonemes": [', '"phonemes": [999, ', 1)
    with pytest.raises(CorpusFormatError) as e:
        loads_corpus("\n".join(lines) + "\n")
    assert e.value.line == 3


def test_utterance_invariants():
    with pytest.raises(ValueError):
        Utterance(0, [1, 2], [1, 1], np.zeros((3, 2)))
    with pytest.raises(ValueError):
        Utterance(0, [1], [0], np.zeros((0, 2)))
