import json

import numpy as np
import pytest
import torch

from longprompt_tts.checkpoint import load_checkpoint
from longprompt_tts.config import RunConfig, tiny_config
from longprompt_tts.corpus import gen_corpus
from longprompt_tts.training import (
    LOSS_SCHEMA,
    DependencyError,
    extract_features,
    read_loss_curve,
    require_stage,
    stage_rng,
    train_stage,
)


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    cfg = tiny_config(0)
    utts = gen_corpus(cfg.corpus).utterances
    run = tmp_path_factory.mktemp("run")
    vq, _ = train_stage("vqgan", cfg, utts, run)
    return cfg, utts, run, vq


def losses(trainer, after=0):
    return [r["loss"] for r in trainer.history if r["step"] > after]


def test_stage_order_enforced(tmp_path):
    cfg = tiny_config(0)
    utts = gen_corpus(cfg.corpus).utterances
    for kind in ("plm", "adm", "dp"):
        with pytest.raises(DependencyError):
            train_stage(kind, cfg, utts, tmp_path)
    with pytest.raises(DependencyError):
        require_stage(tmp_path, "vqgan")


@pytest.mark.parametrize("kind", ["vqgan", "plm", "adm"])
def test_resume_matches_uninterrupted(setup, tmp_path, kind):
    cfg, utts, _, vq = setup
    feats = None if kind == "vqgan" else extract_features(vq, utts, cfg.cond_refs, cfg.seed)
    full_dir, part_dir = tmp_path / "full", tmp_path / "part"
    _, full = train_stage(kind, cfg, utts, full_dir, feats=feats)
    # the vqgan interruption falls on the last continuous step, before the codebook fit
    _, first = train_stage(kind, cfg, utts, part_dir, feats=feats, until=10)
    ck = load_checkpoint(part_dir / f"{kind}.mts2")
    assert ck.step == 10
    _, second = train_stage(kind, cfg, utts, part_dir, feats=feats, resume=ck)
    assert losses(first) == losses(full)[:10]
    a, b = losses(full, 10), losses(second)
    assert len(a) == len(b) == 10
    assert max(abs(x - y) for x, y in zip(a, b)) < 1e-8


def test_training_is_deterministic(setup):
    cfg, utts, _, vq = setup
    feats = extract_features(vq, utts, cfg.cond_refs, cfg.seed)
    m1, t1 = train_stage("plm", cfg, utts, feats=feats)
    m2, t2 = train_stage("plm", cfg, utts, feats=feats)
    assert losses(t1) == losses(t2)
    for p, q in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(p, q)


def test_loss_curve_file(setup):
    _, _, run, _ = setup
    header, recs = read_loss_curve(run / "vqgan_losses.jsonl")
    assert header["schema"] == LOSS_SCHEMA and header["stage"] == "vqgan"
    assert set(header["fields"]) == set(recs[0])
    steps = [r["step"] for r in recs]
    assert steps == sorted(set(steps)) and steps[-1] == 20
    assert {"recon_l1", "codebook", "commit"} <= set(recs[-1])


def test_loss_curve_rejects_bad_order(tmp_path):
    p = tmp_path / "x_losses.jsonl"
    rows = [{"schema": LOSS_SCHEMA, "stage": "x", "fields": ["loss", "step"]},
            {"step": 2, "loss": 1.0}, {"step": 2, "loss": 0.5}]
    p.write_text("".join(json.dumps(r) + "\n" for r in rows))
    with pytest.raises(ValueError):
        read_loss_curve(p)
    p.write_text('{"schema": "other"}\n')
    with pytest.raises(ValueError):
        read_loss_curve(p)


def test_checkpoint_series_and_config(setup):
    cfg, _, run, _ = setup
    assert (run / "vqgan_000010.mts2").exists() and (run / "vqgan_000020.mts2").exists()
    ck = load_checkpoint(run / "vqgan.mts2")
    assert RunConfig.from_dict(ck.config) == cfg
    assert ck.meta["opt_step"] == 20
    assert any(k.startswith("opt.m.") for k in ck.tensors)


def test_reload_reproduces_model(setup):
    cfg, utts, run, vq = setup
    back = require_stage(run, "vqgan")
    u = utts[0]
    with torch.no_grad():
        assert np.array_equal(vq.encode_prosody(u.mel)[1].codes, back.encode_prosody(u.mel)[1].codes)
    for p, q in zip(vq.parameters(), back.parameters()):
        assert torch.equal(p, q)


def test_stage_rng_streams_differ():
    a = stage_rng(0, "plm", 1).random(4)
    assert not np.array_equal(a, stage_rng(0, "adm", 1).random(4))
    assert not np.array_equal(a, stage_rng(0, "plm", 2).random(4))
    assert np.array_equal(a, stage_rng(0, "plm", 1).random(4))
