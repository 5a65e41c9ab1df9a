import json

import numpy as np
import pytest

from longprompt_tts.cli import build_parser, load_config, main
from longprompt_tts.config import desk_config, tiny_config
from longprompt_tts.evaluation import REPORT_COLUMNS, PromptLenReport
from longprompt_tts.synthesis import read_melgrid
from longprompt_tts.training import read_loss_curve


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.json"
    tiny_config(0).save(cfg)
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(d / "corpus.jsonl")]) == 0
    for stage in ("vqgan", "plm", "adm"):
        assert main(["train", stage, "--corpus", str(d / "corpus.jsonl"), "--config", str(cfg),
                     "--out", str(d / "run")]) == 0
    return d


def synth(run, out, *extra):
    return main(["synth", "--run", str(run / "run"), "--corpus", str(run / "corpus.jsonl"), "--speaker", "3",
                 "--prompt-sents", "2", "--out", str(out), *extra])


def test_gen_corpus_bytes_deterministic(run, tmp_path):
    assert main(["gen-corpus", "--config", str(run / "tiny.json"), "--out", str(tmp_path / "c.jsonl")]) == 0
    assert (tmp_path / "c.jsonl").read_bytes() == (run / "corpus.jsonl").read_bytes()
    main(["gen-corpus", "--config", str(run / "tiny.json"), "--seed", "5", "--out", str(tmp_path / "d.jsonl")])
    assert (tmp_path / "d.jsonl").read_bytes() != (run / "corpus.jsonl").read_bytes()


def test_train_bytes_deterministic(run, tmp_path):
    assert main(["train", "vqgan", "--corpus", str(run / "corpus.jsonl"), "--config", str(run / "tiny.json"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "vqgan.mts2").read_bytes() == (run / "run" / "vqgan.mts2").read_bytes()


def test_train_requires_first_stage(run, tmp_path, capsys):
    rc = main(["train", "adm", "--corpus", str(run / "corpus.jsonl"), "--config", str(run / "tiny.json"),
               "--out", str(tmp_path)])
    assert rc == 2
    assert "vqgan" in capsys.readouterr().err


def test_train_resume(run, tmp_path):
    args = ["train", "vqgan", "--corpus", str(run / "corpus.jsonl"), "--config", str(run / "tiny.json"),
            "--out", str(tmp_path)]
    assert main([*args, "--steps", "10"]) == 0
    assert main([*args, "--resume"]) == 0
    _, recs = read_loss_curve(tmp_path / "vqgan_losses.jsonl")
    _, ref = read_loss_curve(run / "run" / "vqgan_losses.jsonl")
    assert [r["step"] for r in recs] == [r["step"] for r in ref]
    assert max(abs(a["loss"] - b["loss"]) for a, b in zip(recs, ref)) < 1e-8


def test_synth_bytes_deterministic(run, tmp_path):
    assert synth(run, tmp_path / "a.mg") == 0
    assert synth(run, tmp_path / "b.mg") == 0
    assert (tmp_path / "a.mg").read_bytes() == (tmp_path / "b.mg").read_bytes()


def test_synth_output_contract(run, tmp_path):
    assert synth(run, tmp_path / "a.mg", "--timbre-frames", "30", "--phonemes", "1,2,3,4,5") == 0
    res = read_melgrid(tmp_path / "a.mg")
    assert res.mel.dtype == np.float32
    assert res.mel.shape[0] == int(res.durations.sum()) == res.metrics["frames"]
    assert len(res.durations) == 5 and (res.durations >= 1).all()
    assert res.metrics["timbre_frames"] <= 30
    assert len(res.codes) == -(-res.mel.shape[0] // tiny_config().vq.hop)


def test_synth_mel_payload_is_little_endian_f32(run, tmp_path):
    import base64
    synth(run, tmp_path / "a.mg")
    head, body, _ = [json.loads(x) for x in (tmp_path / "a.mg").read_text().splitlines()]
    raw = base64.b64decode(body["mel"])
    mel = np.frombuffer(raw, dtype="<f4").reshape(head["frames"], head["bins"])
    assert np.array_equal(mel, read_melgrid(tmp_path / "a.mg").mel)


def test_interp_synth(run, tmp_path):
    base = ["interp-synth", "--run", str(run / "run"), "--corpus", str(run / "corpus.jsonl"),
            "--flat-speaker", "3", "--rhy-speaker", "0", "--prompt-sents", "2"]
    assert main([*base, "--gamma", "0.25", "--out", str(tmp_path / "a.mg")]) == 0
    assert read_melgrid(tmp_path / "a.mg").metrics["gamma"] == 0.25
    with pytest.raises(SystemExit):
        main([*base, "--gamma", "1.5", "--out", str(tmp_path / "b.mg")])


def test_eval_promptlen_single_length(run, tmp_path):
    out = tmp_path / "r.jsonl"
    assert main(["eval-promptlen", "--run", str(run / "run"), "--corpus", str(run / "corpus.jsonl"),
                 "--lengths", "1", "--timbre-refs", "1", "--trials", "5", "--window", "4", "--out", str(out)]) == 0
    rep = PromptLenReport.loads(out.read_text())
    assert len(rep.rows) == 1 and rep.rows[0]["prompt_len"] == 1
    assert PromptLenReport.loads(rep.dumps()) == rep
    assert json.loads(out.read_text().splitlines()[0])["columns"] == list(REPORT_COLUMNS)


def test_report_round_trip_and_errors():
    rep = PromptLenReport([{c: i for i, c in enumerate(REPORT_COLUMNS)}],
                          [{"metric": "code_acc", "from": 4, "to": 16, "wins": 3, "losses": 1, "ties": 0, "p": 0.31}])
    assert PromptLenReport.loads(rep.dumps()) == rep
    with pytest.raises(ValueError):
        PromptLenReport.loads('{"schema": "nope"}\n')
    with pytest.raises(ValueError):
        PromptLenReport.loads(rep.dumps() + '{"other": 1}\n')


def test_grad_check_verb(tmp_path, capsys):
    assert main(["grad-check", "dp", "--out", str(tmp_path / "g.jsonl")]) == 0
    lines = [json.loads(x) for x in (tmp_path / "g.jsonl").read_text().splitlines()]
    assert lines and all(r["case"] == "dp" and r["max_rel_err"] < 1e-4 for r in lines)


def test_seed_flag_overrides_config(run):
    cfg = load_config(str(run / "tiny.json"), 9)
    assert cfg.seed == cfg.corpus.seed == 9
    assert load_config(None, None) == desk_config(0)


def test_parser_exposes_shared_flags():
    p = build_parser()
    for verb in ("gen-corpus", "train vqgan --corpus c", "synth --run r --corpus c --speaker 0",
                 "interp-synth --run r --corpus c --flat-speaker 0 --rhy-speaker 1", "eval-promptlen --run r --corpus c",
                 "ablate all"):
        a = p.parse_args([*verb.split(), "--config", "x.json", "--seed", "7", "--out", "o"])
        assert (a.config, a.seed, a.out) == ("x.json", 7, "o")
