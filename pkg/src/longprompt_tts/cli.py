"""Command-line entry point: ``longprompt-tts <verb> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import gradcheck
from .checkpoint import load_checkpoint
from .config import RunConfig, desk_config
from .corpus import gen_corpus, load_corpus, save_corpus
from .evaluation import split_speakers
from .experiments import (
    ablate_seed,
    ablation_config,
    dumps_ablation,
    load_pipeline,
    promptlen_experiment,
)
from .synthesis import Models, interp_synthesize, synthesize, write_melgrid
from .training import DependencyError, extract_features, require_stage, stage_rng, train_stage

log = logging.getLogger("longprompt_tts")


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _gamma(s: str) -> float:
    g = float(s)
    if not 0.0 <= g <= 1.0:
        raise argparse.ArgumentTypeError(f"gamma must lie in [0, 1], got {g}")
    return g


def load_config(path: str | None, seed: int | None) -> RunConfig:
    """Config file if given, else the desk configuration; ``--seed`` overrides both seeds."""
    cfg = RunConfig.load(path) if path else desk_config(0 if seed is None else seed)
    if seed is not None:
        cfg.seed = seed
        cfg.corpus.seed = seed
    return cfg.validate()


def _run_config(run: Path) -> RunConfig:
    return RunConfig.from_dict(load_checkpoint(run / "vqgan.mts2").config)


# --------------------------------------------------------------------- verbs

def cmd_gen_corpus(a) -> int:
    cfg = load_config(a.config, a.seed)
    corpus = gen_corpus(cfg.corpus)
    save_corpus(corpus, a.out)
    print(json.dumps({"out": str(a.out), "utterances": len(corpus.utterances), "speakers": len(corpus.speakers)}))
    return 0


def cmd_train(a) -> int:
    out = Path(a.out)
    ck = None
    if a.resume:
        ck = load_checkpoint(out / f"{a.stage}.mts2")
        cfg = RunConfig.from_dict(ck.config)
    elif a.stage != "vqgan" and (out / "vqgan.mts2").exists() and not a.config:
        cfg = _run_config(out)
    else:
        cfg = load_config(a.config, a.seed)
    corpus = load_corpus(a.corpus)
    train, _ = split_speakers(corpus.utterances, cfg.holdout_speakers)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    t = time.time()
    _, trainer = train_stage(a.stage, cfg, train, out, resume=ck, until=a.steps)
    last = trainer.history[-1] if trainer.history else {}
    print(json.dumps({"stage": a.stage, "step": trainer.step, "seconds": round(time.time() - t, 1),
                      **{k: v for k, v in last.items() if k not in ("stage", "step")}}))
    return 0


def _speaker_utts(corpus, speaker: int):
    us = corpus.by_speaker().get(speaker)
    if not us:
        raise SystemExit(f"speaker {speaker} not in corpus")
    return us


def _pick(us, n_prompt: int, seed: int, salt: str):
    """Seeded split of a speaker's utterances into prompts and one target."""
    order = stage_rng(seed, salt, 0).permutation(len(us))
    if len(us) < 2:
        raise SystemExit("speaker needs at least two utterances (prompt and target)")
    target = us[order[0]]
    prompts = [us[i] for i in order[1:1 + n_prompt]]
    return prompts, target


def _target_ph(a, target) -> np.ndarray:
    return np.asarray(_int_list(a.phonemes), dtype=np.int64) if a.phonemes else target.phonemes


def cmd_synth(a) -> int:
    run = Path(a.run)
    models = Models.load(run)
    cfg = _run_config(run)
    seed = cfg.seed if a.seed is None else a.seed
    corpus = load_corpus(a.corpus)
    us = _speaker_utts(corpus, a.speaker)
    n_prompt = max(a.prompt_sents, a.timbre_refs)
    prompts, target = _pick(us, n_prompt, seed, "synth")
    torch.manual_seed(seed)
    res = synthesize(models, prompts, _target_ph(a, target), a.prompt_sents, a.timbre_frames)
    res.metrics["speaker"] = a.speaker
    write_melgrid(res, a.out)
    print(json.dumps(res.metrics, sort_keys=True))
    return 0


def cmd_interp_synth(a) -> int:
    run = Path(a.run)
    models = Models.load(run)
    cfg = _run_config(run)
    seed = cfg.seed if a.seed is None else a.seed
    gamma = cfg.gamma if a.gamma is None else a.gamma
    corpus = load_corpus(a.corpus)
    flat, target = _pick(_speaker_utts(corpus, a.flat_speaker), a.prompt_sents, seed, "interp-flat")
    rhy, _ = _pick(_speaker_utts(corpus, a.rhy_speaker), a.prompt_sents, seed, "interp-rhy")
    res = interp_synthesize(models, flat, rhy, _target_ph(a, target), gamma, a.timbre_frames)
    write_melgrid(res, a.out)
    print(json.dumps(res.metrics, sort_keys=True))
    return 0


def cmd_eval_promptlen(a) -> int:
    run = Path(a.run)
    cfg = _run_config(run)
    if a.seed is not None:
        cfg.seed = a.seed
    lengths = _int_list(a.lengths)
    refs = _int_list(a.timbre_refs) if a.timbre_refs else [min(cfg.cond_refs, 16)] * len(lengths)
    p = load_pipeline(run, load_corpus(a.corpus), cfg)
    report, _ = promptlen_experiment(p, lengths, refs, a.trials, a.window)
    Path(a.out).write_text(report.dumps(), encoding="utf-8")
    print(report.table())
    return 0


def cmd_ablate(a) -> int:
    seeds = range(a.seed or 0, (a.seed or 0) + a.seeds)
    which = ("mrte_vs_se", "adm_vs_dp") if a.which == "all" else (a.which,)
    rows = []
    for s in seeds:
        cfg = load_config(a.config, s) if a.config else ablation_config(s)
        rows.append(ablate_seed(cfg, which))
    text = dumps_ablation(rows)
    Path(a.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_grad_check(a) -> int:
    names = None if a.module == "all" else [a.module]
    t = time.time()
    res = gradcheck.run(names, eps=a.eps, max_entries=a.max_entries)
    worst = 0.0
    lines = []
    for case, errs in res.items():
        for pname, e in errs.items():
            lines.append({"case": case, "param": pname, "max_rel_err": e})
            worst = max(worst, e)
    text = "".join(json.dumps(x) + "\n" for x in lines)
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    for case, errs in res.items():
        print(f"{case:18s} params={len(errs):3d} max_rel_err={max(errs.values()):.2e}")
    print(f"worst={worst:.2e} seconds={time.time() - t:.1f}")
    return 0 if worst < 1e-4 else 1


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longprompt-tts", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON RunConfig (default: desk configuration)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("gen-corpus", help="write a synthetic corpus (JSONL)")
    common(sp)
    sp.set_defaults(fn=cmd_gen_corpus)

    sp = sub.add_parser("train", help="train one stage; plm/adm/dp need a trained vqgan in --out")
    sp.add_argument("stage", choices=("vqgan", "plm", "adm", "dp"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--steps", type=int, help="stop at this step (default: the config's schedule)")
    sp.add_argument("--resume", action="store_true", help="continue from <out>/<stage>.mts2")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    for name, fn in (("synth", cmd_synth), ("interp-synth", cmd_interp_synth)):
        sp = sub.add_parser(name)
        sp.add_argument("--run", required=True, help="directory holding the trained checkpoints")
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--prompt-sents", type=int, default=3, help="prosody/duration prompt utterances")
        sp.add_argument("--timbre-frames", type=int, help="frame budget for timbre references")
        sp.add_argument("--phonemes", help="comma-separated target phoneme ids (default: a held-aside utterance)")
        common(sp)
        if name == "synth":
            sp.add_argument("--speaker", type=int, required=True)
            sp.add_argument("--timbre-refs", type=int, default=1,
                            help="utterances drawn as timbre references before the frame budget applies")
        else:
            sp.add_argument("--flat-speaker", type=int, required=True)
            sp.add_argument("--rhy-speaker", type=int, required=True)
            sp.add_argument("--gamma", type=_gamma, help="weight of the flat speaker's prompt")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("eval-promptlen", help="paired prompt-length evaluation report")
    sp.add_argument("--run", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--lengths", default="4,16,64")
    sp.add_argument("--timbre-refs", default="1,4,16", help="timbre budgets, one per prompt length")
    sp.add_argument("--trials", type=int, default=200)
    sp.add_argument("--window", type=int, default=4,
                    help="codes scored after each prompt; at most the shortest prompt length")
    common(sp)
    sp.set_defaults(fn=cmd_eval_promptlen)

    sp = sub.add_parser("ablate", help="baseline comparisons over several seeds")
    sp.add_argument("which", choices=("adm_vs_dp", "mrte_vs_se", "all"))
    sp.add_argument("--seeds", type=int, default=5)
    common(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("grad-check", help="finite-difference gradient check per module")
    sp.add_argument("module", nargs="?", default="all", choices=("all", *gradcheck.CASES))
    sp.add_argument("--eps", type=float, default=1e-4)
    sp.add_argument("--max-entries", type=int, default=6)
    common(sp, out_required=False)
    sp.set_defaults(fn=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return a.fn(a)
    except DependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
