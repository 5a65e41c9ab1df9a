"""Trend experiments on a trained desk run: prompt length, timbre budget,
matched vs. mismatched timbre, tempo recovery and prosody interpolation.

    python scripts/eval_desk.py --run runs/desk
"""

import argparse
import json
from pathlib import Path

from longprompt_tts.config import RunConfig
from longprompt_tts.corpus import load_corpus
from longprompt_tts.experiments import (
    interp_experiment,
    load_pipeline,
    matched_timbre_experiment,
    promptlen_experiment,
    tempo_experiment,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--run", default="runs/desk")
    ap.add_argument("--trials", type=int, default=200)
    a = ap.parse_args()
    run = Path(a.run)
    p = load_pipeline(run, load_corpus(run / "corpus.jsonl"), RunConfig.load(run / "config.json"))

    report, _ = promptlen_experiment(p, trials=a.trials)
    (run / "promptlen.jsonl").write_text(report.dumps(), encoding="utf-8")
    print(report.table())

    diffs = matched_timbre_experiment(p)
    print(f"matched > mismatched timbre score in {(diffs > 0).mean():.0%} of {len(diffs)} trials")
    tempo = tempo_experiment(p)
    print(f"tempo recovery: pearson r = {tempo['pearson_r']:.3f} over {len(tempo['tempo'])} speakers")
    interp = interp_experiment(p)
    print("interpolation KL to the rhythmic speaker by gamma:",
          json.dumps(dict(zip(interp["gammas"], [round(k, 4) for k in interp["kl"]]))),
          f"inversions={interp['inversions']}")


if __name__ == "__main__":
    main()
