"""Five-seed ablations: duration model vs. conv duration predictor, and
reference attention vs. a pooled-only speaker encoder.

    python scripts/ablate.py --seeds 5 --out runs/ablation.jsonl
"""

import argparse
import json
import logging
from pathlib import Path

from longprompt_tts.experiments import ablate_seed, ablation_config, ablation_summary, dumps_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="runs/ablation.jsonl")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = [ablate_seed(ablation_config(s)) for s in range(a.seeds)]
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    Path(a.out).write_text(dumps_ablation(rows), encoding="utf-8")
    print(json.dumps(ablation_summary(rows), indent=2))


if __name__ == "__main__":
    main()
