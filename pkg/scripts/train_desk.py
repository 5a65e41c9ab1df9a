"""Train the full desk-scale pipeline and keep its corpus next to the checkpoints.

    python scripts/train_desk.py --out runs/desk --seed 0
"""

import argparse
import logging
import time

from longprompt_tts.config import desk_config
from longprompt_tts.corpus import gen_corpus, save_corpus
from longprompt_tts.experiments import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = desk_config(a.seed)
    corpus = gen_corpus(cfg.corpus)
    t = time.time()
    run_pipeline(cfg, a.out, corpus)
    save_corpus(corpus, f"{a.out}/corpus.jsonl")
    cfg.save(f"{a.out}/config.json")
    print(f"trained in {time.time() - t:.0f}s -> {a.out}")


if __name__ == "__main__":
    main()
