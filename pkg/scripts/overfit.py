"""Overfit every stage on a four-utterance corpus and report convergence."""

import json
import logging

from longprompt_tts.experiments import overfit_experiment


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = overfit_experiment()
    res.pop("vq_history")
    res["recon_improvement"] = res["recon_l1_start"] / res["recon_l1_end"]
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
