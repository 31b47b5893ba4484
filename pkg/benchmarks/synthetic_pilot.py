"""Train SINE and/or the baseline on the synthetic corpus and print test metrics.

Usage: python3 synthetic_pilot.py SEED EPOCHS sine,baseline [alpha=1.0] [neg=10] [lr=0.001]
"""

import sys
import time

from sinerec.data import SyntheticSpec, generate_synthetic, split_leave_one_out
from sinerec.evaluation import evaluate
from sinerec.training import TrainConfig, train


def main(argv):
    seed, epochs, models = int(argv[0]), int(argv[1]), argv[2].split(",")
    extra = dict(a.split("=", 1) for a in argv[3:])
    corpus = generate_synthetic(SyntheticSpec(seed=seed, popularity_exponent=float(extra.get("alpha", 1.0))))
    seqs = split_leave_one_out(corpus.log)
    for model in models:
        cfg = TrainConfig(K=4, L=64, D=32, n=20, epochs=epochs, seed=seed, model=model, patience=epochs,
                          negatives=int(extra.get("neg", 10)), learning_rate=float(extra.get("lr", 0.001)))
        start = time.time()
        result = train(cfg, seqs, corpus.log.num_items, on_log=print)
        labels = corpus.log.item_labels if model == "sine" else None
        report = evaluate(result.params, seqs, [10, 50], split="test", item_labels=labels)
        print(model, "time", round(time.time() - start, 1), report.lines(), flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
