"""Train a few CAVs for one concept and compare them.

Run: python demos/quickstart.py [--epochs 6]
"""

import argparse

import numpy as np

from cavlab import metrics as MT
from cavlab import microcnn as mc
from cavlab import synthcorpus as sc
from cavlab import tensor as T


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--concept", default="circle")
    a = ap.parse_args()

    cls = sc.generate_classification(n=800, seed=0)
    model = mc.pretrain(mc.PretrainTask(epochs=a.epochs, seed=0), cls)
    corpus = sc.generate(sc.ConceptSpec(a.concept), sc.SpuriousSpec("corner_marker", 0.9), sc.Counts(30, 30, 40, 40, 0), seed=1)
    data = MT.training_view(corpus, model)
    cavs = MT.train_cell_cavs(data, ("clf", "pat", "seg", "mix", "joint"), "none", 30, 0, 0)

    Z = data.Z
    print(f"{'method':8s} {'accuracy':>9s} {'cos(clf)':>9s}")
    for name, cav in cavs.items():
        acc = MT.accuracy(cav, Z[data.test_pos], Z[data.test_neg])
        print(f"{name:8s} {acc:9.3f} {T.cosine(cav.weights, cavs['clf'].weights):9.3f}")
    print("norms:", np.round([T.norm(c.weights) for c in cavs.values()], 6))


if __name__ == "__main__":
    main()
