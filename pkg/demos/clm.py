"""Render concept localization maps for an unpooled and a pooled probe.

Run: python demos/clm.py --out clm_demo
"""

import argparse
from pathlib import Path

from cavlab import microcnn as mc
from cavlab import probes as P
from cavlab import synthcorpus as sc
from cavlab import viz as V


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="clm_demo")
    a = ap.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)

    model = mc.pretrain(mc.PretrainTask(epochs=6, seed=0), sc.generate_classification(n=800, seed=0))
    corpus = sc.generate(sc.ConceptSpec("circle"), sc.SpuriousSpec("corner_marker", 0.95), sc.Counts(40, 40, 6, 6, 0), seed=3)
    Z = corpus.features(model)
    Zp, Zn = Z[corpus.indices("train", True)], Z[corpus.indices("train", False)]
    for pooled in ("none", "sum"):
        cav = P.train_classifier(Zp, Zn, P.ProbeConfig(pooled=pooled), concept_id="circle")
        for i in corpus.indices("test", True):
            hm = V.render_clm(cav, corpus.images[i], model, z=Z[i])
            hm.save(out / f"clm_{pooled}_{i}.png")
            print(f"{pooled:4s} image {i}: corner concentration {V.corner_concentration(hm.attribution):.2f}")


if __name__ == "__main__":
    main()
