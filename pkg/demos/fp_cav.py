"""Build a CAV from a probe's false positives and curate the probe with it.

Run: python demos/fp_cav.py
"""

from cavlab import metrics as MT
from cavlab import microcnn as mc
from cavlab import misalign as M
from cavlab import probes as P
from cavlab import synthcorpus as sc
from cavlab import tensor as T


def main():
    model = mc.pretrain(mc.PretrainTask(epochs=6, seed=0), sc.generate_classification(n=800, seed=0))
    corpus = sc.generate(sc.ConceptSpec("star"), sc.SpuriousSpec("corner_marker", 0.95), sc.Counts(30, 30, 50, 50, 3000), seed=2)
    Z = corpus.features(model)
    clf = P.train_classifier(Z[corpus.indices("train", True)], Z[corpus.indices("train", False)], concept_id="star")
    fp, rep = M.fp_cav_from_corpus(clf, corpus, model)
    print(f"clf accuracy {rep.acc_clf:.3f}, fp accuracy {rep.acc_fp:.3f}, cosine {rep.cosine:.3f}")
    print(f"scanned {rep.n_buffer_scanned} buffer images for {len(rep.false_positive_ids)} false positives")

    cured = M.reject(clf, fp)
    acc = MT.accuracy(cured, Z[corpus.indices("test", True)], Z[corpus.indices("test", False)])
    print(f"curated accuracy {acc:.3f}, cosine with fp {T.cosine(cured.weights, fp.weights):.1e}")


if __name__ == "__main__":
    main()
