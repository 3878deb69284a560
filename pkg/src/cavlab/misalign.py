"""False-positive CAVs, curation by rejection, and pairwise CAV similarity."""

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import CollinearCavs, DataError, InsufficientFalsePositives
from .probes import ProbeConfig, train_classifier


@dataclass
class FpReport:
    acc_clf: float
    acc_fp: float
    cosine: float
    n_buffer_scanned: int
    false_positive_ids: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _accuracy(cav, Zp, Zn):
    from .metrics import accuracy

    return accuracy(cav, Zp, Zn)


def build_fp_cav(
    v_clf,
    Zn_train,
    Zn_buffer,
    N=None,
    cfg=ProbeConfig(),
    Zp_test=None,
    Zn_test=None,
    buffer_ids=None,
    buffer_present=None,
):
    """Train a CAV on the standard probe's false positives.

    The buffer is scanned in the given order, keeping samples that ``v_clf``
    classifies as positive, until ``N`` (default ``len(Zn_train)``) are
    found.  The collected samples form the positive class against
    ``Zn_train``.  ``buffer_present`` (per-sample concept flags from the
    manifest) guards against concept images leaking into the buffer.
    """
    Zn_buffer = np.asarray(Zn_buffer, dtype=np.float64)
    N = len(Zn_train) if N is None else int(N)
    if N < 1:
        raise ValueError("N must be positive")
    if buffer_present is not None and np.any(buffer_present):
        raise DataError("buffer contains concept-positive samples")
    if buffer_ids is None:
        buffer_ids = np.arange(len(Zn_buffer))
    found = []
    scanned = 0
    for i, z in enumerate(Zn_buffer):
        scanned = i + 1
        if v_clf.decide(z):
            found.append(i)
            if len(found) == N:
                break
    if len(found) < N:
        raise InsufficientFalsePositives(len(found), N)
    fp_cfg = replace(cfg, pooled=v_clf.pooled)
    v_fp = train_classifier(
        Zn_buffer[found],
        Zn_train,
        fp_cfg,
        concept_id=v_clf.concept_id,
        layer_id=v_clf.layer_id,
        seed=v_clf.seed,
    )
    v_fp.method = "fp"
    acc_clf = acc_fp = float("nan")
    if Zp_test is not None and Zn_test is not None:
        acc_clf = _accuracy(v_clf, Zp_test, Zn_test)
        acc_fp = _accuracy(v_fp, Zp_test, Zn_test)
    report = FpReport(
        acc_clf=acc_clf,
        acc_fp=acc_fp,
        cosine=T.cosine(v_clf.weights, v_fp.weights),
        n_buffer_scanned=scanned,
        false_positive_ids=[int(buffer_ids[i]) for i in found],
    )
    return v_fp, report


def fp_cav_from_corpus(v_clf, corpus, model=None, N=None, cfg=ProbeConfig()):
    """build_fp_cav with every split pulled from a corpus and its manifest."""
    Z = corpus.features(model, v_clf.layer_id)
    tn = corpus.indices("train", False)
    buf = corpus.indices("buffer")
    items = corpus.manifest.get("items")
    present = corpus.labels[buf]
    if items is not None:
        present = present | np.array([bool(items[i]["present"]) for i in buf], dtype=bool)
    return build_fp_cav(
        v_clf,
        Z[tn],
        Z[buf],
        N=N,
        cfg=cfg,
        Zp_test=Z[corpus.indices("test", True)],
        Zn_test=Z[corpus.indices("test", False)],
        buffer_ids=buf,
        buffer_present=present,
    )


def _check_compatible(cavs):
    first = cavs[0]
    for c in cavs[1:]:
        if c.pooled != first.pooled:
            raise ValueError("CAVs use different pooling modes")
        if c.layer_id != first.layer_id or c.weights.shape != first.weights.shape:
            raise ValueError("CAVs come from different layers")


def reject(v_a, v_b):
    """Remove from ``v_a`` its component along ``v_b`` and renormalize."""
    _check_compatible([v_a, v_b])
    a = v_a.weights.astype(np.float64)
    b = v_b.weights.astype(np.float64)
    b = b / T.norm(b)
    p = T.dot(a, b) / T.norm(a)
    if abs(p) >= 1.0 - 1e-9:
        raise CollinearCavs("cannot reject a CAV from a parallel one")
    out = a - T.dot(b, a) * b
    n = T.norm(out)
    return replace(v_a, weights=(out / n).astype(np.float32), bias=v_a.bias / n, norm_before_normalize=n, diagnostics={})


def similarity_matrix(cavs):
    """Symmetric matrix of pairwise cosines with a unit diagonal."""
    cavs = list(cavs)
    if not cavs:
        raise ValueError("no CAVs given")
    _check_compatible(cavs)
    W = np.stack([c.weights.reshape(-1).astype(np.float64) for c in cavs])
    W = W / np.linalg.norm(W, axis=1, keepdims=True)
    S = W @ W.T
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 1.0)
    return np.clip(S, -1.0, 1.0)


def mean_offdiagonal(S):
    n = len(S)
    if n < 2:
        return float("nan")
    return float((S.sum() - np.trace(S)) / (n * (n - 1)))
