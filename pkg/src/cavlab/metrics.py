"""Alignment metrics for CAVs and the sweep that tabulates them."""

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import synthcorpus as sc
from .errors import CavlabError, DegenerateSamples
from .microcnn import forward_features
from .seeding import derive_seed, make_rng

TRANSFORMS = {
    "flip": "hflip",
    "noise": "gaussian_noise",
    "grayscale": "grayscale",
    "background": "background_replace",
}
CSV_COLUMNS = (
    "concept", "method", "pooled", "train_size", "repeat", "accuracy", "hard_accuracy",
    "segmentation", "flip", "noise", "grayscale", "background", "similarity", "skipped_samples",
)
SCORE_COLUMNS = CSV_COLUMNS[5:13]


def accuracy(cav, Zp_test, Zn_test):
    """Fraction of correct decisions over the union of both sets."""
    if len(Zp_test) == 0 or len(Zn_test) == 0:
        raise ValueError("accuracy needs non-empty positive and negative sets")
    tp = int(np.count_nonzero(cav.decide(np.asarray(Zp_test))))
    tn = int(np.count_nonzero(~cav.decide(np.asarray(Zn_test))))
    return (tp + tn) / (len(Zp_test) + len(Zn_test))


def _donor_pool(corpus):
    pool = corpus.indices("buffer", False)
    if len(pool) == 0:
        pool = corpus.indices("test", False)
    if len(pool) == 0:
        raise CavlabError("no concept-free images to draw backgrounds from")
    return pool


def hard_images(corpus, seed, split="test"):
    """Split positives with every background pixel swapped for a concept-free donor."""
    pos = corpus.indices(split, True)
    pool = _donor_pool(corpus)
    out = np.empty((len(pos),) + corpus.images.shape[1:], dtype=corpus.images.dtype)
    for j, i in enumerate(pos):
        d = pool[int(make_rng(seed, "hard", int(i)).integers(len(pool)))]
        out[j] = sc.replace_background(corpus.images[i], corpus.masks[i], corpus.images[d], bool(corpus.labels[d]))
    return out


def hard_accuracy(cav, corpus, model, seed=0, Zp_hard=None):
    """Accuracy with test positives re-rendered on foreign backgrounds.

    Negatives are left as they are.  ``Zp_hard`` lets a caller reuse
    activations of :func:`hard_images` across many CAVs.
    """
    if Zp_hard is None:
        Zp_hard = forward_features(model, hard_images(corpus, seed), cav.layer_id)
    Z = corpus.features(model, cav.layer_id)
    return accuracy(cav, Zp_hard, Z[corpus.indices("test", False)])


def shifted_attribution(cav, z):
    """phi* = b/HW + sum_c v_c * z_c for one (C, H, W) map or a batch."""
    z = np.asarray(z, dtype=np.float64)
    w = cav.weights.astype(np.float64)
    if z.shape[-3:] != w.shape:
        raise ValueError(f"activations {z.shape} do not match CAV {w.shape}")
    hw = w.shape[1] * w.shape[2]
    return np.einsum("chw,...chw->...hw", w, z) + cav.bias / hw


def segmentation_terms(cav, Z, M):
    """Per-pair fraction of positive attribution inside the mask; NaN where none is positive."""
    phi = np.maximum(shifted_attribution(cav, Z), 0.0)
    total = phi.sum(axis=(-2, -1))
    inside = (phi * np.asarray(M, dtype=np.float64)).sum(axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0.0, inside / np.where(total > 0.0, total, 1.0), np.nan)


def segmentation_score(cav, pairs, return_skipped=False):
    from .probes import as_seg_pairs

    Z, M = as_seg_pairs(pairs)
    terms = segmentation_terms(cav, Z, M)
    ok = ~np.isnan(terms)
    if not ok.any():
        raise DegenerateSamples("no pair has positive attribution")
    score = float(terms[ok].mean())
    return (score, int((~ok).sum())) if return_skipped else score


def robustness_terms(cav, Z, Z_aug):
    """|v . dz| / ||dz|| per sample with the expanded CAV; NaN for unchanged samples."""
    dz = (np.asarray(Z_aug, dtype=np.float64) - np.asarray(Z, dtype=np.float64)).reshape(len(Z), -1)
    w = cav.weights.reshape(-1).astype(np.float64)
    w = w / np.sqrt(w @ w)
    n = np.linalg.norm(dz, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.abs(dz @ w) / np.where(n > 0.0, n, 1.0)
    return np.where(n > 0.0, np.minimum(r, 1.0), np.nan)


def robustness_from_features(cav, Z, Z_aug, return_skipped=False):
    terms = robustness_terms(cav, Z, Z_aug)
    ok = ~np.isnan(terms)
    if not ok.any():
        raise DegenerateSamples("transformation changed no activations")
    r = float(1.0 - terms[ok].mean())
    return (r, int((~ok).sum())) if return_skipped else r


def augmented_images(corpus, indices, transform, seed, sigma=0.05):
    kind = TRANSFORMS.get(transform, transform)
    donors = corpus.images[_donor_pool(corpus)] if kind == "background_replace" else None
    return np.stack([
        sc.augment(corpus.images[i], kind, derive_seed(seed, transform, int(i)), sigma, corpus.masks[i], donors)
        for i in indices
    ])


def robustness(cav, images, model, transform, seed=0, sigma=0.05, masks=None, donors=None, return_skipped=False):
    """1 - mean |v . dz| / ||dz|| over images under a label-preserving transformation."""
    images = np.asarray(images)
    kind = TRANSFORMS.get(transform, transform)
    aug = np.stack([
        sc.augment(x, kind, derive_seed(seed, transform, j), sigma, None if masks is None else masks[j], donors)
        for j, x in enumerate(images)
    ])
    Z = forward_features(model, images, cav.layer_id)
    Za = forward_features(model, aug, cav.layer_id)
    return robustness_from_features(cav, Z, Za, return_skipped)


# --- sweep -----------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ReportCell:
    concept: str
    method: str
    pooled: str
    train_size: int
    repeat: int


@dataclass
class AlignmentReport:
    rows: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())

    def select(self, **where):
        return [r for r in self.rows if all(r.get(k) == v for k, v in where.items())]

    def values(self, column, **where):
        vals = [r.get(column) for r in self.select(**where)]
        return np.array([v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))])

    def mean(self, column, **where):
        v = self.values(column, **where)
        return float(v.mean()) if len(v) else float("nan")

    def summary(self):
        """Mean and population std per (concept, method, pooled, train_size) over repeats."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r["concept"], r["method"], r["pooled"], r["train_size"]), []).append(r)
        out = []
        for key, rows in sorted(groups.items()):
            rec = dict(zip(("concept", "method", "pooled", "train_size"), key), repeats=len(rows))
            for col in SCORE_COLUMNS:
                v = [r[col] for r in rows if r.get(col) is not None]
                rec[col + "_mean"] = float(np.mean(v)) if v else None
                rec[col + "_std"] = float(np.std(v)) if v else None
            out.append(rec)
        return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(round(v, 10))
    return str(v)


@dataclass
class _ConceptData:
    corpus: object
    Z: np.ndarray
    M16: np.ndarray
    Zp_hard: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray
    Z_aug: dict


def prepare_concept(corpus, model, seed, layer="conv3", transforms=tuple(TRANSFORMS), sigma=0.05):
    """Activations shared by every cell of one concept: originals, hard positives, augmentations."""
    Z = corpus.features(model, layer)
    spatial = Z.shape[2:]
    M16 = np.stack([sc.downscale_mask(m, spatial) for m in corpus.masks])
    tp = corpus.indices("test", True)
    tn = corpus.indices("test", False)
    cseed = derive_seed(seed, corpus.concept_id)
    Zp_hard = forward_features(model, hard_images(corpus, derive_seed(cseed, "hard")), layer)
    Z_aug = {t: forward_features(model, augmented_images(corpus, tp, t, derive_seed(cseed, t), sigma), layer) for t in transforms}
    return _ConceptData(corpus, Z, M16, Zp_hard, tp, tn, Z_aug)


def training_view(corpus, model, layer="conv3"):
    """Just what CAV training needs (no hard or augmented activations)."""
    Z = corpus.features(model, layer)
    M16 = np.stack([sc.downscale_mask(m, Z.shape[2:]) for m in corpus.masks])
    return _ConceptData(corpus, Z, M16, None, corpus.indices("test", True), corpus.indices("test", False), {})


def _subsample(corpus, n, seed, repeat):
    rng = make_rng(seed, corpus.concept_id, "subsample", n, repeat)
    pos = corpus.indices("train", True)
    neg = corpus.indices("train", False)
    if n > min(len(pos), len(neg)):
        raise CavlabError(f"train_size {n} exceeds the training pool ({len(pos)}/{len(neg)})")
    return np.sort(rng.choice(pos, n, replace=False)), np.sort(rng.choice(neg, n, replace=False))


def train_cell_cavs(data, methods, pooled, n, repeat, seed, cfg=None):
    """All requested CAVs for one (concept, pooling, N, repeat); failures map to exceptions."""
    from .probes import ProbeConfig, SegPairs, mix, train_classifier, train_joint, train_pattern, train_segmentation

    cfg = replace(cfg or ProbeConfig(), pooled=pooled)
    try:
        pos, neg = _subsample(data.corpus, n, seed, repeat)
    except CavlabError as e:
        return {m: e for m in methods}
    Z = data.Z
    idx = np.concatenate([pos, neg])
    pairs = SegPairs(Z[idx], data.M16[idx])
    labels = np.r_[np.ones(len(pos), bool), np.zeros(len(neg), bool)]
    meta = dict(concept_id=data.corpus.concept_id, train_size=n, seed=derive_seed(seed, data.corpus.concept_id, n, repeat))
    out = {}

    def attempt(name, fn):
        try:
            out[name] = fn()
        except (CavlabError, ValueError, FloatingPointError) as e:
            out[name] = e

    need_clf = {"clf", "mix", "joint"} & set(methods)
    need_seg = {"seg", "mix"} & set(methods)
    if need_clf:
        attempt("clf", lambda: train_classifier(Z[pos], Z[neg], cfg, **meta))
    if need_seg:
        attempt("seg", lambda: train_segmentation(pairs, cfg, labels=labels, **meta))
    if "pat" in methods:
        attempt("pat", lambda: train_pattern(Z[pos], Z[neg], cfg, **meta))
    if "mix" in methods:
        if isinstance(out.get("clf"), Exception) or isinstance(out.get("seg"), Exception):
            out["mix"] = CavlabError("constituent CAV failed")
        else:
            attempt("mix", lambda: mix(out["clf"], out["seg"], cfg.beta, Z[pos], Z[neg]))
    if "joint" in methods:
        init = out.get("clf")
        if isinstance(init, Exception):
            init = None
        attempt("joint", lambda: train_joint(Z[pos], Z[neg], pairs, cfg, init=init, **meta))
    return {m: out[m] for m in methods}


def evaluate_cav(cav, data):
    """Every per-CAV column of the report for one concept's shared activations."""
    from .probes import SegPairs

    Z = data.Z
    tp, tn = data.test_pos, data.test_neg
    row = dict(
        accuracy=accuracy(cav, Z[tp], Z[tn]),
        hard_accuracy=accuracy(cav, data.Zp_hard, Z[tn]),
    )
    skipped = 0
    try:
        row["segmentation"], k = segmentation_score(cav, SegPairs(Z[tp], data.M16[tp]), return_skipped=True)
        skipped += k
    except DegenerateSamples:
        row["segmentation"] = None
        skipped += len(tp)
    for t, Za in data.Z_aug.items():
        try:
            row[t], k = robustness_from_features(cav, Z[tp], Za, return_skipped=True)
            skipped += k
        except DegenerateSamples:
            row[t] = None
            skipped += len(tp)
    row["skipped_samples"] = skipped
    return row


def run_report(corpus_set, model, methods=("clf", "pat", "seg", "mix", "joint"), train_sizes=(50,), repeats=5, seed=0,
               poolings=("none", "sum"), cfg=None, log=None, prepared=None, workers=1):
    """Evaluate the full (concept, method, pooling, N, repeat) cross product.

    ``corpus_set`` maps concept ids to corpora.  A cell that fails is kept
    as a row of empty scores with the error name in ``skipped_samples``'s
    place, so one bad cell never aborts the sweep.
    """
    if not methods:
        raise ValueError("methods must not be empty")
    if isinstance(corpus_set, (list, tuple)):
        corpus_set = {c.concept_id: c for c in corpus_set}
    concepts = list(corpus_set)
    prepared = dict(prepared or {})

    def one_concept(name):
        data = prepared.get(name) or prepare_concept(corpus_set[name], model, seed)
        cells, cavs = {}, {}
        for pooled in poolings:
            for n in train_sizes:
                for rep in range(repeats):
                    trained = train_cell_cavs(data, methods, pooled, n, rep, seed, cfg)
                    for method in methods:
                        cell = ReportCell(name, method, pooled, int(n), rep)
                        cav = trained[method]
                        row = dict(concept=name, method=method, pooled=pooled, train_size=int(n), repeat=rep)
                        if isinstance(cav, Exception):
                            row["error"] = type(cav).__name__
                        else:
                            try:
                                row.update(evaluate_cav(cav, data))
                                cavs[cell] = cav
                            except (CavlabError, ValueError) as e:
                                row["error"] = type(e).__name__
                        cells[cell] = row
                    if log:
                        log(dict(event="cell", concept=name, pooled=pooled, train_size=int(n), repeat=rep))
        return cells, cavs

    cells = {}
    cavs = {}
    if workers > 1 and len(concepts) > 1:
        # numpy releases the GIL in its kernels; results are merged by key so order never matters
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_concept, concepts))
    else:
        results = [one_concept(name) for name in concepts]
    for c, v in results:
        cells.update(c)
        cavs.update(v)
    # mean pairwise cosine across concepts per (method, pooling, N, repeat)
    from .misalign import mean_offdiagonal, similarity_matrix

    for method in methods:
        for pooled in poolings:
            for n in train_sizes:
                for rep in range(repeats):
                    group = [ReportCell(c, method, pooled, int(n), rep) for c in concepts]
                    have = [cavs[g] for g in group if g in cavs]
                    sim = mean_offdiagonal(similarity_matrix(have)) if len(have) >= 2 else None
                    for g in group:
                        if g in cavs:
                            cells[g]["similarity"] = sim
    rows = []
    for name in concepts:
        for method in methods:
            for pooled in poolings:
                for n in train_sizes:
                    for rep in range(repeats):
                        row = cells[ReportCell(name, method, pooled, int(n), rep)]
                        if "error" in row:
                            row["skipped_samples"] = "error:" + row.pop("error")
                        rows.append(row)
    return AlignmentReport(rows), cavs
