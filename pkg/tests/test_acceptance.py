"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict through the ``criterion`` fixture; the
lines are printed together in the terminal summary.
"""

import time

import numpy as np
import pytest

from cavlab import metrics as MT
from cavlab import microcnn as mc
from cavlab import misalign as M
from cavlab import probes as P
from cavlab import synthcorpus as sc
from cavlab import tensor as T
from cavlab import viz as V
from cavlab.errors import InsufficientFalsePositives
from cavlab.pipeline import build_corpus, threads
from conftest import default_config

pytestmark = pytest.mark.acceptance


def _unit(rng, shape):
    w = rng.normal(size=shape)
    return w / np.linalg.norm(w)


def each_concept(corpora):
    """Iterate concepts, releasing each one's activations before the next is computed."""
    for k, (name, corpus) in enumerate(corpora.items()):
        yield k, name, corpus
        corpus.release_features()


def _train_view(corpus, model):
    Z = corpus.features(model)
    return Z[corpus.indices("train", True)], Z[corpus.indices("train", False)]


# --- 1: separability ------------------------------------------------------------


def test_criterion_01_separability(trained_model, corpora_095, criterion):
    cases = [(c, 50) for c in corpora_095.values()]
    extra = [
        ("circle", sc.SpuriousSpec("corner_marker", 0.5), 100),
        ("ring", sc.SpuriousSpec("background_texture", 0.9), 100),
        ("bar", sc.SpuriousSpec("global_tint", 0.0), 100),
        ("star", sc.SpuriousSpec("corner_marker", 1.0), 10),
    ]
    for i, (kind, spur, n) in enumerate(extra):
        cases.append((sc.generate(sc.ConceptSpec(kind), spur, sc.Counts(n, n, 10, 10, 0), seed=300 + i), n))
    worst_acc, worst_time = 1.0, 0.0
    for corpus, n in cases:
        Zp, Zn = _train_view(corpus, trained_model)
        corpus.release_features()
        Zp, Zn = Zp[:n], Zn[:n]
        t0 = time.perf_counter()
        cav = P.train_classifier(Zp, Zn)
        worst_time = max(worst_time, time.perf_counter() - t0)
        worst_acc = min(worst_acc, MT.accuracy(cav, Zp, Zn))
    ok = worst_acc == 1.0 and worst_time <= 10.0
    criterion.record(ok, f"min training accuracy {worst_acc:.4f} over {len(cases)} corpora, slowest probe {worst_time:.2f}s")
    assert ok


# --- 2: FP-CAV -------------------------------------------------------------------


def test_criterion_02_fp_cav(trained_model, corpora_095, criterion):
    t0 = time.perf_counter()
    acc_clf, acc_fp, cos, short = [], [], [], []
    for _, name, corpus in each_concept(corpora_095):
        Zp, Zn = _train_view(corpus, trained_model)
        clf = P.train_classifier(Zp, Zn, concept_id=name)
        try:
            _, rep = M.fp_cav_from_corpus(clf, corpus, trained_model)
        except InsufficientFalsePositives:
            short.append(name)
            continue
        acc_clf.append(rep.acc_clf)
        acc_fp.append(rep.acc_fp)
        cos.append(rep.cosine)
    elapsed = time.perf_counter() - t0
    n = len(cos)
    ok = n >= 5 and np.mean(acc_fp) >= np.mean(acc_clf) - 0.15 and np.mean(cos) >= 0.4 and elapsed <= 300
    detail = (f"{n} concepts, acc_clf {np.mean(acc_clf):.3f} acc_fp {np.mean(acc_fp):.3f} "
              f"cos {np.mean(cos):.3f}, {elapsed:.0f}s" + (f", too few FPs: {short}" if short else ""))
    criterion.record(ok, detail)
    assert ok


# --- 3: completeness -----------------------------------------------------------------


def test_criterion_03_completeness(rng, criterion):
    worst = 0.0
    for i in range(1000):
        pooled = ("none", "sum")[i % 2]
        w = _unit(rng, (32, 16, 16)) if pooled == "none" else T.expand(_unit(rng, 32) / 16.0, (16, 16))
        cav = P.Cav(w / np.linalg.norm(w), rng.normal() * 5, "clf", pooled=pooled)
        z = np.maximum(rng.normal(size=(32, 16, 16)) * rng.uniform(0.1, 10), 0)
        phi = MT.shifted_attribution(cav, z)
        logit = float(cav.logit(z))
        worst = max(worst, abs(float(phi.sum()) - logit) / (1 + abs(logit)))
    ok = worst <= 1e-5
    criterion.record(ok, f"worst relative gap {worst:.2e} over 1000 pairs")
    assert ok


# --- 4: pooling identity ------------------------------------------------------------


def test_criterion_04_pooling_identity(rng, criterion):
    worst = 0.0
    for _ in range(1000):
        c, h, w = rng.integers(1, 40), rng.integers(1, 20), rng.integers(1, 20)
        alpha = rng.normal(size=c)
        z = rng.normal(size=(c, h, w)) * rng.uniform(0.01, 100)
        pooled = float(alpha @ T.pool(z[None], "sum")[0])
        expanded = T.dot(T.expand(alpha, (h, w)), z)
        worst = max(worst, abs(pooled - expanded) / max(abs(pooled), abs(expanded), 1e-12))
    flips = 0
    for pooled in ("sum", "max"):
        cav = P.Cav(T.expand(_unit(rng, 32) / 16.0, (16, 16)), 0.3, "clf", pooled=pooled)
        Z = rng.normal(size=(200, 32, 16, 16))
        perm = rng.permutation(256)
        Zs = Z.reshape(200, 32, 256)[:, :, perm].reshape(Z.shape)
        flips += int(np.sum(cav.decide(Z) != cav.decide(Zs)))
    ok = worst <= 1e-5 and flips == 0
    criterion.record(ok, f"worst relative gap {worst:.2e} over 1000 draws, {flips} decision flips under permutation")
    assert ok


# --- 5: gradient oracles ---------------------------------------------------------------


def _fd_check(f, g, x, rng, n=12, h=1e-5):
    """Central differences at random coordinates; returns the worst relative error."""
    worst = 0.0
    for _ in range(n):
        idx = tuple(rng.integers(s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (f(xp) - f(xm)) / (2 * h)
        worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
    return worst


def _kinks(model, x):
    k = mc._trunk(model, x[None])
    return [k["h1"] > 0, k["h2"] > 0, k["h3"] > 0, k["i1"], k["i2"]]


def _fd_input(f, g, x, model, rng, n=12, h=1e-5):
    """Like _fd_check, skipping coordinates whose perturbation flips a ReLU or pool winner."""
    base = _kinks(model, x)
    worst, checked = 0.0, 0
    for _ in range(50 * n):
        idx = tuple(rng.integers(s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        if any(not np.array_equal(a, b) for s in (xp, xm) for a, b in zip(base, _kinks(model, s))):
            continue
        fd = (f(xp) - f(xm)) / (2 * h)
        worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
        checked += 1
        if checked == n:
            break
    return worst if checked == n else float("inf")


def test_criterion_05_gradient_oracles(trained_model, rng, criterion):
    t0 = time.perf_counter()
    Z = rng.uniform(size=(6, 4, 5, 5))
    M16 = (rng.uniform(size=(6, 5, 5)) < 0.4).astype(float)
    Xp, Xn = Z[:3].reshape(3, -1), Z[3:].reshape(3, -1)
    v, b, c = rng.normal(size=(4, 5, 5)) * 0.3, 0.2, -0.1
    err = {}
    _, gw, gb = P.clf_loss(v.ravel(), b, Xp, Xn)
    err["clf"] = max(_fd_check(lambda w: P.clf_loss(w, b, Xp, Xn)[0], gw, v.ravel(), rng),
                     _fd_check(lambda bb: P.clf_loss(v.ravel(), bb[0], Xp, Xn)[0], np.array([gb]), np.array([b]), rng, n=1))
    _, gv, gc = P.seg_loss(v, Z, M16, c)
    err["seg"] = max(_fd_check(lambda w: P.seg_loss(w, Z, M16, c)[0], gv, v, rng),
                     _fd_check(lambda cc: P.seg_loss(v, Z, M16, cc[0])[0], np.array([gc]), np.array([c]), rng, n=1))
    _, gv, _, _ = P.joint_loss(v, b, Xp, Xn, Z, M16, 0.3, c)
    err["joint"] = _fd_check(lambda w: P.joint_loss(w, b, Xp, Xn, Z, M16, 0.3, c)[0], gv, v, rng)

    z = rng.uniform(size=mc.PROBE_SHAPE)
    g = mc.grad_head_wrt_z(trained_model, z, 2)
    err["head"] = _fd_check(lambda zz: mc.forward_head(trained_model, zz)[2], g, z, rng, h=1e-3)

    x = rng.uniform(0.3, 0.7, size=mc.INPUT_SHAPE)
    up = rng.normal(size=mc.PROBE_SHAPE)
    g = mc.grad_features_wrt_input(trained_model, x, up)
    err["input"] = _fd_input(lambda xx: float(np.sum(mc.forward_features(trained_model, xx) * up)), g, x, trained_model, rng)
    cav = P.Cav(_unit(rng, mc.PROBE_SHAPE), 0.0, "clf")
    _, g = V.am_gradient(cav, trained_model, x)
    err["actmax"] = _fd_input(lambda xx: V.am_objective(cav, trained_model, xx), g, x, trained_model, rng)
    elapsed = time.perf_counter() - t0

    tol = dict(clf=1e-3, seg=1e-3, joint=1e-3, head=1e-3, input=1e-2, actmax=1e-2)
    ok = all(err[k] <= tol[k] for k in tol) and elapsed <= 120
    criterion.record(ok, ", ".join(f"{k} {err[k]:.1e}" for k in tol) + f", {elapsed:.0f}s")
    assert ok


# --- 6 and 7: the default sweep ------------------------------------------------------


@pytest.fixture(scope="module")
def default_sweep(trained_model):
    """The default eight-concept sweep at rho 0.9 with five repeats, and its wall time."""
    cfg = default_config()
    t0 = time.perf_counter()
    corpora = {s.concept_id: build_corpus(cfg, s) for s in cfg.concepts}
    report, _ = MT.run_report(corpora, trained_model, methods=cfg.methods, train_sizes=cfg.train_sizes,
                              repeats=cfg.repeats, seed=cfg.sweep_seed(), poolings=cfg.pooling, workers=threads())
    return report, time.perf_counter() - t0


def test_criterion_06_robustness_bounds(default_sweep, rng, criterion):
    report, _ = default_sweep
    cols = ("flip", "noise", "grayscale", "background")
    vals = np.concatenate([report.values(c) for c in cols])
    in_range = bool(np.all((vals >= 0) & (vals <= 1)))
    cav = P.Cav(_unit(rng, (8, 4, 4)), 0.0, "clf")
    v = cav.weights.astype(np.float64)
    Zc = rng.normal(size=(50, 8, 4, 4))
    collinear = MT.robustness_from_features(cav, Zc, Zc + rng.uniform(0.1, 3, size=(50, 1, 1, 1)) * v)
    d = rng.normal(size=(50, 128))
    d -= np.outer(d @ v.ravel(), v.ravel())
    orthogonal = MT.robustness_from_features(cav, Zc, Zc + d.reshape(Zc.shape))
    ok = in_range and len(vals) > 0 and abs(collinear) <= 1e-6 and abs(orthogonal - 1) <= 1e-6
    criterion.record(ok, f"{len(vals)} scores in [{vals.min():.3f}, {vals.max():.3f}], "
                         f"collinear {collinear:.1e}, orthogonal 1{orthogonal - 1:+.1e}")
    assert ok


def test_criterion_07_metric_orderings(default_sweep, criterion):
    report, elapsed = default_sweep

    def mean(col, method, pooled="none"):
        return report.mean(col, method=method, pooled=pooled)

    acc, hard = mean("accuracy", "clf"), mean("hard_accuracy", "clf")
    seg_seg, clf_seg = mean("segmentation", "seg"), mean("segmentation", "clf")
    seg_hard = mean("hard_accuracy", "seg")
    pooled_clf_seg = mean("segmentation", "clf", "sum")
    checks = dict(a=hard < acc, b=seg_seg > clf_seg, c=seg_hard >= hard, d=pooled_clf_seg >= clf_seg)
    ok = all(checks.values()) and elapsed <= 1800
    criterion.record(ok, f"(a) {hard:.3f}<{acc:.3f} (b) {seg_seg:.3f}>{clf_seg:.3f} (c) {seg_hard:.3f}>={hard:.3f} "
                         f"(d) {pooled_clf_seg:.3f}>={clf_seg:.3f}, {elapsed:.0f}s "
                         f"[{' '.join(k for k, v in checks.items() if not v) or 'all hold'}]")
    assert ok


# --- 8 and 9: scaling in N ----------------------------------------------------------------


SCALING_N = (10, 25, 50, 100, 250)


@pytest.fixture(scope="module")
def scaling(trained_model):
    """Test accuracy and clf/pat cosine per (pooling, method, N), averaged over concepts and repeats."""
    t0 = time.perf_counter()
    counts = sc.Counts(250, 250, 100, 100, 0)
    spur = sc.SpuriousSpec("corner_marker", 0.9)
    acc, cos = {}, {}
    for i, kind in enumerate(sc.SHAPE_KINDS):
        corpus = sc.generate(sc.ConceptSpec(kind), spur, counts, seed=11 + i)
        data = MT.training_view(corpus, trained_model)
        Z = data.Z
        for pooled in ("none", "sum"):
            for n in SCALING_N:
                for rep in range(2):
                    cavs = MT.train_cell_cavs(data, ("clf", "pat"), pooled, n, rep, 11)
                    for m, cav in cavs.items():
                        acc.setdefault((pooled, m, n), []).append(MT.accuracy(cav, Z[data.test_pos], Z[data.test_neg]))
                    cos.setdefault((pooled, n), []).append(T.cosine(cavs["clf"].weights, cavs["pat"].weights))
    acc = {k: float(np.mean(v)) for k, v in acc.items()}
    cos = {k: float(np.mean(v)) for k, v in cos.items()}
    return acc, cos, time.perf_counter() - t0


def test_criterion_08_scaling_trend(scaling, criterion):
    acc, _, elapsed = scaling

    def reading(pooled):
        gain = acc[(pooled, "clf", 250)] - acc[(pooled, "clf", 10)]
        pat = [acc[(pooled, "pat", n)] for n in SCALING_N]
        return gain, max(pat) - min(pat)

    gain, spread = reading("none")
    pgain, pspread = reading("sum")
    ok = gain >= 0.02 and spread <= 0.05 and elapsed <= 1200
    criterion.record(ok, f"CLF gain {gain:.3f} (>=0.02), PAT spread {spread:.3f} (<=0.05), {elapsed:.0f}s; "
                         f"pooled: gain {pgain:.3f}, spread {pspread:.3f}")
    assert ok


def test_criterion_09_clf_pat_convergence(scaling, criterion):
    _, cos, _ = scaling
    gap = cos[("none", 10)] - cos[("none", 50)]
    pgap = cos[("sum", 10)] - cos[("sum", 50)]
    ok = gap >= 0.05
    criterion.record(ok, f"cos at N=10 {cos[('none', 10)]:.3f}, at N=50 {cos[('none', 50)]:.3f}, gap {gap:.3f}; "
                         f"pooled gap {pgap:.3f}")
    assert ok


# --- 10: TCAV -----------------------------------------------------------------------------


def test_criterion_10_tcav(trained_model, corpora_095, criterion):
    own, other, worst = [], [], 0.0
    for k, name, corpus in each_concept(corpora_095):
        Zp, Zn = _train_view(corpus, trained_model)
        Zt = corpus.features(trained_model)[corpus.indices("test", True)]
        clf = P.train_classifier(Zp, Zn, concept_id=name)
        s = V.tcav_scores(clf, Zt, trained_model).scores
        own.append(s[k])
        other.extend(np.delete(s, k))
        pooled = P.train_classifier(Zp, Zn, P.ProbeConfig(pooled="sum"), concept_id=name)
        a = V.directional_derivatives(pooled, Zt, trained_model, pooled_path=True)
        b = V.directional_derivatives(pooled, Zt, trained_model, pooled_path=False)
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)))
        sa = V.tcav_scores(pooled, Zt, trained_model, pooled_path=True).scores
        sb = V.tcav_scores(pooled, Zt, trained_model, pooled_path=False).scores
        worst = max(worst, float(np.max(np.abs(sa - sb))))
    gap = float(np.mean(own) - np.mean(other))
    ok = gap >= 0.1 and worst <= 1e-6
    criterion.record(ok, f"concept class {np.mean(own):.3f} vs others {np.mean(other):.3f} (gap {gap:.3f}), "
                         f"pooled vs expanded {worst:.1e}")
    assert ok


# --- 11: determinism -------------------------------------------------------------------------


def test_criterion_11_determinism(tiny_runs, criterion):
    _, a, b = tiny_runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.suffix in (".cav", ".cavt") or p.name == "report.csv")
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.suffix in (".cav", ".cavt") or p.name == "report.csv")
    differ = [str(r) for r in files if (a / r).read_bytes() != (b / r).read_bytes()]
    ok = files == other and not differ and any(r.name == "report.csv" for r in files)
    criterion.record(ok, f"{len(files)} files compared between a serial and a two-thread run, {len(differ)} differ")
    assert ok


# --- 12: CLM corner diagnostic -------------------------------------------------------------


def test_criterion_12_clm_corner(trained_model, corpora_095, criterion):
    plain, pooled_cc = [], []
    for _, name, corpus in each_concept(corpora_095):
        Zp, Zn = _train_view(corpus, trained_model)
        clf = P.train_classifier(Zp, Zn, concept_id=name)
        pclf = P.train_classifier(Zp, Zn, P.ProbeConfig(pooled="sum"), concept_id=name)
        Z = corpus.features(trained_model)
        for i in corpus.indices("test", True):
            plain.append(V.corner_concentration(V.render_clm(clf, corpus.images[i], trained_model, z=Z[i]).attribution))
            pooled_cc.append(V.corner_concentration(V.render_clm(pclf, corpus.images[i], trained_model, z=Z[i]).attribution))
    share = float(np.mean(np.array(plain) >= 2.0))
    ok = share >= 0.6 and np.mean(pooled_cc) < np.mean(plain)
    criterion.record(ok, f"{share:.1%} of {len(plain)} positives at >=2x, mean concentration "
                         f"{np.mean(plain):.2f} unpooled vs {np.mean(pooled_cc):.2f} pooled")
    assert ok
