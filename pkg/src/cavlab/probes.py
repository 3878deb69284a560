"""Linear probes over probe-layer activations.

Five ways to get a concept direction: logistic classifier (``clf``),
centroid difference (``pat``), segmentation-aligned attribution (``seg``),
convex mixture of clf and seg (``mix``) and the jointly optimized objective
(``joint``).  ``fp`` CAVs come from :mod:`cavlab.misalign`.

Translation-invariant variants constrain the weights to one value per
channel; their weights are still stored expanded to (C, H, W).
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import DegenerateMasks, DegeneratePattern, ShapeMismatch, ZeroVector

METHODS = ("clf", "pat", "seg", "mix", "joint", "fp")
POOLINGS = ("none", "sum", "max")


@dataclass(frozen=True)
class ProbeConfig:
    learning_rate: float = 0.5
    max_iters: int = 2000
    # budget for the pure classification objective (clf, joint at gamma=1)
    clf_max_iters: int = 50000
    tol: float = 1e-5
    clip: float = 10.0
    beta: float = 0.5
    gamma: float = 0.99
    pooled: str = "none"
    joint_init: str = "clf"
    seg_intercept: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0 or not 0.0 <= self.gamma <= 1.0:
            raise ValueError("beta and gamma must lie in [0, 1]")
        if self.pooled not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooled!r}")
        if self.joint_init not in ("zero", "clf"):
            raise ValueError("joint_init must be 'zero' or 'clf'")


@dataclass(eq=False)
class Cav:
    weights: np.ndarray
    bias: float
    method: str
    pooled: str = "none"
    concept_id: str = ""
    layer_id: str = "conv3"
    train_size: int = 0
    seed: int = 0
    norm_before_normalize: float = 1.0
    diagnostics: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.bias = float(self.bias)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.pooled not in POOLINGS:
            raise ValueError(f"unknown pooling {self.pooled!r}")

    def __repr__(self):
        return (
            f"Cav(method={self.method!r}, pooled={self.pooled!r}, concept_id={self.concept_id!r}, "
            f"layer_id={self.layer_id!r}, shape={self.weights.shape}, bias={self.bias:.6g})"
        )

    @property
    def channel_weights(self):
        """Per-channel constants of a pooled CAV."""
        return self.weights.reshape(self.weights.shape[0], -1)[:, 0].astype(np.float64)

    def project(self, z):
        """``v . z`` for one activation tensor or a batch (GMP CAVs use max-pooled z)."""
        z = np.asarray(z, dtype=np.float64)
        single = z.shape == self.weights.shape
        if single:
            z = z[None]
        if z.shape[1:] != self.weights.shape:
            raise ShapeMismatch(f"activations {z.shape[1:]} do not match CAV {self.weights.shape}")
        if self.pooled == "max":
            out = T.pool(z, "max") @ self.channel_weights
        else:
            out = z.reshape(len(z), -1) @ self.weights.reshape(-1).astype(np.float64)
        return out[0] if single else out

    def logit(self, z):
        return self.project(z) + self.bias

    def decide(self, z):
        # exactly zero logit counts as negative
        return self.logit(z) > 0.0

    def header(self):
        return dict(
            concept_id=self.concept_id,
            method=self.method,
            pooled=self.pooled,
            layer_id=self.layer_id,
            train_size=int(self.train_size),
            seed=int(self.seed),
            bias=self.bias,
            norm_before_normalize=float(self.norm_before_normalize),
            shape=list(self.weights.shape),
        )


class SegPairs(NamedTuple):
    """Activations (N, C, H, W) with masks (N, H, W) already on the feature grid."""

    z: np.ndarray
    m: np.ndarray


def as_seg_pairs(pairs):
    if isinstance(pairs, SegPairs):
        z, m = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise ValueError("no segmentation pairs")
        z = np.stack([p[0] for p in pairs])
        m = np.stack([p[1] for p in pairs])
    z = np.asarray(z, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if z.ndim != 4 or m.shape != (z.shape[0],) + z.shape[2:]:
        raise ShapeMismatch(f"segmentation pairs have shapes {z.shape} and {m.shape}")
    return SegPairs(z, m)


# --- objectives ------------------------------------------------------------------


def _softplus(x):
    # log(1 + e^x) without overflow; faster than np.logaddexp
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def clf_features(Z, pooled):
    Z = np.asarray(Z, dtype=np.float64)
    if pooled == "none":
        return Z.reshape(len(Z), -1)
    return T.pool(Z, pooled)


def clf_loss(w, b, Xp, Xn):
    """Class-balanced binary cross-entropy and its gradient on feature rows."""
    lp = Xp @ w + b
    ln = Xn @ w + b
    loss = _softplus(-lp).mean() + _softplus(ln).mean()
    rp = (_sigmoid(lp) - 1.0) / len(lp)
    rn = _sigmoid(ln) / len(ln)
    gw = Xp.T @ rp + Xn.T @ rn
    gb = rp.sum() + rn.sum()
    return float(loss), gw, float(gb)


def attribution(v, Z):
    """phi = sum_c v_c * z_c for a batch; ``v`` is (C, H, W) or per-channel (C,)."""
    if v.ndim == 1:
        return np.tensordot(v, Z, axes=([0], [1]))
    return np.einsum("chw,nchw->nhw", v, Z)


def seg_loss(v, Z, M, c=0.0):
    """Mean per-position binary cross-entropy of sigmoid(phi + c) against the masks.

    ``c`` is the nuisance offset fitted alongside ``v``; returns the loss and
    its gradients with respect to ``v`` and ``c``.
    """
    phi = attribution(v, Z) + c
    loss = (M * _softplus(-phi) + (1.0 - M) * _softplus(phi)).mean()
    r = (_sigmoid(phi) - M) / phi.size
    if v.ndim == 1:
        g = np.tensordot(r, Z, axes=([0, 1, 2], [0, 2, 3]))
    else:
        g = np.einsum("nhw,nchw->chw", r, Z)
    return float(loss), g, float(r.sum())


def joint_loss(v, b, Xp, Xn, Z, M, gamma, c=0.0):
    """gamma * clf_loss + (1 - gamma) * seg_loss; gradients in (v, b, c)."""
    lc, gvc, gbc = clf_loss(v.reshape(-1), b, Xp, Xn)
    ls, gvs, gc = seg_loss(v, Z, M, c)
    loss = gamma * lc + (1.0 - gamma) * ls
    gv = gamma * gvc.reshape(v.shape) + (1.0 - gamma) * gvs
    return loss, gv, gamma * gbc, (1.0 - gamma) * gc


def _top_eig_gram(X):
    # largest eigenvalue of X^T X / n via the smaller Gram matrix
    n, d = X.shape
    G = X @ X.T / n if n <= d else X.T @ X / n
    return float(np.linalg.eigvalsh(G)[-1]) if G.size else 0.0


def _seg_curvature(Z, pooled):
    zp = Z.transpose(0, 2, 3, 1)  # N, H, W, C
    if pooled == "none":
        hw = Z.shape[2] * Z.shape[3]
        cov = np.einsum("nhwc,nhwd->hwcd", zp, zp) / len(Z)
        return float(np.linalg.eigvalsh(cov.reshape(-1, Z.shape[1], Z.shape[1]))[:, -1].max()) / hw
    flat = zp.reshape(-1, Z.shape[1])
    return _top_eig_gram(flat)


class _SegTerm:
    """:func:`seg_loss` with activations laid out for batched matmuls."""

    def __init__(self, seg, pooled):
        n, c, h, w = seg.z.shape
        self.pooled = pooled
        self.size = n * h * w
        zt = seg.z.transpose(2, 3, 0, 1).reshape(h * w, n, c)  # position, sample, channel
        self.m = seg.m.transpose(1, 2, 0).reshape(h * w, n)
        if pooled == "none":
            self.z = np.ascontiguousarray(zt)
            self.zT = np.ascontiguousarray(zt.transpose(0, 2, 1))
            self.shape = (c, h, w)
        else:
            self.z = np.ascontiguousarray(zt.reshape(-1, c))
            self.zT = np.ascontiguousarray(self.z.T)
            self.shape = (c,)

    def __call__(self, v, c0=0.0):
        if self.pooled == "none":
            c = self.shape[0]
            vp = v.reshape(c, -1).T  # position, channel
            phi = np.matmul(self.z, vp[:, :, None])[:, :, 0]
        else:
            phi = (self.z @ v).reshape(self.m.shape)
        phi = phi + c0
        m = self.m
        # m*sp(-phi) + (1-m)*sp(phi) == sp(phi) - m*phi
        loss = float((_softplus(phi).sum() - (m * phi).sum()) / self.size)
        r = (_sigmoid(phi) - m) / self.size
        if self.pooled == "none":
            g = np.matmul(self.zT, r[:, :, None])[:, :, 0].T.reshape(-1)
        else:
            g = self.zT @ r.reshape(-1)
        return loss, g, float(r.sum())


@dataclass
class _Problem:
    pooled: str
    gamma: float
    Xp: np.ndarray = None
    Xn: np.ndarray = None
    seg: SegPairs = None


def _descend(prob, cfg, init=None):
    """Clipped full-batch gradient descent on gamma*L_clf + (1-gamma)*L_seg.

    Parameters live in a rescaled, mean-shifted space ``v = u / s``,
    ``b = b' - u.mu / s`` so a single fixed step size suits any activation
    scale.  The reparameterization is affine, so the objective and its
    minimizers are unchanged.
    """
    g = prob.gamma
    use_clf = prob.Xp is not None
    use_seg = prob.seg is not None
    if use_clf:
        X = np.concatenate([prob.Xp, prob.Xn])
        mu = X.mean(axis=0)
        curv_clf = _top_eig_gram(X - mu) / 4.0
        d = X.shape[1]
    else:
        curv_clf = 0.0
    if use_seg:
        curv_seg = _seg_curvature(prob.seg.z, prob.pooled) / 4.0
        term = _SegTerm(prob.seg, prob.pooled)
        shape_v = term.shape
        d = int(np.prod(shape_v))
    else:
        curv_seg = 0.0
        shape_v = (d,)
    if not use_clf:
        mu = np.zeros(d)
    curv = g * curv_clf + (1.0 - g) * curv_seg
    if not curv > 0.0:
        raise ZeroVector("activations are identically zero")
    s = float(np.sqrt(curv))

    only_clf = use_clf and (not use_seg or g == 1.0)
    max_iters = cfg.clf_max_iters if only_clf else cfg.max_iters
    if only_clf and init is None and len(X) < d:
        v, b, diag = _descend_span(prob, X, mu, s, max_iters, cfg)
        return v.reshape(shape_v), b, diag

    u = np.zeros(d)
    bp = 0.0
    c0 = 0.0
    use_c = use_seg and cfg.seg_intercept
    if init is not None:
        v0, b0 = init
        u = np.asarray(v0, dtype=np.float64).reshape(-1) * s
        bp = float(b0) + float(u @ mu) / s

    trace = []
    gnorm = np.inf
    it = 0
    for it in range(max_iters + 1):
        v = u / s
        b = bp - float(u @ mu) / s
        loss = 0.0
        gv = np.zeros(d)
        gb = 0.0
        if use_clf:
            lc, gvc, gbc = clf_loss(v, b, prob.Xp, prob.Xn)
            loss += g * lc
            gv = gv + g * gvc
            gb += g * gbc
        if use_seg:
            ls, gvs, gc = term(v, c0)
            loss += (1.0 - g) * ls
            gv = gv + (1.0 - g) * gvs
            gc = (1.0 - g) * gc if use_c else 0.0
        else:
            gc = 0.0
        trace.append(loss)
        gu = gv / s - mu * (gb / s)
        gnorm = float(np.sqrt(gu @ gu + gb * gb + gc * gc))
        if gnorm < cfg.tol or it == max_iters:
            break
        step = cfg.learning_rate * (min(1.0, cfg.clip / gnorm) if gnorm > 0 else 1.0)
        u = u - step * gu
        bp = bp - step * gb
        c0 = c0 - step * gc
    v = u / s
    b = bp - float(u @ mu) / s
    return v.reshape(shape_v), b, dict(trace=trace, iterations=it, grad_norm=gnorm, offset=c0)


def _descend_span(prob, X, mu, s, max_iters, cfg):
    """The classification-only iterates of :func:`_descend`, tracked in sample space.

    Starting from zero, every gradient ``A^T r / s`` (A the centered
    features) lies in the row space of A, so ``u = A^T a`` and each step
    costs O(n^2) instead of O(n d).  Same step rule, same stopping rule.
    """
    A = X - mu
    K = A @ A.T
    n_pos = len(prob.Xp)
    a = np.zeros(len(X))
    bp = 0.0
    trace = []
    gnorm = np.inf
    it = 0
    for it in range(max_iters + 1):
        logits = K @ a / s + bp
        lp, ln = logits[:n_pos], logits[n_pos:]
        trace.append(float(_softplus(-lp).mean() + _softplus(ln).mean()))
        r = np.concatenate([(_sigmoid(lp) - 1.0) / len(lp), _sigmoid(ln) / len(ln)])
        gb = float(r.sum())
        gnorm = float(np.sqrt(max(r @ K @ r, 0.0) / (s * s) + gb * gb))
        if gnorm < cfg.tol or it == max_iters:
            break
        step = cfg.learning_rate * (min(1.0, cfg.clip / gnorm) if gnorm > 0 else 1.0)
        a = a - step * r / s
        bp = bp - step * gb
    u = A.T @ a
    return u / s, bp - float(u @ mu) / s, dict(trace=trace, iterations=it, grad_norm=gnorm, offset=0.0)


# --- CAV assembly ----------------------------------------------------------------


def _finish(v, b, method, pooled, spatial, meta, diagnostics=None):
    v = np.asarray(v, dtype=np.float64)
    full = T.expand(v, spatial) if pooled != "none" else v
    n = T.norm(full)
    w, bn = T.normalize(full, b)
    return Cav(
        weights=w,
        bias=bn,
        method=method,
        pooled=pooled,
        norm_before_normalize=n,
        diagnostics=diagnostics or {},
        **meta,
    )


def _check_sets(Zp, Zn):
    Zp = np.asarray(Zp, dtype=np.float64)
    Zn = np.asarray(Zn, dtype=np.float64)
    if len(Zp) == 0 or len(Zn) == 0:
        raise ValueError("both positive and negative activations are required")
    if Zp.shape[1:] != Zn.shape[1:]:
        raise ShapeMismatch("positive and negative activations differ in shape")
    return Zp, Zn


def _spatial(Z, pooled):
    if pooled == "none":
        return None
    if Z.ndim != 4:
        raise ShapeMismatch("pooled probes need (N, C, H, W) activations")
    return Z.shape[2:]


def midpoint_bias(cav_like, Zp, Zn):
    """-(mu+ . v + mu- . v) / 2 with the CAV's own projection rule."""
    tmp = replace(cav_like, bias=0.0) if isinstance(cav_like, Cav) else cav_like
    return -0.5 * (float(np.mean(tmp.project(Zp))) + float(np.mean(tmp.project(Zn))))


def _meta(meta, n):
    meta = dict(meta or {})
    meta.setdefault("train_size", n)
    return meta


def train_classifier(Zp, Zn, cfg=ProbeConfig(), **meta):
    """Unregularized logistic regression; only the normalized direction is kept."""
    Zp, Zn = _check_sets(Zp, Zn)
    sp = _spatial(Zp, cfg.pooled)
    prob = _Problem(cfg.pooled, 1.0, clf_features(Zp, cfg.pooled), clf_features(Zn, cfg.pooled))
    v, b, diag = _descend(prob, cfg)
    v = v.reshape(Zp.shape[1:]) if cfg.pooled == "none" else v
    return _finish(v, b, "clf", cfg.pooled, sp, _meta(meta, len(Zp)), diag)


def train_pattern(Zp, Zn, cfg=ProbeConfig(), **meta):
    """Difference of class centroids, thresholded halfway between their projections."""
    Zp, Zn = _check_sets(Zp, Zn)
    if cfg.pooled == "max":
        raise ValueError("pattern CAVs support 'none' and 'sum' pooling only")
    sp = _spatial(Zp, cfg.pooled)
    v = Zp.mean(axis=0) - Zn.mean(axis=0)
    if cfg.pooled == "sum":
        v = T.pool(v, "sum")
    if not np.any(v):
        raise DegeneratePattern("positive and negative centroids coincide")
    cav = _finish(v, 0.0, "pat", cfg.pooled, sp, _meta(meta, len(Zp)))
    cav.bias = midpoint_bias(cav, Zp, Zn)
    return cav


def _split_by_mask(seg, labels):
    if labels is None:
        labels = seg.m.reshape(len(seg.m), -1).any(axis=1)
    labels = np.asarray(labels, dtype=bool)
    return seg.z[labels], seg.z[~labels]


def _check_masks(seg):
    if seg.m.min() == seg.m.max():
        raise DegenerateMasks("every mask is identical (all zero or all one)")


def train_segmentation(pairs, cfg=ProbeConfig(), labels=None, **meta):
    """Fit v so that sigmoid(sum_c v_c * z_c + c) reproduces the downscaled masks.

    The offset ``c`` (one scalar shared by every position, switched off by
    ``cfg.seg_intercept=False``) only absorbs the background base rate and
    is discarded after training.  The bias is set afterwards by the
    centroid-midpoint rule on the same activations, split into
    positives/negatives by ``labels`` (or by whether the mask is non-empty).
    """
    seg = as_seg_pairs(pairs)
    _check_masks(seg)
    sp = _spatial(seg.z, cfg.pooled)
    prob = _Problem(cfg.pooled, 0.0, seg=seg)
    v, _, diag = _descend(prob, cfg)
    Zp, Zn = _split_by_mask(seg, labels)
    cav = _finish(v, 0.0, "seg", cfg.pooled, sp, _meta(meta, len(Zp)), diag)
    if len(Zp) and len(Zn):
        cav.bias = midpoint_bias(cav, Zp, Zn)
    return cav


def train_joint(Zp, Zn, pairs, cfg=ProbeConfig(), init=None, **meta):
    """Descent on gamma*L_clf + (1-gamma)*L_seg.

    With ``cfg.joint_init == 'clf'`` the descent starts from the classifier
    solution (pass it as ``init`` to avoid retraining).
    """
    Zp, Zn = _check_sets(Zp, Zn)
    seg = as_seg_pairs(pairs)
    _check_masks(seg)
    sp = _spatial(Zp, cfg.pooled)
    prob = _Problem(cfg.pooled, cfg.gamma, clf_features(Zp, cfg.pooled), clf_features(Zn, cfg.pooled), seg)
    start = None
    if cfg.joint_init == "clf":
        if init is None:
            init = train_classifier(Zp, Zn, cfg)
        w = init.weights.astype(np.float64) * init.norm_before_normalize
        start = (w if cfg.pooled == "none" else w[:, 0, 0], init.bias * init.norm_before_normalize)
    v, b, diag = _descend(prob, cfg, start)
    return _finish(v, b, "joint", cfg.pooled, sp, _meta(meta, len(Zp)), diag)


def mix(v_clf, v_seg, beta=0.5, Zp=None, Zn=None):
    """Normalized convex combination; the bias comes from the midpoint rule on (Zp, Zn)."""
    for attr in ("concept_id", "layer_id", "pooled"):
        if getattr(v_clf, attr) != getattr(v_seg, attr):
            raise ValueError(f"cannot mix CAVs with different {attr}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    w = beta * v_clf.weights.astype(np.float64) + (1.0 - beta) * v_seg.weights.astype(np.float64)
    n = T.norm(w)
    if n < 1e-12:
        raise ZeroVector("mixed CAV vanishes")
    cav = Cav(
        weights=w / n,
        bias=0.0,
        method="mix",
        pooled=v_clf.pooled,
        concept_id=v_clf.concept_id,
        layer_id=v_clf.layer_id,
        train_size=v_clf.train_size,
        seed=v_clf.seed,
        norm_before_normalize=n,
    )
    if Zp is not None and Zn is not None:
        cav.bias = midpoint_bias(cav, Zp, Zn)
    return cav


def expand_pooled(alpha, spatial=(16, 16)):
    return T.expand(alpha, spatial)


# --- persistence ------------------------------------------------------------------


def _paths(path):
    p = Path(path)
    if p.suffix in (".cav", ".cavt"):
        p = p.with_suffix("")
    return p.with_suffix(".cav"), p.with_suffix(".cavt")


def save_cav(cav, path):
    head, body = _paths(path)
    head.parent.mkdir(parents=True, exist_ok=True)
    head.write_text(json.dumps(cav.header(), indent=1, sort_keys=True) + "\n")
    T.write_tensor(body, cav.weights)
    return head


def load_cav(path):
    head, body = _paths(path)
    h = json.loads(head.read_text())
    w = T.read_tensor(body)
    return Cav(
        weights=w,
        bias=h["bias"],
        method=h["method"],
        pooled=h.get("pooled", "none"),
        concept_id=h.get("concept_id", ""),
        layer_id=h.get("layer_id", "conv3"),
        train_size=h.get("train_size", 0),
        seed=h.get("seed", 0),
        norm_before_normalize=h.get("norm_before_normalize", 1.0),
    )
