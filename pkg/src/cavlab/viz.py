"""Concept localization maps, prototypes, activation maximization and TCAV curves."""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import affine_transform, gaussian_filter, zoom

from . import microcnn as mc
from . import tensor as T
from .errors import NonFiniteObjective, NumericError
from .metrics import shifted_attribution
from .seeding import make_rng

CLM_SIGMA = 2.0
CLM_ALPHA = 0.6
# viridis anchors, low to high
_RAMP = np.array([
    [0.267, 0.005, 0.329],
    [0.231, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.360, 0.785, 0.388],
    [0.993, 0.906, 0.144],
])


def linear_logit(cav, z):
    """v . z + b with the expanded weights (the quantity phi* decomposes)."""
    return T.dot(cav.weights, z) + cav.bias


def check_completeness(cav, z, phi=None, rtol=1e-5):
    phi = shifted_attribution(cav, z) if phi is None else phi
    total = float(np.sum(phi, dtype=np.float64))
    logit = linear_logit(cav, z)
    if abs(total - logit) > rtol * (1.0 + abs(logit)):
        raise NumericError(f"attribution sums to {total}, logit is {logit}")
    return total, logit


def colormap(a):
    """Map values in [0, 1] onto a viridis-like ramp; returns (..., 3) floats."""
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0) * (len(_RAMP) - 1)
    lo = np.minimum(np.floor(a).astype(int), len(_RAMP) - 2)
    t = (a - lo)[..., None]
    return _RAMP[lo] * (1.0 - t) + _RAMP[lo + 1] * t


@dataclass
class Heatmap:
    base_image: np.ndarray
    attribution: np.ndarray
    overlay: np.ndarray
    phi: np.ndarray = field(default=None, repr=False)

    def save(self, path):
        Image.fromarray(self.overlay, mode="RGB").save(path, format="PNG")


def upscale_attribution(phi, size=64, sigma=CLM_SIGMA):
    """Bilinear upscale to image resolution, Gaussian smoothing, then ReLU."""
    up = zoom(np.asarray(phi, dtype=np.float64), size / phi.shape[0], order=1, mode="nearest")
    return np.maximum(gaussian_filter(up, sigma, mode="nearest"), 0.0)


def overlay(image, attribution, alpha=CLM_ALPHA):
    img = np.transpose(np.asarray(image, dtype=np.float64), (1, 2, 0))
    peak = attribution.max()
    a = attribution / peak if peak > 0 else np.zeros_like(attribution)
    w = alpha * a[..., None]
    out = (1.0 - w) * img + w * colormap(a)
    return np.round(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_clm(cav, image, model, z=None, sigma=CLM_SIGMA, alpha=CLM_ALPHA):
    """Concept localization map for one image."""
    image = np.asarray(image, dtype=np.float32)
    if z is None:
        z = mc.forward_features(model, image, cav.layer_id)
    phi = shifted_attribution(cav, z)
    check_completeness(cav, z, phi)
    attr = upscale_attribution(phi, image.shape[-1], sigma)
    return Heatmap(image, attr, overlay(image, attr, alpha), phi)


def block_attribution(attribution, block=16):
    h, w = attribution.shape
    return attribution.reshape(h // block, block, w // block, block).sum(axis=(1, 3))


def corner_concentration(attribution, block=16):
    """Top-left block's share relative to the mean block (1.0 means uniform)."""
    b = block_attribution(attribution, block)
    m = b.mean()
    return float(b[0, 0] / m) if m > 0 else 0.0


# --- prototypes --------------------------------------------------------------------


def prototypes(cav, images, model=None, k=None, Z=None):
    """Indices ranked by cosine(v, f(x)) descending, ties to the lower index."""
    if Z is None:
        Z = mc.forward_features(model, images, cav.layer_id)
    Z = np.asarray(Z, dtype=np.float64).reshape(len(Z), -1)
    k = len(Z) if k is None else int(k)
    if not 0 <= k <= len(Z):
        raise ValueError(f"k={k} exceeds the {len(Z)} available images")
    w = cav.weights.reshape(-1).astype(np.float64)
    norms = np.linalg.norm(Z, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(norms > 0, (Z @ w) / (norms * np.linalg.norm(w)), -np.inf)
    order = np.lexsort((np.arange(len(Z)), -cos))
    return order[:k], cos[order[:k]]


# --- activation maximization -----------------------------------------------------


def am_objective(cav, model, x):
    z = mc.forward_features(model, x, cav.layer_id)
    n = T.norm(z)
    return T.dot(z, cav.weights) / n if n > 0 else 0.0


def am_gradient(cav, model, x):
    """Objective and its input gradient; d/dz (z.v/|z|) = v/|z| - (z.v) z/|z|^3."""
    x = np.asarray(x, dtype=np.float64)
    z = mc.forward_features(model, x, cav.layer_id)
    v = cav.weights.astype(np.float64)
    n = T.norm(z)
    if n == 0:
        return 0.0, np.zeros_like(x)
    zv = T.dot(z, v)
    dz = v / n - zv * z / n**3
    return zv / n, mc.grad_features_wrt_input(model, x, dz)


def random_transform(x, rng, shift=2.0, scale=(0.95, 1.05), degrees=5.0):
    """Jitter, scale and rotate about the image centre; edges are reflected."""
    t = rng.uniform(-shift, shift, 2)
    s = rng.uniform(*scale)
    a = np.deg2rad(rng.uniform(-degrees, degrees))
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]) / s
    h, w = x.shape[1:]
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = c - rot @ (c + t)
    return np.stack([affine_transform(ch, rot, offset, order=1, mode="reflect") for ch in x]).astype(x.dtype)


def activation_maximization(cav, model, steps=128, step_size=0.05, seed=0, init=None, return_trace=False):
    """Gradient ascent on z.v/|z| with a random affine jitter between steps.

    Steps are normalized by the gradient's RMS so ``step_size`` is in
    pixel units.  Pixels are clipped to [0, 1] after every update.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    rng = make_rng(seed, "actmax")
    x = rng.uniform(0.4, 0.6, size=mc.INPUT_SHAPE) if init is None else np.array(init, dtype=np.float64)
    trace = []
    for t in range(steps):
        if t > 0:
            x = random_transform(x, rng)
        j, g = am_gradient(cav, model, x)
        if not np.isfinite(j) or not np.all(np.isfinite(g)):
            raise NonFiniteObjective(t)
        trace.append(j)
        rms = np.sqrt(np.mean(g * g))
        if step_size and rms > 0:
            x = np.clip(x + step_size * g / rms, 0.0, 1.0)
    final = am_objective(cav, model, x)
    if not np.isfinite(final):
        raise NonFiniteObjective(steps)
    trace.append(final)
    x = x.astype(np.float32)
    return (x, trace) if return_trace else x


def save_image(x, path):
    arr = np.round(np.clip(np.transpose(x, (1, 2, 0)), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# --- TCAV --------------------------------------------------------------------------


@dataclass
class TcavCurve:
    scores: np.ndarray
    concept_id: str = ""
    layer_id: str = "conv3"
    window: int = 1
    class_names: list = field(default_factory=list)

    def smoothed(self):
        w = max(1, int(self.window))
        pad = np.pad(self.scores, (w // 2, w - 1 - w // 2), mode="edge")
        return np.convolve(pad, np.ones(w) / w, mode="valid")

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            out = csv.writer(f, lineterminator="\n")
            out.writerow(["class_index", "class_name", "score"])
            for k, s in enumerate(self.scores):
                name = self.class_names[k] if k < len(self.class_names) else str(k)
                out.writerow([k, name, repr(float(s))])


def directional_derivatives(cav, Z, model, pooled_path=None):
    """grad p_k(z) . v for every sample and class, shape (N, K).

    Pooled CAVs are evaluated as alpha . (spatially summed gradient); pass
    ``pooled_path=False`` to force the expanded inner product instead.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 3:
        Z = Z[None]
    G = mc.grad_head_all(model, Z)  # N, K, C, H, W
    if pooled_path is None:
        pooled_path = cav.pooled != "none"
    if pooled_path:
        return T.pool(G.reshape((-1,) + G.shape[2:]), "sum").reshape(G.shape[:3]) @ cav.channel_weights
    return G.reshape(G.shape[0], G.shape[1], -1) @ cav.weights.reshape(-1).astype(np.float64)


def tcav_scores(cav, concept_positives, model, window=1, class_names=None, pooled_path=None):
    """Fraction of concept examples whose class-k probability rises along v, per class."""
    X = np.asarray(concept_positives)
    if len(X) == 0:
        raise ValueError("no concept examples")
    Z = X if X.shape[1:] == cav.weights.shape else mc.forward_features(model, X, cav.layer_id)
    S = directional_derivatives(cav, Z, model, pooled_path)
    scores = (S > 0.0).mean(axis=0)
    if class_names is None:
        class_names = [str(k) for k in range(model.num_classes)]
    return TcavCurve(scores, cav.concept_id, cav.layer_id, window, list(class_names))


def write_png_grid(images, path, cols=8):
    images = np.asarray(images)
    n = len(images)
    rows = -(-n // cols)
    c, h, w = images.shape[1:]
    grid = np.ones((c, rows * h, cols * w), dtype=np.float32)
    for i, x in enumerate(images):
        r, k = divmod(i, cols)
        grid[:, r * h:(r + 1) * h, k * w:(k + 1) * w] = x
    save_image(grid, Path(path))
