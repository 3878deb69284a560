"""Synthetic concept corpora with exact segmentation masks and a spurious-cue dial.

Every image holds at most one foreground shape painted on a procedural
background.  The concept of a corpus is one shape kind; negatives show a
different shape or nothing.  A spurious cue (background texture, corner
marker or global tint) co-occurs with the concept with probability ``rho``.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, SchemaError
from .seeding import make_rng
from .tensor import read_tensor, write_tensor

SIZE = 64
SHAPE_KINDS = ("circle", "square", "triangle", "cross", "ring", "bar", "star", "diamond")
BACKGROUNDS = ("flat", "gradient", "stripes", "checker", "value_noise", "speckle")
CUE_KINDS = ("background_texture", "corner_marker", "global_tint")
SPLITS = ("train", "test", "buffer")
FILL_STYLES = ("solid", "striped", "random")
AUGMENTATIONS = ("hflip", "grayscale", "gaussian_noise", "background_replace")

CUE_TEXTURE = "stripes"
MARKER_SIZE = 6
# shapes never intrude on this top-left square, so the marker never occludes a mask
MARKER_GUARD = 8
TINT = np.array([1.0, 0.8, 0.55])
R_RANGE = (7.0, 14.0)
# canonical fill hue per shape kind; the "solid" fill style jitters around it
HUES = {
    "circle": (1.0, 0.1, 0.1),
    "square": (0.1, 0.9, 0.1),
    "triangle": (0.15, 0.3, 1.0),
    "cross": (1.0, 0.95, 0.1),
    "ring": (1.0, 0.1, 1.0),
    "bar": (0.1, 1.0, 1.0),
    "star": (1.0, 0.55, 0.0),
    "diamond": (0.55, 0.1, 1.0),
}


@dataclass(frozen=True)
class ConceptSpec:
    concept_id: str
    shape_kind: str = None
    fill_style: str = "solid"
    min_area_fraction: float = 0.01

    def __post_init__(self):
        if self.shape_kind is None:
            object.__setattr__(self, "shape_kind", self.concept_id)
        if self.shape_kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.shape_kind!r}")
        if self.fill_style not in FILL_STYLES:
            raise ValueError(f"unknown fill style {self.fill_style!r}")
        if not 0.0 < self.min_area_fraction <= 0.5:
            raise ValueError("min_area_fraction must lie in (0, 0.5]")


@dataclass(frozen=True)
class SpuriousSpec:
    cue_kind: str = "corner_marker"
    rho: float = 0.5

    def __post_init__(self):
        if self.cue_kind not in CUE_KINDS:
            raise ValueError(f"unknown cue kind {self.cue_kind!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")


@dataclass(frozen=True)
class Counts:
    n_train_pos: int = 50
    n_train_neg: int = 50
    n_test_pos: int = 100
    n_test_neg: int = 100
    n_buffer: int = 500


@dataclass
class ConceptCorpus:
    """Stacked arrays, one row per image, plus a JSON-serializable manifest.

    ``images`` is (N, 3, 64, 64) float32 in [0, 1] or None for an
    activations-only corpus; ``masks`` is (N, H, W) uint8.
    """

    images: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    class_labels: np.ndarray
    cues: np.ndarray
    splits: np.ndarray
    manifest: dict
    activations: np.ndarray = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.labels)

    @property
    def concept_id(self):
        return self.manifest.get("concept", {}).get("concept_id")

    def indices(self, split, present=None):
        sel = self.splits == split
        if present is not None:
            sel &= self.labels == bool(present)
        return np.flatnonzero(sel)

    def features(self, model=None, layer="conv3"):
        """Probe-layer activations for every image, computed once per model."""
        if self.activations is not None:
            return self.activations
        if model is None:
            raise DataError("corpus carries no activations and no model was given")
        key = (id(model), layer)
        if key not in self._cache:
            from .microcnn import forward_features

            self._cache[key] = forward_features(model, self.images, layer)
        return self._cache[key]

    def release_features(self):
        """Drop cached activations (a 5000-image buffer holds about 350 MB of them)."""
        self._cache.clear()


# --- rasterization -------------------------------------------------------------

_YY, _XX = np.mgrid[0:SIZE, 0:SIZE] + 0.5


def shape_mask(kind, cx, cy, r, theta):
    """Boolean raster of one shape, evaluated at pixel centres."""
    c, s = np.cos(theta), np.sin(theta)
    dx, dy = _XX - cx, _YY - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    d = np.hypot(u, v)
    if kind == "circle":
        return d <= r
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8 * r
    if kind == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = np.pi / 2 + 2 * np.pi * k / 3
            inside &= np.cos(a) * u + np.sin(a) * v <= 0.5 * r
        return inside
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if kind == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.3 * r)
    if kind == "star":
        phi = np.arctan2(v, u)
        return d <= r * (0.62 + 0.38 * np.cos(5 * phi))
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    raise ValueError(f"unknown shape kind {kind!r}")


def _muted(rng):
    return rng.uniform(0.2, 0.7, size=3)


def _vivid(rng):
    while True:
        bits = rng.integers(0, 2, size=3)
        if 0 < bits.sum() < 3:
            break
    return np.where(bits == 1, rng.uniform(0.85, 1.0, 3), rng.uniform(0.0, 0.15, 3))


def background(kind, rng):
    """A (3, 64, 64) procedural background in [0, 1]."""
    a, b = _muted(rng), _muted(rng)
    if kind == "flat":
        w = np.zeros((SIZE, SIZE))
    elif kind == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        t = np.cos(ang) * _XX + np.sin(ang) * _YY
        w = (t - t.min()) / (t.max() - t.min())
    elif kind == "stripes":
        period = rng.uniform(6.0, 10.0)
        ang = rng.uniform(0, np.pi)
        t = np.cos(ang) * _XX + np.sin(ang) * _YY
        w = (np.sin(2 * np.pi * t / period) > 0).astype(float)
    elif kind == "checker":
        cell = int(rng.integers(5, 11))
        w = (((_XX // cell) + (_YY // cell)) % 2).astype(float)
    elif kind == "value_noise":
        grid = rng.uniform(0, 1, size=(5, 5))
        from scipy.ndimage import zoom

        w = np.clip(zoom(grid, SIZE / 5, order=3, mode="nearest", grid_mode=True), 0, 1)
    elif kind == "speckle":
        w = (rng.uniform(0, 1, size=(SIZE, SIZE)) < 0.25).astype(float)
    else:
        raise ValueError(f"unknown background {kind!r}")
    return a[:, None, None] * (1 - w) + b[:, None, None] * w


def _place_shape(kind, rng, min_area, tries=200):
    for _ in range(tries):
        r = rng.uniform(*R_RANGE)
        cx = rng.uniform(r, SIZE - r)
        cy = rng.uniform(r, SIZE - r)
        theta = rng.uniform(0, 2 * np.pi)
        m = shape_mask(kind, cx, cy, r, theta)
        if m[:MARKER_GUARD, :MARKER_GUARD].any():
            continue
        if m.sum() >= min_area:
            return m
    raise DataError(f"cannot place a {kind} covering {min_area:.0f} pixels")


def _fill_color(kind, rng, fill_style):
    if fill_style == "random":
        return _vivid(rng)
    return np.clip(np.array(HUES[kind]) + rng.uniform(-0.1, 0.1, 3), 0.0, 1.0)


def _paint(img, mask, rng, fill_style, kind):
    color = _fill_color(kind, rng, fill_style)
    if fill_style == "striped":
        alt = 0.5 * color
        w = ((_XX + _YY) // 3 % 2).astype(bool)
        layer = np.where(w[None], color[:, None, None], alt[:, None, None])
    else:
        layer = np.broadcast_to(color[:, None, None], img.shape)
    return np.where(mask[None], layer, img)


def _quantize(img):
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def render(shape_kind, cue, cue_kind, rng, min_area_fraction=0.01, fill_style="solid", bg_kind=None):
    """One image plus the raster of its shape (empty when ``shape_kind`` is None)."""
    if bg_kind is None:
        if cue_kind == "background_texture":
            pool = [CUE_TEXTURE] if cue else [k for k in BACKGROUNDS if k != CUE_TEXTURE]
        else:
            pool = list(BACKGROUNDS)
        bg_kind = pool[int(rng.integers(len(pool)))]
    img = background(bg_kind, rng)
    m = np.zeros((SIZE, SIZE), dtype=bool)
    if shape_kind is not None:
        m = _place_shape(shape_kind, rng, min_area_fraction * SIZE * SIZE)
        img = _paint(img, m, rng, fill_style, shape_kind)
    if cue and cue_kind == "corner_marker":
        img = img.copy()
        img[:, :MARKER_SIZE, :MARKER_SIZE] = 1.0
    if cue and cue_kind == "global_tint":
        img = img * TINT[:, None, None]
    return _quantize(img), m, bg_kind


# --- corpus generation ---------------------------------------------------------


def _layout(counts):
    rows = []
    rows += [("train", True)] * counts.n_train_pos + [("train", False)] * counts.n_train_neg
    rows += [("test", True)] * counts.n_test_pos + [("test", False)] * counts.n_test_neg
    rows += [("buffer", False)] * counts.n_buffer
    return rows


def generate(spec, spurious, counts=Counts(), seed=0, negative_shape_prob=0.8):
    """Deterministic concept corpus; image ``i`` depends only on ``(seed, i)``."""
    if isinstance(counts, dict):
        counts = Counts(**counts)
    for k, v in asdict(counts).items():
        if v < 0 or (k != "n_buffer" and v == 0):
            raise ValueError(f"count {k} must be positive")
    if counts.n_train_pos != counts.n_train_neg or counts.n_test_pos != counts.n_test_neg:
        raise ValueError("train and test splits must be balanced")
    min_area = spec.min_area_fraction * SIZE * SIZE
    if min_area > np.pi * R_RANGE[1] ** 2 * 0.6:
        raise DataError(f"min_area_fraction {spec.min_area_fraction} is infeasible for 64x64 shapes")
    others = [k for k in SHAPE_KINDS if k != spec.shape_kind]
    rows = _layout(counts)
    n = len(rows)
    images = np.zeros((n, 3, SIZE, SIZE), dtype=np.float32)
    masks = np.zeros((n, SIZE, SIZE), dtype=np.uint8)
    labels = np.zeros(n, dtype=bool)
    class_labels = np.full(n, -1, dtype=np.int64)
    cues = np.zeros(n, dtype=bool)
    records = []
    for i, (split, present) in enumerate(rows):
        rng = make_rng(seed, "image", i)
        u = rng.uniform()
        cue = bool(u < spurious.rho) if present else bool(u >= spurious.rho)
        if present:
            kind = spec.shape_kind
        elif rng.uniform() < negative_shape_prob:
            kind = others[int(rng.integers(len(others)))]
        else:
            kind = None
        img, m, bg = render(kind, cue, spurious.cue_kind, rng, spec.min_area_fraction, spec.fill_style)
        images[i] = img
        if present:
            masks[i] = m
        labels[i] = present
        cues[i] = cue
        class_labels[i] = -1 if kind is None else SHAPE_KINDS.index(kind)
        records.append(dict(index=i, split=split, present=present, shape=kind, cue=cue, background=bg))
    manifest = dict(
        format="cavlab-corpus/1",
        kind="concept",
        concept=asdict(spec),
        spurious=asdict(spurious),
        counts=asdict(counts),
        seed=int(seed),
        class_names=list(SHAPE_KINDS),
        items=records,
    )
    return ConceptCorpus(images, masks, labels, class_labels, cues, np.array([r[0] for r in rows]), manifest)


def generate_classification(n=2000, seed=0, num_classes=8):
    """Shape-classification corpus for pretraining: one shape per image, uniform classes."""
    kinds = SHAPE_KINDS[:num_classes]
    images = np.zeros((n, 3, SIZE, SIZE), dtype=np.float32)
    masks = np.zeros((n, SIZE, SIZE), dtype=np.uint8)
    class_labels = np.zeros(n, dtype=np.int64)
    records = []
    for i in range(n):
        rng = make_rng(seed, "classification", i)
        k = int(i % num_classes)
        img, m, bg = render(kinds[k], False, "corner_marker", rng)
        images[i], masks[i], class_labels[i] = img, m, k
        records.append(dict(index=i, split="train", present=False, shape=kinds[k], cue=False, background=bg))
    manifest = dict(
        format="cavlab-corpus/1",
        kind="classification",
        seed=int(seed),
        class_names=list(kinds),
        items=records,
    )
    return ConceptCorpus(
        images, masks, np.zeros(n, dtype=bool), class_labels, np.zeros(n, dtype=bool),
        np.array(["train"] * n), manifest,
    )


# --- image operations ----------------------------------------------------------


def downscale_mask(m, out_shape=(16, 16)):
    """Block-average a binary mask down to the feature-map grid, then threshold at 0.5."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    oh, ow = out_shape
    if h % oh or w % ow:
        raise ValueError(f"mask {m.shape} is not an integer multiple of {out_shape}")
    blocks = m.reshape(oh, h // oh, ow, w // ow).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.uint8)


def replace_background(x, m, donor, donor_present=False):
    """Keep ``x`` inside the mask and take ``donor`` pixels everywhere else."""
    if donor_present:
        raise DataError("background donor contains the concept")
    x = np.asarray(x)
    donor = np.asarray(donor)
    if x.shape != donor.shape or x.shape[-2:] != np.shape(m):
        raise ValueError("image, donor and mask shapes disagree")
    return np.where(np.asarray(m, dtype=bool)[None], x, donor).astype(x.dtype)


def grayscale(x):
    x = np.asarray(x)
    lum = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
    if np.array_equal(x[0], x[1]) and np.array_equal(x[1], x[2]):
        return x.copy()
    return np.broadcast_to(lum, x.shape).astype(x.dtype)


def augment(x, kind, seed=0, sigma=0.05, mask=None, donors=None):
    """Label-preserving transformation of one image.

    ``background_replace`` needs the concept ``mask`` and a stack of
    concept-free ``donors``; the donor is picked by ``seed``.
    """
    x = np.asarray(x)
    if kind == "hflip":
        return x[..., ::-1].copy()
    if kind == "grayscale":
        return grayscale(x)
    if kind == "gaussian_noise":
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        if sigma == 0:
            return x.copy()
        noise = make_rng(seed, "noise").normal(0.0, sigma, size=x.shape)
        return np.clip(x + noise, 0.0, 1.0).astype(x.dtype)
    if kind == "background_replace":
        if mask is None or donors is None or len(donors) == 0:
            raise ValueError("background_replace needs a mask and donor images")
        j = int(make_rng(seed, "donor").integers(len(donors)))
        return replace_background(x, mask, donors[j])
    raise ValueError(f"unknown augmentation {kind!r}")


# --- disk format -----------------------------------------------------------------


def _write_png(path, img):
    arr = np.round(np.transpose(img, (1, 2, 0)) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return (arr / np.float32(255.0)).transpose(2, 0, 1).astype(np.float32)


def _write_pgm(path, m):
    Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PPM")


def _read_pgm(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def export_corpus(corpus, out_dir, with_activations=False):
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if corpus.images is not None:
        (out / "images").mkdir(exist_ok=True)
    if with_activations or corpus.activations is not None:
        (out / "activations").mkdir(exist_ok=True)
    for i in range(len(corpus)):
        name = f"{i:05d}"
        if corpus.images is not None:
            _write_png(out / "images" / f"{name}.png", corpus.images[i])
        if corpus.labels[i]:
            _write_pgm(out / "masks" / f"{name}.pgm", corpus.masks[i])
        if corpus.activations is not None:
            write_tensor(out / "activations" / f"{name}.cavt", corpus.activations[i])
    (out / "manifest.json").write_text(json.dumps(corpus.manifest, indent=1, sort_keys=True))
    return out


def ingest_external(dir_path, layer_shape=(32, 16, 16)):
    """Load a corpus directory verbatim.

    Activations, when present, bypass the CNN.  Their shape must equal
    ``layer_shape`` (pass ``None`` to accept whatever the files hold, as long
    as they agree with each other).
    """
    root = Path(dir_path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise SchemaError("missing manifest.json", mpath)
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}", mpath) from None
    items = manifest.get("items")
    if not isinstance(items, list) or not items:
        raise SchemaError("manifest has no items list", mpath)
    n = len(items)
    has_images = (root / "images").is_dir()
    has_acts = (root / "activations").is_dir()
    if not has_images and not has_acts:
        raise SchemaError("corpus has neither images/ nor activations/", root)
    labels = np.zeros(n, dtype=bool)
    cues = np.zeros(n, dtype=bool)
    class_labels = np.full(n, -1, dtype=np.int64)
    splits = []
    names = manifest.get("class_names", list(SHAPE_KINDS))
    images = np.zeros((n, 3, SIZE, SIZE), dtype=np.float32) if has_images else None
    masks = None
    acts = None
    for i, rec in enumerate(items):
        if rec.get("index") != i:
            raise SchemaError(f"item {i} has index {rec.get('index')}", mpath)
        split = rec.get("split")
        if split not in SPLITS:
            raise SchemaError(f"item {i} has invalid split {split!r}", mpath)
        splits.append(split)
        labels[i] = bool(rec.get("present", False))
        cues[i] = bool(rec.get("cue", False))
        shape = rec.get("shape")
        class_labels[i] = names.index(shape) if shape in names else -1
        name = f"{i:05d}"
        if has_images:
            p = root / "images" / f"{name}.png"
            if not p.is_file():
                raise SchemaError("missing image", p)
            img = _read_png(p)
            if img.shape != (3, SIZE, SIZE):
                raise SchemaError(f"image has shape {img.shape}", p)
            images[i] = img
        mp = root / "masks" / f"{name}.pgm"
        if labels[i] and not mp.is_file():
            raise SchemaError("missing mask for a positive image", mp)
        if mp.is_file():
            m = _read_pgm(mp)
            if masks is None:
                masks = np.zeros((n,) + m.shape, dtype=np.uint8)
            if m.shape != masks.shape[1:]:
                raise SchemaError(f"mask has shape {m.shape}", mp)
            masks[i] = m
        if has_acts:
            ap = root / "activations" / f"{name}.cavt"
            if not ap.is_file():
                raise SchemaError("missing activations", ap)
            z = read_tensor(ap)
            want = tuple(layer_shape) if layer_shape is not None else (acts.shape[1:] if acts is not None else z.shape)
            if z.shape != want:
                raise SchemaError(f"activation shape {z.shape} does not match expected {want}", ap)
            if acts is None:
                acts = np.zeros((n,) + z.shape, dtype=np.float32)
            acts[i] = z
    if masks is None:
        masks = np.zeros((n, SIZE, SIZE), dtype=np.uint8)
    return ConceptCorpus(images, masks, labels, class_labels, cues, np.array(splits), manifest, activations=acts)


def cue_label_stats(corpus, split=None):
    """Pearson correlation and mutual information (nats) between cue and label."""
    sel = np.ones(len(corpus), dtype=bool) if split is None else corpus.splits == split
    a = corpus.cues[sel].astype(float)
    b = corpus.labels[sel].astype(float)
    corr = 0.0 if a.std() == 0 or b.std() == 0 else float(np.corrcoef(a, b)[0, 1])
    mi = 0.0
    for va in (0, 1):
        for vb in (0, 1):
            pj = np.mean((a == va) & (b == vb))
            if pj > 0:
                mi += pj * np.log(pj / (np.mean(a == va) * np.mean(b == vb)))
    return corr, float(mi)
