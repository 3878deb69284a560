"""A small three-stage CNN with hand-written backward passes.

Architecture (input 3x64x64, zero padding 1 on every conv)::

    conv1 3->8 -> ReLU -> maxpool2 -> conv2 8->16 -> ReLU -> maxpool2
    -> conv3 16->32 -> ReLU  => probe layer z (32x16x16)
    -> global mean pool -> linear 32->K -> softmax

Weights are stored as float32; all arithmetic is carried out in float64.
"""

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import SchemaError, ShapeMismatch, TrainingDiverged
from .seeding import make_rng
from .tensor import decode_tensor, encode_tensor

INPUT_SHAPE = (3, 64, 64)
PROBE_SHAPE = (32, 16, 16)
LAYERS = ("conv3", "conv2")
MODEL_MAGIC = b"CAVM"
MODEL_VERSION = 1
# fixed preprocessing: pixels in [0, 1] are mapped to [-2, 2]
INPUT_GAIN = 4.0
_PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "head_w", "head_b")


@dataclass(frozen=True)
class PretrainTask:
    num_classes: int = 8
    epochs: int = 10
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 4:
            raise ValueError("num_classes must be >= 4")


@dataclass(frozen=True, eq=False)
class MicroCnn:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    seed: int = 0
    _f64: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in _PARAM_ORDER:
            arr = np.array(getattr(self, name), dtype=np.float32)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_f64", {n: getattr(self, n).astype(np.float64) for n in _PARAM_ORDER})

    @property
    def num_classes(self):
        return self.head_w.shape[0]

    def params(self):
        return {n: getattr(self, n) for n in _PARAM_ORDER}

    def p64(self, name):
        return self._f64[name]

    def with_params(self, **kw):
        return replace(self, _f64=None, **kw)

    def equals(self, other):
        return self.seed == other.seed and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in _PARAM_ORDER
        )

    # thin method aliases so a model can be passed wherever a featurizer is expected
    def features(self, x, layer="conv3"):
        return forward_features(self, x, layer)


def init_model(seed, num_classes=8):
    """He-scaled uniform initialization from a seeded generator; biases start at zero."""
    rng = make_rng(seed, "microcnn-init")

    def he(shape, fan_in):
        lim = np.sqrt(6.0 / fan_in)
        return rng.uniform(-lim, lim, size=shape)

    return MicroCnn(
        conv1_w=he((8, 3, 3, 3), 27),
        conv1_b=np.zeros(8),
        conv2_w=he((16, 8, 3, 3), 72),
        conv2_b=np.zeros(16),
        conv3_w=he((32, 16, 3, 3), 144),
        conv3_b=np.zeros(32),
        head_w=he((num_classes, 32), 32),
        head_b=np.zeros(num_classes),
        seed=int(seed),
    )


# --- layer primitives (internal layout is NHWC) -----------------------------------

_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _wmat(w):
    # (Cout, Cin, 3, 3) -> (9*Cin, Cout), row index = offset*Cin + cin
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def conv_forward(x, w, b):
    """3x3 convolution, zero padding 1, on an (N, H, W, C) batch; returns (out, cols)."""
    n, h, wd, c = x.shape
    xp = np.zeros((n, h + 2, wd + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((n, h, wd, 9, c), dtype=x.dtype)
    for k, (dy, dx) in enumerate(_OFFSETS):
        cols[:, :, :, k, :] = xp[:, dy : dy + h, dx : dx + wd, :]
    out = cols.reshape(-1, 9 * c) @ _wmat(w) + b
    return out.reshape(n, h, wd, -1), cols


def conv_backward(dout, cols, w, need_params=True, need_input=True):
    n, h, wd, cout = dout.shape
    c = w.shape[1]
    d2 = dout.reshape(-1, cout)
    if not need_input:
        dw = (cols.reshape(-1, 9 * c).T @ d2).reshape(3, 3, c, cout).transpose(3, 2, 0, 1)
        return None, dw, d2.sum(axis=0)
    dcols = (d2 @ _wmat(w).T).reshape(n, h, wd, 9, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for k, (dy, dx) in enumerate(_OFFSETS):
        dxp[:, dy : dy + h, dx : dx + wd, :] += dcols[:, :, :, k, :]
    dx = dxp[:, 1:-1, 1:-1]
    if not need_params:
        return dx, None, None
    dw = (cols.reshape(-1, 9 * c).T @ d2).reshape(3, 3, c, cout).transpose(3, 2, 0, 1)
    return dx, dw, d2.sum(axis=0)


def maxpool_forward(x):
    """2x2 max pool; ties go to the first element in row-major window order."""
    views = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    best = views[0].copy()
    idx = np.zeros(best.shape, dtype=np.int8)
    for k in (1, 2, 3):
        take = views[k] > best
        best[take] = views[k][take]
        idx[take] = k
    return best, idx


def maxpool_backward(dout, idx, shape):
    dx = np.zeros(shape, dtype=dout.dtype)
    for k, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, a::2, b::2] = np.where(idx == k, dout, 0.0)
    return dx


def softmax(logits):
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


# --- forward / backward --------------------------------------------------------


def _as_batch(x, shape, what, dtype=np.float64):
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == len(shape)
    if single:
        x = x[None]
    if x.shape[1:] != tuple(shape):
        raise ShapeMismatch(f"{what}: expected trailing shape {shape}, got {x.shape}")
    return x, single


def _trunk(model, x):
    """Forward pass on an NCHW batch; the cache holds NHWC intermediates."""
    p = model.p64
    a0 = (x.transpose(0, 2, 3, 1) - 0.5) * INPUT_GAIN
    h1, c1 = conv_forward(a0, p("conv1_w"), p("conv1_b"))
    a1 = np.maximum(h1, 0.0)
    q1, i1 = maxpool_forward(a1)
    h2, c2 = conv_forward(q1, p("conv2_w"), p("conv2_b"))
    a2 = np.maximum(h2, 0.0)
    q2, i2 = maxpool_forward(a2)
    h3, c3 = conv_forward(q2, p("conv3_w"), p("conv3_b"))
    a3 = np.maximum(h3, 0.0)
    return dict(c1=c1, h1=h1, i1=i1, c2=c2, h2=h2, a2=a2, i2=i2, c3=c3, h3=h3, a3=a3)


def _trunk_backward(model, cache, da3, need_params):
    """Backward from d(loss)/d(a3) given NHWC; returns NCHW input gradient."""
    p = model.p64
    grads = {}
    dh3 = da3 * (cache["h3"] > 0)
    dq2, grads["conv3_w"], grads["conv3_b"] = conv_backward(dh3, cache["c3"], p("conv3_w"), need_params)
    da2 = maxpool_backward(dq2, cache["i2"], cache["h2"].shape)
    dh2 = da2 * (cache["h2"] > 0)
    dq1, grads["conv2_w"], grads["conv2_b"] = conv_backward(dh2, cache["c2"], p("conv2_w"), need_params)
    da1 = maxpool_backward(dq1, cache["i1"], cache["h1"].shape)
    dh1 = da1 * (cache["h1"] > 0)
    dx, grads["conv1_w"], grads["conv1_b"] = conv_backward(
        dh1, cache["c1"], p("conv1_w"), need_params, need_input=not need_params
    )
    return (None if dx is None else dx.transpose(0, 3, 1, 2)), grads


def forward_features(model, x, layer="conv3", batch_size=128):
    """Post-ReLU activations at the probe layer for one image or a batch."""
    if layer not in LAYERS:
        raise ValueError(f"unknown layer {layer!r}; choose from {LAYERS}")
    x, single = _as_batch(x, INPUT_SHAPE, "forward_features")
    key = "a3" if layer == "conv3" else "a2"
    outs = [
        _trunk(model, x[i : i + batch_size])[key].transpose(0, 3, 1, 2)
        for i in range(0, len(x), batch_size)
    ]
    z = np.ascontiguousarray(np.concatenate(outs)) if outs else np.zeros((0,) + PROBE_SHAPE)
    return z[0] if single else z


def head_logits(model, z):
    z, single = _as_batch(z, PROBE_SHAPE, "forward_head")
    feat = z.mean(axis=(2, 3))
    logits = feat @ model.p64("head_w").T + model.p64("head_b")
    return logits[0] if single else logits


def forward_head(model, z):
    """Class probabilities from probe-layer activations."""
    return softmax(head_logits(model, z))


def grad_head_all(model, z):
    """d p_k / d z for every class k; returns (N, K, C, H, W) or (K, C, H, W)."""
    z, single = _as_batch(z, PROBE_SHAPE, "grad_head_wrt_z")
    p = forward_head(model, z)  # N, K
    w = model.p64("head_w")  # K, C
    wbar = p @ w  # N, C
    dfeat = p[:, :, None] * (w[None] - wbar[:, None, :])  # N, K, C
    hw = z.shape[2] * z.shape[3]
    g = np.broadcast_to((dfeat / hw)[..., None, None], dfeat.shape + z.shape[2:]).copy()
    return g[0] if single else g


def grad_head_wrt_z(model, z, k):
    """Gradient of the class-k probability with respect to the probe activations."""
    if not 0 <= int(k) < model.num_classes:
        raise IndexError(f"class index {k} out of range [0, {model.num_classes})")
    g = grad_head_all(model, z)
    return g[..., int(k), :, :, :]


def grad_features_wrt_input(model, x, upstream):
    """Vector-Jacobian product of the probe-layer activations with ``upstream``."""
    x, single = _as_batch(x, INPUT_SHAPE, "grad_features_wrt_input")
    up, _ = _as_batch(upstream, PROBE_SHAPE, "grad_features_wrt_input upstream")
    if len(up) != len(x):
        raise ShapeMismatch("upstream batch does not match input batch")
    cache = _trunk(model, x)
    da0, _ = _trunk_backward(model, cache, up.transpose(0, 2, 3, 1), need_params=False)
    dx = da0 * INPUT_GAIN  # chain rule through the input affine map
    return dx[0] if single else dx


# --- pretraining ----------------------------------------------------------------


def _loss_and_grads(model, x, y):
    cache = _trunk(model, x)
    a3 = cache["a3"]
    feat = a3.mean(axis=(1, 2))
    p = softmax(feat @ model.p64("head_w").T + model.p64("head_b"))
    n = len(y)
    loss = -np.log(p[np.arange(n), y] + 1e-300).mean()
    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = {"head_w": dlogits.T @ feat, "head_b": dlogits.sum(axis=0)}
    dfeat = dlogits @ model.p64("head_w")
    hw = a3.shape[1] * a3.shape[2]
    da3 = np.broadcast_to((dfeat / hw)[:, None, None, :], a3.shape)
    _, tg = _trunk_backward(model, cache, da3, need_params=True)
    grads.update(tg)
    correct = int((p.argmax(axis=1) == y).sum())
    return loss, grads, correct


def predict(model, x, batch_size=256):
    x, _ = _as_batch(x, INPUT_SHAPE, "predict")
    return np.concatenate(
        [forward_head(model, forward_features(model, x[i : i + batch_size])).argmax(axis=1)
         for i in range(0, len(x), batch_size)]
    )


def pretrain(task, corpus, log=None):
    """Plain minibatch SGD on the shape-classification task of ``corpus``.

    Training arithmetic runs in float32 for speed; the update order is fixed
    by the task seed so the result is bit-reproducible.
    """
    images = np.asarray(corpus.images)
    labels = np.asarray(corpus.class_labels)
    keep = labels >= 0
    images, labels = images[keep], labels[keep].astype(np.int64)
    if len(labels) == 0:
        raise ValueError("corpus has no class-labelled images")
    if labels.max() >= task.num_classes:
        raise ValueError("class label exceeds num_classes")
    model = init_model(task.seed, task.num_classes)
    params = {n: getattr(model, n).copy() for n in _PARAM_ORDER}
    lr = np.float32(task.learning_rate)
    rng = make_rng(task.seed, "pretrain-order")
    n = len(labels)
    for epoch in range(task.epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, task.batch_size):
            idx = order[start : start + task.batch_size]
            current = _Params(params)
            # overflow in a diverging run is caught by the finiteness check below
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                loss, grads, c = _loss_and_grads(current, images[idx].astype(np.float32), labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            for name in _PARAM_ORDER:
                params[name] = params[name] - lr * grads[name].astype(np.float32)
            total += loss * len(idx)
            correct += c
        if log is not None:
            log(dict(event="pretrain_epoch", epoch=epoch, loss=float(total / n), train_acc=correct / n))
    trained = MicroCnn(**{k: v.astype(np.float32) for k, v in params.items()}, seed=int(task.seed))
    if task.learning_rate == 0:
        # a no-op run is a valid request; there is nothing to have diverged
        return trained
    acc = float((predict(trained, images) == labels).mean())
    if acc < 0.6:
        raise TrainingDiverged(f"train accuracy {acc:.3f} below 0.6 after {task.epochs} epochs")
    return trained


class _Params:
    """Bare parameter dict exposed through the ``p64`` accessor the layers expect."""

    def __init__(self, params):
        self._p = params

    def p64(self, name):
        return self._p[name]


# --- persistence ----------------------------------------------------------------


def encode_model(model) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<BQ", MODEL_VERSION, int(model.seed) & 0xFFFFFFFFFFFFFFFF)]
    out.extend(encode_tensor(getattr(model, n)) for n in _PARAM_ORDER)
    return b"".join(out)


def save_model(model, path):
    Path(path).write_bytes(encode_model(model))


def load_model(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise SchemaError("missing CAVM magic bytes", path)
    version, seed = struct.unpack("<BQ", raw[4:13])
    if version != MODEL_VERSION:
        raise SchemaError(f"unsupported model version {version}", path)
    off = 13
    params = {}
    for name in _PARAM_ORDER:
        t, used = decode_tensor(raw[off:], path)
        params[name] = t
        off += used
    if off != len(raw):
        raise SchemaError("trailing bytes in model file", path)
    return MicroCnn(**params, seed=int(seed))
