"""Small fully convolutional segmentor with hand-written backpropagation.

Architecture: 3x3 conv (1 -> F) -> ReLU -> 3x3 conv (F -> F) -> ReLU ->
1x1 head (F -> C) -> per-pixel softmax.  Both 3x3 convolutions use zero
"same" padding and cross-correlation semantics::

    out[o, i, j] = b[o] + sum_{c, dy, dx} w[o, c, dy, dx] * in[c, i + dy - 1, j + dx - 1]

Everything is computed batch-wise in a channel-first ``(channels, batch, H, W)``
layout so that im2col copies move contiguous image rows.  The compute dtype is
the dtype of the parameters: float64 for gradient checks, float32 for training.
"""

import struct
from dataclasses import dataclass, fields

import numpy as np

from .tensor import check_images, check_soft_label_map

__all__ = [
    "SegmentorParams",
    "GradientBundle",
    "init_params",
    "forward",
    "predict_proba_batch",
    "loss_and_grad",
    "batch_loss_and_grad",
    "sgd_step",
    "save_params",
    "load_params",
    "LOG_EPS",
]

LOG_EPS = 1e-12
MIN_SIZE = 5

_MAGIC = b"ACTP"
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class SegmentorParams:
    """Trainable weights of one segmentor.

    Shapes: ``conv1_w (F, 1, 3, 3)``, ``conv1_b (F,)``, ``conv2_w (F, F, 3, 3)``,
    ``conv2_b (F,)``, ``head_w (C, F)``, ``head_b (C,)``.
    """

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        F = self.conv1_w.shape[0]
        C = self.head_w.shape[0]
        expected = {
            "conv1_w": (F, 1, 3, 3),
            "conv1_b": (F,),
            "conv2_w": (F, F, 3, 3),
            "conv2_b": (F,),
            "head_w": (C, F),
            "head_b": (C,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")

    @property
    def n_features(self):
        return self.conv1_w.shape[0]

    @property
    def num_classes(self):
        return self.head_w.shape[0]

    @property
    def dtype(self):
        return self.conv1_w.dtype

    @property
    def count(self):
        return sum(a.size for a in self.arrays())

    def arrays(self):
        return tuple(getattr(self, f.name) for f in fields(self))

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, vec, n_features, num_classes):
        F, C = n_features, num_classes
        shapes = [(F, 1, 3, 3), (F,), (F, F, 3, 3), (F,), (C, F), (C,)]
        vec = np.asarray(vec)
        total = sum(int(np.prod(s)) for s in shapes)
        if vec.size != total:
            raise ValueError(f"expected {total} values for F={F}, C={C}, got {vec.size}")
        out, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(vec[pos:pos + n].reshape(s).copy())
            pos += n
        return cls(*out)

    def astype(self, dtype):
        return type(self)(*(a.astype(dtype) for a in self.arrays()))

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


# dL/dw has exactly the layout of w
GradientBundle = SegmentorParams


def init_params(seed, n_features=8, num_classes=4, dtype=np.float64):
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    if n_features < 1 or num_classes < 2:
        raise ValueError("need n_features >= 1 and num_classes >= 2")
    F, C = n_features, num_classes
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape).astype(dtype)

    return SegmentorParams(
        conv1_w=glorot((F, 1, 3, 3), 9, 9 * F),
        conv1_b=np.zeros(F, dtype),
        conv2_w=glorot((F, F, 3, 3), 9 * F, 9 * F),
        conv2_b=np.zeros(F, dtype),
        head_w=glorot((C, F), F, C),
        head_b=np.zeros(C, dtype),
    )


def _im2col(a):
    """(Ci, B, H, W) -> (9 * Ci, B * H * W), rows ordered tap-major."""
    ci, b, h, w = a.shape
    padded = np.zeros((ci, b, h + 2, w + 2), a.dtype)
    padded[:, :, 1:-1, 1:-1] = a
    cols = np.empty((9, ci, b, h, w), a.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[k] = padded[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(9 * ci, b * h * w)


def _col2im(cols, shape):
    ci, b, h, w = shape
    cols = cols.reshape(9, ci, b, h, w)
    padded = np.zeros((ci, b, h + 2, w + 2), cols.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        padded[:, :, dy:dy + h, dx:dx + w] += cols[k]
    return padded[:, :, 1:-1, 1:-1]


def _as_matrix(conv_w):
    # (Co, Ci, 3, 3) -> (Co, 9 * Ci) matching the tap-major im2col rows
    co, ci = conv_w.shape[:2]
    return conv_w.transpose(0, 2, 3, 1).reshape(co, 9 * ci)


def _from_matrix(mat, ci):
    co = mat.shape[0]
    return mat.reshape(co, 3, 3, ci).transpose(0, 3, 1, 2)


def _check_params(params):
    if not params.is_finite():
        raise ValueError("non-finite weights")


def _forward(params, x):
    """x: (B, H, W) in the parameter dtype.  Returns logits (C, BHW) and a cache."""
    b, h, w = x.shape
    F = params.n_features
    w1 = _as_matrix(params.conv1_w)
    w2 = _as_matrix(params.conv2_w)

    cols1 = _im2col(x[None])
    z1 = w1 @ cols1
    z1 += params.conv1_b[:, None]
    a1 = np.maximum(z1, 0)
    cols2 = _im2col(a1.reshape(F, b, h, w))
    z2 = w2 @ cols2
    z2 += params.conv2_b[:, None]
    a2 = np.maximum(z2, 0)
    logits = params.head_w @ a2
    logits += params.head_b[:, None]
    cache = (x.shape, cols1, z1, cols2, z2, a2, w2)
    return logits, cache


def _softmax0(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=0, keepdims=True)
    return z


def _backward(params, dlogits, cache):
    (b, h, w), cols1, z1, cols2, z2, a2, w2 = cache
    F = params.n_features
    g_head_w = dlogits @ a2.T
    g_head_b = dlogits.sum(axis=1)
    dz2 = params.head_w.T @ dlogits
    dz2 *= z2 > 0
    g_w2 = dz2 @ cols2.T
    g_b2 = dz2.sum(axis=1)
    da1 = _col2im(w2.T @ dz2, (F, b, h, w)).reshape(F, -1)
    da1 *= z1 > 0
    g_w1 = da1 @ cols1.T
    g_b1 = da1.sum(axis=1)
    return GradientBundle(
        conv1_w=_from_matrix(g_w1, 1),
        conv1_b=g_b1,
        conv2_w=_from_matrix(g_w2, F),
        conv2_b=g_b2,
        head_w=g_head_w,
        head_b=g_head_b,
    )


def predict_proba_batch(params, images):
    """Probability maps ``(B, H, W, C)`` for a stack of images."""
    _check_params(params)
    x = check_images(images, MIN_SIZE, dtype=params.dtype)
    b, h, w = x.shape
    logits, _ = _forward(params, x)
    p = _softmax0(logits)
    return p.reshape(-1, b, h, w).transpose(1, 2, 3, 0)


def forward(params, x):
    """Probability map ``(H, W, C)`` of one image."""
    return predict_proba_batch(params, [x])[0]


def batch_loss_and_grad(params, images, targets, weights):
    """Mean over samples of the per-sample weighted soft cross-entropy.

    Per sample the loss is ``sum_n w_n * CE_n / sum_n w_n`` with
    ``CE_n = -sum_c t_nc * log(p_nc + 1e-12)``.

    Parameters
    ----------
    images : array (B, H, W)
    targets : array (B, H, W, C)
    weights : array (B, H, W)

    Returns
    -------
    loss : float
        Mean of the per-sample losses.
    grad : GradientBundle
        Exact gradient of ``loss``.
    per_sample : ndarray (B,)
    """
    _check_params(params)
    dt = params.dtype
    x = check_images(images, MIN_SIZE, dtype=dt)
    b, h, w = x.shape
    C = params.num_classes
    targets = np.asarray(targets, dtype=dt)
    weights = np.asarray(weights, dtype=dt)
    if targets.shape != (b, h, w, C) or weights.shape != (b, h, w):
        raise ValueError(
            f"targets {targets.shape} / weights {weights.shape} do not match "
            f"images {x.shape} with {C} classes"
        )
    totals = weights.reshape(b, -1).sum(axis=1)
    if np.any(totals <= 0):
        raise ValueError("empty supervision")

    logits, cache = _forward(params, x)
    p = _softmax0(logits)
    t = targets.transpose(3, 0, 1, 2).reshape(C, -1)
    scale = (weights / (totals[:, None, None] * b)).reshape(-1)

    p_eps = p + dt.type(LOG_EPS)
    ce = -(t * np.log(p_eps)).sum(axis=0)
    per_sample = (ce * weights.reshape(-1)).reshape(b, -1).sum(axis=1) / totals
    loss = float(per_sample.astype(np.float64).mean())

    # d/dz_k [-sum_c t_c log(p_c + eps)] = p_k * sum_c r_c - r_k, r_c = t_c p_c / (p_c + eps)
    r = t * p / p_eps
    dlogits = p * r.sum(axis=0, keepdims=True) - r
    dlogits *= scale
    grad = _backward(params, dlogits, cache)
    return loss, grad, per_sample


def loss_and_grad(params, x, target):
    """Weighted soft cross-entropy of one image and its exact gradient."""
    target = check_soft_label_map(target, np.shape(x))
    if target.num_classes != params.num_classes:
        raise ValueError(
            f"target has {target.num_classes} classes, params have {params.num_classes}"
        )
    loss, grad, _ = batch_loss_and_grad(
        params, [x], target.targets[None], target.pixel_weights[None]
    )
    return loss, grad


def sgd_step(params, grads, eta):
    """Return ``params - eta * sum(grads)``; bundles are summed in list order."""
    if eta <= 0:
        raise ValueError(f"learning rate must be positive, got {eta}")
    grads = list(grads)
    if not grads:
        return params
    new = []
    for i, w in enumerate(params.arrays()):
        total = np.zeros_like(w)
        for g in grads:
            gi = g.arrays()[i]
            if gi.shape != w.shape:
                raise ValueError(f"gradient shape {gi.shape} does not match parameter {w.shape}")
            total += gi
        new.append(w - w.dtype.type(eta) * total)
    return SegmentorParams(*new)


def save_params(params, path):
    """Write a 16-byte header (magic, F, C, count) then little-endian float32 values."""
    values = params.flat().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, params.n_features, params.num_classes, values.size))
        fh.write(values.tobytes())


def load_params(path, dtype=np.float32):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: file too short for parameter header")
    magic, F, C, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {count} float32 values, found {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4").astype(dtype)
    return SegmentorParams.from_flat(values, F, C)
