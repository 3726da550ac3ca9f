"""Dense float64 kernels used by every other module.

Vectors are 1-D arrays. Most kernels also accept a 2-D array whose rows are
independent samples, which is how the training loop batches work.
"""

import numpy as np

from zoomrnn.errors import InputError

PROB_FLOOR = 1e-12


def as_vec(x, name="x"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[-1] == 0:
        raise InputError(f"{name}: expected a non-empty vector or batch, got shape {arr.shape}")
    return arr


def as_mat(w, name="W"):
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 2 or 0 in arr.shape:
        raise InputError(f"{name}: expected a non-empty matrix, got shape {arr.shape}")
    return arr


def affine(W, x, b):
    """Return ``W @ x + b``; with a batch ``x`` of shape (B, cols) each row is mapped."""
    W = as_mat(W)
    x = as_vec(x)
    b = np.asarray(b, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise InputError(f"affine: W has {W.shape[1]} cols but x has length {x.shape[-1]}")
    if b.shape != (W.shape[0],):
        raise InputError(f"affine: bias shape {b.shape} does not match W rows {W.shape[0]}")
    return x @ W.T + b


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(z):
    z = as_vec(z, "z")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_one_hot(y):
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=-1) == 1.0)):
        raise InputError("cross_entropy: target is not one-hot")


def cross_entropy(p, y):
    """Multi-class cross entropy with the 1/N_C normalisation.

    ``-(1/N_C) * sum_i y_i log p_i`` with p clamped below at 1e-12. For a batch
    the per-sample losses are averaged.
    """
    p = as_vec(p, "p")
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise InputError(f"cross_entropy: p shape {p.shape} != y shape {y.shape}")
    _check_one_hot(y)
    n_classes = p.shape[-1]
    per_sample = -(y * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=-1) / n_classes
    return float(np.mean(per_sample))


def softmax_cross_entropy_grad(p, y):
    """Gradient of ``cross_entropy(softmax(z), y)`` w.r.t. the logits z, per sample."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (p - y) / p.shape[-1]


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def elementwise_avg(a, b):
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    if a.shape != b.shape:
        raise InputError(f"elementwise_avg: shape mismatch {a.shape} vs {b.shape}")
    return (a + b) / 2.0


def elementwise_max(vs):
    vs = [as_vec(v, "v") for v in vs]
    if not vs:
        raise InputError("elementwise_max: need at least one vector")
    if any(v.shape != vs[0].shape for v in vs):
        raise InputError("elementwise_max: length mismatch")
    return np.maximum.reduce(vs)
