"""Single-layer GRU without gate biases, unrolled over the three region steps.

    r_t = sigmoid(W_r x_t + U_r h_{t-1})
    z_t = sigmoid(W_z x_t + U_z h_{t-1})
    c_t = tanh(W x_t + U (r_t * h_{t-1}))
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t

The backward pass is written out by hand over a tape of per-step records.
Inputs may be single vectors or batches (rows are samples); gradients of a
batch are summed over its rows.
"""

from dataclasses import dataclass, fields

import numpy as np

from zoomrnn.errors import InputError
from zoomrnn.numkit import sigmoid

SEQ_LEN = 3
PARAM_NAMES = ("W_r", "U_r", "W_z", "U_z", "W", "U")


@dataclass
class GruParams:
    W_r: np.ndarray
    U_r: np.ndarray
    W_z: np.ndarray
    U_z: np.ndarray
    W: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        hidden, inp = self.W.shape
        for name in ("W_r", "W_z", "W"):
            if getattr(self, name).shape != (hidden, inp):
                raise InputError(f"GruParams: {name} must be {hidden}x{inp}")
        for name in ("U_r", "U_z", "U"):
            if getattr(self, name).shape != (hidden, hidden):
                raise InputError(f"GruParams: {name} must be {hidden}x{hidden}")

    @property
    def input_dim(self):
        return self.W.shape[1]

    @property
    def hidden_dim(self):
        return self.W.shape[0]

    def items(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    @classmethod
    def zeros(cls, input_dim, hidden_dim):
        wi = (hidden_dim, input_dim)
        wh = (hidden_dim, hidden_dim)
        return cls(np.zeros(wi), np.zeros(wh), np.zeros(wi), np.zeros(wh), np.zeros(wi), np.zeros(wh))

    @classmethod
    def init(cls, input_dim, hidden_dim, rng):
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] from ``rng``."""
        def draw(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        wi = (hidden_dim, input_dim)
        wh = (hidden_dim, hidden_dim)
        return cls(
            W_r=draw(input_dim, wi), U_r=draw(hidden_dim, wh),
            W_z=draw(input_dim, wi), U_z=draw(hidden_dim, wh),
            W=draw(input_dim, wi), U=draw(hidden_dim, wh),
        )


@dataclass
class TapeEntry:
    x: np.ndarray
    h_prev: np.ndarray
    r: np.ndarray
    z: np.ndarray
    h_cand: np.ndarray


@dataclass
class GruTape:
    entries: list
    input_dim: int
    hidden_dim: int
    batched: bool


def _as_rows(x, width, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != width:
        raise InputError(f"{what}: expected length {width}, got shape {x.shape}")
    return np.atleast_2d(x)


def _cell(x, h_prev, p):
    r = sigmoid(x @ p.W_r.T + h_prev @ p.U_r.T)
    z = sigmoid(x @ p.W_z.T + h_prev @ p.U_z.T)
    h_cand = np.tanh(x @ p.W.T + (r * h_prev) @ p.U.T)
    h = (1.0 - z) * h_prev + z * h_cand
    return h, TapeEntry(x, h_prev, r, z, h_cand)


def gru_cell_forward(x_t, h_prev, params):
    """One GRU step. Returns ``(h_t, tape_entry)``; shapes follow ``x_t``."""
    batched = np.ndim(x_t) == 2
    x = _as_rows(x_t, params.input_dim, "gru_cell_forward x_t")
    h = _as_rows(h_prev, params.hidden_dim, "gru_cell_forward h_prev")
    if x.shape[0] != h.shape[0]:
        raise InputError("gru_cell_forward: batch size of x_t and h_prev differ")
    h_t, entry = _cell(x, h, params)
    return (h_t if batched else h_t[0]), entry


def gru_sequence_forward(inputs, params):
    """Fold the cell over exactly three inputs starting from h0 = 0."""
    if len(inputs) != SEQ_LEN:
        raise InputError(f"gru_sequence_forward: expected {SEQ_LEN} inputs, got {len(inputs)}")
    batched = np.ndim(inputs[0]) == 2
    xs = [_as_rows(x, params.input_dim, "gru_sequence_forward input") for x in inputs]
    if len({x.shape[0] for x in xs}) != 1 or any((np.ndim(x) == 2) != batched for x in inputs):
        raise InputError("gru_sequence_forward: inputs disagree on batch shape")
    h = np.zeros((xs[0].shape[0], params.hidden_dim))
    entries = []
    for x in xs:
        h, entry = _cell(x, h, params)
        entries.append(entry)
    tape = GruTape(entries, params.input_dim, params.hidden_dim, batched)
    return (h if batched else h[0]), tape


def gru_backward(tape, params, dL_dh_final):
    """Reverse-mode pass over ``tape``.

    Returns ``(grads, input_grads)`` where ``grads`` is a GruParams holding
    dL/d(each weight matrix) and ``input_grads`` lists dL/dx_t per step.
    """
    if (tape.input_dim, tape.hidden_dim) != (params.input_dim, params.hidden_dim):
        raise InputError("gru_backward: tape was produced with differently shaped params")
    if len(tape.entries) != SEQ_LEN:
        raise InputError("gru_backward: tape does not hold three steps")
    dh = _as_rows(dL_dh_final, params.hidden_dim, "gru_backward dL_dh_final").copy()
    if dh.shape[0] != tape.entries[0].x.shape[0]:
        raise InputError("gru_backward: seed batch size does not match tape")

    g = {name: np.zeros_like(w) for name, w in params.items()}
    dxs = [None] * SEQ_LEN
    for t in range(SEQ_LEN - 1, -1, -1):
        e = tape.entries[t]
        dz = dh * (e.h_cand - e.h_prev)
        d_cand = dh * e.z
        dh_prev = dh * (1.0 - e.z)

        da_c = d_cand * (1.0 - e.h_cand ** 2)
        g["W"] += da_c.T @ e.x
        g["U"] += da_c.T @ (e.r * e.h_prev)
        dx = da_c @ params.W
        d_rh = da_c @ params.U
        dr = d_rh * e.h_prev
        dh_prev += d_rh * e.r

        da_z = dz * e.z * (1.0 - e.z)
        g["W_z"] += da_z.T @ e.x
        g["U_z"] += da_z.T @ e.h_prev
        dx += da_z @ params.W_z
        dh_prev += da_z @ params.U_z

        da_r = dr * e.r * (1.0 - e.r)
        g["W_r"] += da_r.T @ e.x
        g["U_r"] += da_r.T @ e.h_prev
        dx += da_r @ params.W_r
        dh_prev += da_r @ params.U_r

        dxs[t] = dx if tape.batched else dx[0]
        dh = dh_prev
    return GruParams(**g), dxs
