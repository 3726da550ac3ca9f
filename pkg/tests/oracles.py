"""Independent reference computations shared by the test modules."""

import math

import numpy as np

from zoomrnn.gru import GruParams


def straight_line_gru(inputs, p):
    """Plain-Python loops over the gate equations; shares no code with the library."""
    def matvec(M, v):
        return [sum(M[i][j] * v[j] for j in range(len(v))) for i in range(len(M))]

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    Wr, Ur, Wz, Uz, W, U = (m.tolist() for m in (p.W_r, p.U_r, p.W_z, p.U_z, p.W, p.U))
    h = [0.0] * len(W)
    for x in inputs:
        x = list(x)
        a_r = [a + b for a, b in zip(matvec(Wr, x), matvec(Ur, h))]
        a_z = [a + b for a, b in zip(matvec(Wz, x), matvec(Uz, h))]
        r = [sig(v) for v in a_r]
        z = [sig(v) for v in a_z]
        rh = [ri * hi for ri, hi in zip(r, h)]
        cand = [math.tanh(a + b) for a, b in zip(matvec(W, x), matvec(U, rh))]
        h = [(1 - zi) * hi + zi * ci for zi, hi, ci in zip(z, h, cand)]
    return np.array(h)


def random_params(rng, input_dim, hidden_dim, scale=1.0):
    wi, wh = (hidden_dim, input_dim), (hidden_dim, hidden_dim)
    return GruParams(*(rng.uniform(-scale, scale, size=s) for s in (wi, wh, wi, wh, wi, wh)))
