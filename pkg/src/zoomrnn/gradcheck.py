"""Central finite-difference checks of the hand-written backward passes.

The finite differences are taken on a separate straight-line forward pass
evaluated in extended precision (``np.longdouble``). It shares no code with
the library's float64 forward, and the extra precision keeps the rounding
error of a step-1e-5 central difference far below the 1e-6 relative
tolerance even for gradient entries of order 1e-6.
"""

import numpy as np

from zoomrnn.fusion import REGIONS, ZOOM_ORDER, RegionBundle, build_model
from zoomrnn.numkit import one_hot, softmax

FD_STEP = 1e-5
TOLERANCE = 1e-6
CHECKED_METHODS = ("zoom", "reversed", "feat-rnn", "prob-rnn", "embed-rnn", "concat")

LD = np.longdouble


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=LD)
    b = np.asarray(b, dtype=LD)
    return (np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).astype(np.float64)


def numerical_gradient(f, x, step=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``x``.

    ``x`` is perturbed in place and restored.
    """
    grad = np.zeros(x.shape, dtype=LD)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        up = f()
        x[i] = orig - step
        down = f()
        x[i] = orig
        grad[i] = (LD(up) - LD(down)) / (2 * LD(step))
    return grad


# --- extended-precision reference forward ---------------------------------------

def _sig(v):
    return 1 / (1 + np.exp(-v))


def reference_gru(xs, P, prefix=""):
    """h_final for one sample; ``P`` maps ``prefix + name`` to longdouble arrays."""
    h = np.zeros(P[prefix + "W"].shape[0], dtype=LD)
    for x in xs:
        x = np.asarray(x, dtype=LD)
        r = _sig(P[prefix + "W_r"] @ x + P[prefix + "U_r"] @ h)
        z = _sig(P[prefix + "W_z"] @ x + P[prefix + "U_z"] @ h)
        cand = np.tanh(P[prefix + "W"] @ x + P[prefix + "U"] @ (r * h))
        h = (1 - z) * h + z * cand
    return h


def _ref_softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def _sample(bundle, i):
    rows = {name: np.atleast_2d(getattr(bundle, name))[i] for name in ("f_w", "f_u", "f_h", "p_w", "p_u", "p_h")}
    f = {"whole": rows["f_w"], "upper": rows["f_u"], "head": rows["f_h"]}
    p = {"whole": rows["p_w"], "upper": rows["p_u"], "head": rows["p_h"]}
    return f, p


def reference_probs(method, P, bundle, order=ZOOM_ORDER):
    """Class probabilities for every row of ``bundle`` under params ``P``."""
    out = []
    for i in range(len(bundle)):
        f, p = _sample(bundle, i)
        fs = [f[r] for r in order]
        ps = [p[r] for r in order]
        if method in ("zoom", "reversed"):
            o = np.tanh((reference_gru(ps, P, "rnn_p.") + reference_gru(fs, P, "rnn_f.")) / 2)
        elif method in ("feat-rnn", "prob-rnn"):
            o = np.tanh(reference_gru(fs if method == "feat-rnn" else ps, P, "rnn."))
        elif method == "embed-rnn":
            embs = []
            for fr, pr in zip(fs, ps):
                a_f = P["emb_f.W"] @ np.asarray(fr, dtype=LD) + P["emb_f.b"]
                a_p = P["emb_p.W"] @ np.asarray(pr, dtype=LD) + P["emb_p.b"]
                embs.append(np.maximum(np.maximum(a_f, a_p), 0))
            o = np.tanh(reference_gru(embs, P, "rnn."))
        elif method == "concat":
            x = np.concatenate([np.asarray(f[r], dtype=LD) for r in REGIONS])
            o = np.maximum(P["fc.W"] @ x + P["fc.b"], 0)
        else:
            raise ValueError(f"no reference forward for {method!r}")
        out.append(_ref_softmax(P["cls.W"] @ o + P["cls.b"]))
    return np.array(out)


def reference_loss(method, P, bundle, Y, order=ZOOM_ORDER):
    """Summed per-sample cross-entropy with the 1/N_C factor."""
    probs = reference_probs(method, P, bundle, order)
    Y = np.asarray(Y, dtype=LD)
    return -(Y * np.log(np.maximum(probs, LD(1e-12)))).sum() / Y.shape[-1]


def check_model(model, bundle, labels, step=FD_STEP):
    """Max relative error per parameter array between ``backward`` and finite differences.

    The model must have dropout disabled.
    """
    Y = one_hot(labels, model.n_classes)
    _, cache = model.forward(bundle, train=False)
    analytic = model.backward(cache, Y)
    P = {name: np.array(arr, dtype=LD) for name, arr in model.params.items()}
    order = getattr(model, "order", ZOOM_ORDER)
    out = {}
    for name in model.params:
        numeric = numerical_gradient(lambda: reference_loss(model.method, P, bundle, Y, order), P[name], step)
        out[name] = float(relative_error(analytic[name], numeric).max())
    return out


def random_bundle(rng, n, feature_dim, n_classes):
    def probs():
        return softmax(rng.normal(0.0, 1.5, size=(n, n_classes)))

    feats = [rng.normal(0.0, 1.0, size=(n, feature_dim)) for _ in range(3)]
    return RegionBundle(*feats, probs(), probs(), probs())


def small_instance(method, seed, feature_dim=4, n_classes=3, hidden_dim=5, n_samples=2):
    """A random model with weights ~ U[-1, 1] and a random labelled batch."""
    rng = np.random.default_rng(seed)
    model = build_model(method, feature_dim, n_classes, hidden_dim=hidden_dim, dropout_p=0.0, rng=rng)
    for name in model.params:
        model.params[name] = rng.uniform(-1.0, 1.0, size=model.params[name].shape)
    bundle = random_bundle(rng, n_samples, feature_dim, n_classes)
    labels = rng.integers(0, n_classes, size=n_samples)
    return model, bundle, labels


def run_gradcheck(dims="small", seed=0, methods=CHECKED_METHODS):
    """Gradient check every trainable method; returns ``(shape, {method: {param: max_rel_err}})``.

    ``dims="small"`` uses features 4 / classes 3 / hidden 5; ``"random"`` draws
    each dimension from ``seed`` (features and hidden up to 8, classes up to 5).
    """
    rng = np.random.default_rng(seed)
    if dims == "small":
        shape = {"feature_dim": 4, "n_classes": 3, "hidden_dim": 5}
    elif dims == "random":
        shape = {"feature_dim": int(rng.integers(1, 9)), "n_classes": int(rng.integers(2, 6)),
                 "hidden_dim": int(rng.integers(1, 9))}
    else:
        raise ValueError(f"dims must be 'small' or 'random', got {dims!r}")
    results = {}
    for i, method in enumerate(methods):
        model, bundle, labels = small_instance(method, [seed, i], **shape)
        results[method] = check_model(model, bundle, labels)
    return shape, results
