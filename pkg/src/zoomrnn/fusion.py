"""Region fusion: the Zoom-RNN head and the competing fusion baselines.

Every fusion method maps a :class:`RegionBundle` to class probabilities.
Trainable methods keep their weights in an ordered ``params`` dict of float64
arrays and expose ``forward``/``backward``; ``backward`` returns the gradient
of the per-sample cross-entropy summed over the rows of the batch.
"""

import struct
from dataclasses import dataclass

import numpy as np

from zoomrnn.errors import InputError, SchemaError
from zoomrnn.gru import PARAM_NAMES, GruParams, gru_backward, gru_sequence_forward
from zoomrnn.numkit import affine, one_hot, relu, softmax, softmax_cross_entropy_grad

REGIONS = ("whole", "upper", "head")
ZOOM_ORDER = ("whole", "upper", "head")
REVERSED_ORDER = ("head", "upper", "whole")

TRAINABLE_METHODS = ("zoom", "reversed", "feat-rnn", "prob-rnn", "embed-rnn", "concat")
FIXED_METHODS = ("conf-aware", "avg", "max")
REGION_METHODS = ("whole", "upper", "head")
FUSION_METHODS = TRAINABLE_METHODS + FIXED_METHODS
ALL_METHODS = REGION_METHODS + FUSION_METHODS

PROB_TOL = 1e-9


@dataclass
class RegionBundle:
    """Per-region features and probability vectors for one sample or a batch.

    Arrays are 1-D for a single instance or 2-D with one row per sample.
    """

    f_w: np.ndarray
    f_u: np.ndarray
    f_h: np.ndarray
    p_w: np.ndarray
    p_u: np.ndarray
    p_h: np.ndarray

    def __post_init__(self):
        for name in ("f_w", "f_u", "f_h", "p_w", "p_u", "p_h"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        fs = (self.f_w, self.f_u, self.f_h)
        ps = (self.p_w, self.p_u, self.p_h)
        if len({f.shape for f in fs}) != 1 or len({p.shape for p in ps}) != 1:
            raise InputError("RegionBundle: region vectors disagree on shape")
        if self.f_w.ndim not in (1, 2) or self.f_w.ndim != self.p_w.ndim:
            raise InputError("RegionBundle: features and probabilities must share rank")
        if self.f_w.ndim == 2 and self.f_w.shape[0] != self.p_w.shape[0]:
            raise InputError("RegionBundle: features and probabilities disagree on batch size")
        for p in ps:
            if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > PROB_TOL):
                raise InputError("RegionBundle: probability vectors must be non-negative and sum to 1")

    @property
    def batched(self):
        return self.f_w.ndim == 2

    @property
    def feature_dim(self):
        return self.f_w.shape[-1]

    @property
    def n_classes(self):
        return self.p_w.shape[-1]

    def __len__(self):
        return self.f_w.shape[0] if self.batched else 1

    def features(self, order=ZOOM_ORDER):
        lookup = {"whole": self.f_w, "upper": self.f_u, "head": self.f_h}
        return [lookup[r] for r in order]

    def probabilities(self, order=ZOOM_ORDER):
        lookup = {"whole": self.p_w, "upper": self.p_u, "head": self.p_h}
        return [lookup[r] for r in order]

    def take(self, idx):
        """Rows ``idx`` as a batched bundle (skips re-validation)."""
        out = object.__new__(RegionBundle)
        for name in ("f_w", "f_u", "f_h", "p_w", "p_u", "p_h"):
            setattr(out, name, np.atleast_2d(getattr(self, name))[idx])
        return out


def validate_order(order):
    order = tuple(order)
    if sorted(order) != sorted(REGIONS):
        raise InputError(f"region order must be a permutation of {REGIONS}, got {order}")
    return order


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class FusionModel:
    """Shared plumbing. Subclasses set ``method`` and implement ``forward``."""

    method = None
    order = ZOOM_ORDER
    dropout_p = 0.0
    hidden_dim = 0
    aux_dim = 0

    def __init__(self, feature_dim, n_classes):
        self.feature_dim = int(feature_dim)
        self.n_classes = int(n_classes)
        self.params = {}

    @property
    def trainable(self):
        return bool(self.params)

    def _check(self, bundle):
        if bundle.feature_dim != self.feature_dim or bundle.n_classes != self.n_classes:
            raise InputError(
                f"{self.method}: bundle dims (features {bundle.feature_dim}, classes "
                f"{bundle.n_classes}) do not match model ({self.feature_dim}, {self.n_classes})"
            )

    def predict(self, bundle):
        probs, _ = self.forward(bundle, train=False)
        return probs

    def backward(self, cache, y):
        return {}

    def _dropout(self, o, train, rng):
        if not train or self.dropout_p == 0.0:
            return o, None
        keep = 1.0 - self.dropout_p
        mask = (_as_rng(rng).random(o.shape) < keep) / keep
        return o * mask, mask

    def _classify(self, o):
        return softmax(affine(self.params["cls.W"], o, self.params["cls.b"]))

    def _classifier_backward(self, o_used, probs, y, grads):
        y = np.atleast_2d(y)
        if y.shape != probs.shape:
            raise InputError(f"{self.method}: target shape {y.shape} does not match output {probs.shape}")
        d_logits = softmax_cross_entropy_grad(probs, y)
        grads["cls.W"] = d_logits.T @ o_used
        grads["cls.b"] = d_logits.sum(axis=0)
        return d_logits @ self.params["cls.W"]

    def _init_classifier(self, rng, width):
        self.params["cls.W"] = _uniform(rng, width, (self.n_classes, width))
        self.params["cls.b"] = np.zeros(self.n_classes)

    def _gru(self, prefix):
        return GruParams(**{n: self.params[f"{prefix}.{n}"] for n in PARAM_NAMES})

    def _init_gru(self, prefix, input_dim, rng):
        for name, w in GruParams.init(input_dim, self.hidden_dim, rng).items():
            self.params[f"{prefix}.{name}"] = w

    @staticmethod
    def _put_gru_grads(prefix, gru_grads, grads):
        for name, g in gru_grads.items():
            grads[f"{prefix}.{name}"] = g


def _finish(probs, bundle):
    return probs if bundle.batched else probs[0]


class ZoomRnnModel(FusionModel):
    """Two GRU branches (features, probabilities) averaged, squashed and classified."""

    def __init__(self, feature_dim, n_classes, hidden_dim=64, order=ZOOM_ORDER, dropout_p=0.5, rng=None):
        super().__init__(feature_dim, n_classes)
        if not 0.0 <= dropout_p < 1.0:
            raise InputError("dropout_p must lie in [0, 1)")
        self.hidden_dim = int(hidden_dim)
        self.order = validate_order(order)
        self.dropout_p = float(dropout_p)
        rng = _as_rng(rng)
        self._init_gru("rnn_f", self.feature_dim, rng)
        self._init_gru("rnn_p", self.n_classes, rng)
        self._init_classifier(rng, self.hidden_dim)

    @property
    def method(self):
        return "reversed" if self.order == REVERSED_ORDER else "zoom"

    def forward(self, bundle, train=False, rng=None):
        self._check(bundle)
        h_f, tape_f = gru_sequence_forward([np.atleast_2d(x) for x in bundle.features(self.order)], self._gru("rnn_f"))
        h_p, tape_p = gru_sequence_forward([np.atleast_2d(x) for x in bundle.probabilities(self.order)], self._gru("rnn_p"))
        o = np.tanh((h_p + h_f) / 2.0)
        o_used, mask = self._dropout(o, train, rng)
        probs = self._classify(o_used)
        cache = {"tape_f": tape_f, "tape_p": tape_p, "o": o, "o_used": o_used, "mask": mask, "probs": probs}
        return _finish(probs, bundle), cache

    def backward(self, cache, y):
        grads = {}
        d_o = self._classifier_backward(cache["o_used"], cache["probs"], y, grads)
        if cache["mask"] is not None:
            d_o = d_o * cache["mask"]
        d_avg = d_o * (1.0 - cache["o"] ** 2) / 2.0
        g_f, _ = gru_backward(cache["tape_f"], self._gru("rnn_f"), d_avg)
        g_p, _ = gru_backward(cache["tape_p"], self._gru("rnn_p"), d_avg)
        self._put_gru_grads("rnn_f", g_f, grads)
        self._put_gru_grads("rnn_p", g_p, grads)
        return grads


class SingleRnnModel(FusionModel):
    """One GRU over either the probability stream or the feature stream."""

    def __init__(self, feature_dim, n_classes, stream="features", hidden_dim=64, order=ZOOM_ORDER,
                 dropout_p=0.5, rng=None):
        super().__init__(feature_dim, n_classes)
        if stream not in ("features", "probabilities"):
            raise InputError(f"unknown stream {stream!r}")
        if not 0.0 <= dropout_p < 1.0:
            raise InputError("dropout_p must lie in [0, 1)")
        self.stream = stream
        self.hidden_dim = int(hidden_dim)
        self.order = validate_order(order)
        self.dropout_p = float(dropout_p)
        rng = _as_rng(rng)
        self._init_gru("rnn", self.feature_dim if stream == "features" else self.n_classes, rng)
        self._init_classifier(rng, self.hidden_dim)

    @property
    def method(self):
        return "feat-rnn" if self.stream == "features" else "prob-rnn"

    def forward(self, bundle, train=False, rng=None):
        self._check(bundle)
        seq = bundle.features(self.order) if self.stream == "features" else bundle.probabilities(self.order)
        h, tape = gru_sequence_forward([np.atleast_2d(x) for x in seq], self._gru("rnn"))
        o = np.tanh(h)
        o_used, mask = self._dropout(o, train, rng)
        probs = self._classify(o_used)
        return _finish(probs, bundle), {"tape": tape, "o": o, "o_used": o_used, "mask": mask, "probs": probs}

    def backward(self, cache, y):
        grads = {}
        d_o = self._classifier_backward(cache["o_used"], cache["probs"], y, grads)
        if cache["mask"] is not None:
            d_o = d_o * cache["mask"]
        g, _ = gru_backward(cache["tape"], self._gru("rnn"), d_o * (1.0 - cache["o"] ** 2))
        self._put_gru_grads("rnn", g, grads)
        return grads


class EmbeddingsRnnModel(FusionModel):
    """Per-region embedding relu(max(FC_f f, FC_p p)) fed to a single GRU."""

    method = "embed-rnn"

    def __init__(self, feature_dim, n_classes, hidden_dim=64, embed_dim=None, order=ZOOM_ORDER,
                 dropout_p=0.5, rng=None):
        super().__init__(feature_dim, n_classes)
        if not 0.0 <= dropout_p < 1.0:
            raise InputError("dropout_p must lie in [0, 1)")
        self.hidden_dim = int(hidden_dim)
        self.aux_dim = int(embed_dim or hidden_dim)
        self.order = validate_order(order)
        self.dropout_p = float(dropout_p)
        rng = _as_rng(rng)
        self.params["emb_f.W"] = _uniform(rng, self.feature_dim, (self.aux_dim, self.feature_dim))
        self.params["emb_f.b"] = np.zeros(self.aux_dim)
        self.params["emb_p.W"] = _uniform(rng, self.n_classes, (self.aux_dim, self.n_classes))
        self.params["emb_p.b"] = np.zeros(self.aux_dim)
        self._init_gru("rnn", self.aux_dim, rng)
        self._init_classifier(rng, self.hidden_dim)

    def embed(self, f, p):
        a_f = affine(self.params["emb_f.W"], f, self.params["emb_f.b"])
        a_p = affine(self.params["emb_p.W"], p, self.params["emb_p.b"])
        pick_f = a_f >= a_p
        return relu(np.where(pick_f, a_f, a_p)), pick_f

    def forward(self, bundle, train=False, rng=None):
        self._check(bundle)
        fs = [np.atleast_2d(x) for x in bundle.features(self.order)]
        ps = [np.atleast_2d(x) for x in bundle.probabilities(self.order)]
        embs, picks = zip(*(self.embed(f, p) for f, p in zip(fs, ps)))
        h, tape = gru_sequence_forward(list(embs), self._gru("rnn"))
        o = np.tanh(h)
        o_used, mask = self._dropout(o, train, rng)
        probs = self._classify(o_used)
        cache = {"fs": fs, "ps": ps, "embs": embs, "picks": picks, "tape": tape,
                 "o": o, "o_used": o_used, "mask": mask, "probs": probs}
        return _finish(probs, bundle), cache

    def backward(self, cache, y):
        grads = {}
        d_o = self._classifier_backward(cache["o_used"], cache["probs"], y, grads)
        if cache["mask"] is not None:
            d_o = d_o * cache["mask"]
        g, d_embs = gru_backward(cache["tape"], self._gru("rnn"), d_o * (1.0 - cache["o"] ** 2))
        self._put_gru_grads("rnn", g, grads)
        for key in ("emb_f.W", "emb_f.b", "emb_p.W", "emb_p.b"):
            grads[key] = np.zeros_like(self.params[key])
        for f, p, e, pick, d_e in zip(cache["fs"], cache["ps"], cache["embs"], cache["picks"], d_embs):
            d_a = d_e * (e > 0)
            d_f = d_a * pick
            d_p = d_a * ~pick
            grads["emb_f.W"] += d_f.T @ f
            grads["emb_f.b"] += d_f.sum(axis=0)
            grads["emb_p.W"] += d_p.T @ p
            grads["emb_p.b"] += d_p.sum(axis=0)
        return grads


class ConcatModel(FusionModel):
    """Early fusion: [f_w | f_u | f_h] -> FC -> relu -> classifier."""

    method = "concat"

    def __init__(self, feature_dim, n_classes, fc_dim=2048, dropout_p=0.5, rng=None):
        super().__init__(feature_dim, n_classes)
        if not 0.0 <= dropout_p < 1.0:
            raise InputError("dropout_p must lie in [0, 1)")
        self.aux_dim = int(fc_dim)
        self.hidden_dim = self.aux_dim
        self.dropout_p = float(dropout_p)
        rng = _as_rng(rng)
        width = 3 * self.feature_dim
        self.params["fc.W"] = _uniform(rng, width, (self.aux_dim, width))
        self.params["fc.b"] = np.zeros(self.aux_dim)
        self._init_classifier(rng, self.aux_dim)

    def forward(self, bundle, train=False, rng=None):
        self._check(bundle)
        x = np.concatenate([np.atleast_2d(f) for f in bundle.features(ZOOM_ORDER)], axis=1)
        a = affine(self.params["fc.W"], x, self.params["fc.b"])
        hidden = relu(a)
        h_used, mask = self._dropout(hidden, train, rng)
        probs = self._classify(h_used)
        cache = {"x": x, "a": a, "h_used": h_used, "mask": mask, "probs": probs}
        return _finish(probs, bundle), cache

    def backward(self, cache, y):
        grads = {}
        d_h = self._classifier_backward(cache["h_used"], cache["probs"], y, grads)
        if cache["mask"] is not None:
            d_h = d_h * cache["mask"]
        d_a = d_h * (cache["a"] > 0)
        grads["fc.W"] = d_a.T @ cache["x"]
        grads["fc.b"] = d_a.sum(axis=0)
        return grads


class _FixedFusion(FusionModel):
    def forward(self, bundle, train=False, rng=None):
        self._check(bundle)
        return self.fuse(bundle), None


class ElementwiseFusion(_FixedFusion):
    def __init__(self, feature_dim, n_classes, kind="avg"):
        super().__init__(feature_dim, n_classes)
        if kind not in ("avg", "max"):
            raise InputError(f"unknown elementwise fusion {kind!r}")
        self.kind = kind
        self.method = kind

    def fuse(self, bundle):
        return fuse_elementwise(bundle, self.kind)


class ConfidenceAwareFusion(_FixedFusion):
    method = "conf-aware"

    def __init__(self, feature_dim, n_classes, confidence="max_prob"):
        super().__init__(feature_dim, n_classes)
        self.confidence = confidence

    def fuse(self, bundle):
        return fuse_confidence_aware(bundle, self.confidence)


class RegionOnly(_FixedFusion):
    """Single-region baseline: the region probe's probabilities as-is."""

    def __init__(self, feature_dim, n_classes, region="head"):
        super().__init__(feature_dim, n_classes)
        if region not in REGIONS:
            raise InputError(f"unknown region {region!r}")
        self.method = region
        self.region = region

    def fuse(self, bundle):
        return bundle.probabilities((self.region,))[0]


def fuse_elementwise(bundle, kind="avg"):
    ps = np.stack(bundle.probabilities())
    if kind == "avg":
        return ps.mean(axis=0)
    if kind == "max":
        m = ps.max(axis=0)
        return m / m.sum(axis=-1, keepdims=True)
    raise InputError(f"unknown elementwise fusion {kind!r}")


def region_confidence(p, kind="max_prob"):
    if kind == "max_prob":
        return p.max(axis=-1)
    if kind == "neg_entropy":
        # log(N_C) - H(p): zero for a uniform vector, log(N_C) for a one-hot one
        ent = -(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=-1)
        return np.log(p.shape[-1]) - ent
    raise InputError(f"unknown confidence measure {kind!r}")


def fuse_confidence_aware(bundle, confidence="max_prob"):
    ps = np.stack(bundle.probabilities())
    c = np.stack([region_confidence(p, confidence) for p in ps])
    total = c.sum(axis=0)
    w = np.where(total > 0, c / np.where(total > 0, total, 1.0), 1.0 / 3.0)
    return (w[..., None] * ps).sum(axis=0)


def fuse_concat(bundle, model):
    return model.predict(bundle)


def fuse_single_rnn(bundle, which, model):
    expected = "feat-rnn" if which == "features" else "prob-rnn"
    if model.method != expected:
        raise InputError(f"fuse_single_rnn({which!r}) needs a {expected} model, got {model.method}")
    return model.predict(bundle)


def fuse_embeddings_rnn(bundle, model):
    return model.predict(bundle)


def zoom_rnn_forward(bundle, model, mode="infer", rng_seed=None):
    if mode not in ("train", "infer"):
        raise InputError(f"mode must be 'train' or 'infer', got {mode!r}")
    return model.forward(bundle, train=mode == "train", rng=rng_seed)


def zoom_rnn_backward(tape, model, y):
    if tape["tape_f"].hidden_dim != model.hidden_dim or tape["probs"].shape[-1] != model.n_classes:
        raise InputError("zoom_rnn_backward: tape does not belong to this model")
    return model.backward(tape, y)


def set_region_order(model, order):
    if not hasattr(model, "order") or model.method not in ("zoom", "reversed", "feat-rnn", "prob-rnn", "embed-rnn"):
        raise InputError(f"{model.method} has no region order")
    model.order = validate_order(order)
    return model


def build_model(method, feature_dim, n_classes, hidden_dim=64, dropout_p=0.5, aux_dim=None, rng=None,
                confidence="max_prob"):
    """Construct a fresh model for any method name in ``ALL_METHODS``."""
    if method == "zoom":
        return ZoomRnnModel(feature_dim, n_classes, hidden_dim, ZOOM_ORDER, dropout_p, rng)
    if method == "reversed":
        return ZoomRnnModel(feature_dim, n_classes, hidden_dim, REVERSED_ORDER, dropout_p, rng)
    if method in ("feat-rnn", "prob-rnn"):
        stream = "features" if method == "feat-rnn" else "probabilities"
        return SingleRnnModel(feature_dim, n_classes, stream, hidden_dim, ZOOM_ORDER, dropout_p, rng)
    if method == "embed-rnn":
        return EmbeddingsRnnModel(feature_dim, n_classes, hidden_dim, aux_dim, ZOOM_ORDER, dropout_p, rng)
    if method == "concat":
        return ConcatModel(feature_dim, n_classes, aux_dim or hidden_dim, dropout_p, rng)
    if method == "conf-aware":
        return ConfidenceAwareFusion(feature_dim, n_classes, confidence)
    if method in ("avg", "max"):
        return ElementwiseFusion(feature_dim, n_classes, method)
    if method in REGIONS:
        return RegionOnly(feature_dim, n_classes, method)
    raise InputError(f"unknown method {method!r}; valid methods: {', '.join(ALL_METHODS)}")


def accuracy(probs, labels):
    return float(np.mean(np.argmax(np.atleast_2d(probs), axis=1) == np.asarray(labels)))


def targets(labels, n_classes):
    return one_hot(labels, n_classes)


# --- binary container -------------------------------------------------------
#
# little-endian throughout:
#   magic b"ZRNN" | u16 version | u16 len + method utf-8
#   u32 feature_dim, n_classes, hidden_dim, aux_dim | 3 x u8 region order
#   f64 dropout_p | u32 array count
#   per array: u16 len + name utf-8 | u8 ndim | u32 per dim | f64 data row-major

MAGIC = b"ZRNN"
FORMAT_VERSION = 1


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def dumps_model(model, extra_arrays=None):
    """Serialize ``model`` plus optional named arrays (e.g. region probes)."""
    arrays = list(model.params.items()) + list((extra_arrays or {}).items())
    order_idx = [REGIONS.index(r) for r in model.order]
    out = bytearray(MAGIC)
    out += struct.pack("<H", FORMAT_VERSION)
    out += _pack_str(model.method)
    out += struct.pack("<4I", model.feature_dim, model.n_classes, model.hidden_dim, model.aux_dim)
    out += struct.pack("<3B", *order_idx)
    out += struct.pack("<d", model.dropout_p)
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += _pack_str(name)
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise SchemaError("model file truncated")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def string(self):
        (n,) = self.take("<H")
        raw = self.buf[self.pos:self.pos + n]
        if len(raw) != n:
            raise SchemaError("model file truncated")
        self.pos += n
        return raw.decode("utf-8")

    def array(self, shape):
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if self.pos + nbytes > len(self.buf):
            raise SchemaError("model file truncated")
        arr = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos).reshape(shape)
        self.pos += nbytes
        return arr.astype(np.float64)


def loads_model(buf):
    """Inverse of :func:`dumps_model`; returns ``(model, extra_arrays)``."""
    if buf[:4] != MAGIC:
        raise SchemaError("not a Zoom-RNN model file (bad magic)")
    rd = _Reader(buf)
    rd.pos = 4
    (version,) = rd.take("<H")
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported model file version {version}")
    method = rd.string()
    feature_dim, n_classes, hidden_dim, aux_dim = rd.take("<4I")
    order = tuple(REGIONS[i] for i in rd.take("<3B"))
    (dropout_p,) = rd.take("<d")
    (count,) = rd.take("<I")
    arrays = {}
    for _ in range(count):
        name = rd.string()
        (ndim,) = rd.take("<B")
        shape = rd.take(f"<{ndim}I")
        arrays[name] = rd.array(shape)
    if rd.pos != len(buf):
        raise SchemaError("trailing bytes after model payload")

    model = build_model(method, feature_dim, n_classes, hidden_dim=hidden_dim or 1, dropout_p=dropout_p,
                        aux_dim=aux_dim or None, rng=0)
    if hasattr(model, "order") and model.params:
        model.order = validate_order(order)
    for name in model.params:
        if name not in arrays or arrays[name].shape != model.params[name].shape:
            raise SchemaError(f"model file missing or misshaped array {name!r}")
        model.params[name] = arrays.pop(name)
    return model, arrays


def save_model(path, model, extra_arrays=None):
    with open(path, "wb") as fh:
        fh.write(dumps_model(model, extra_arrays))


def load_model(path):
    with open(path, "rb") as fh:
        return loads_model(fh.read())
