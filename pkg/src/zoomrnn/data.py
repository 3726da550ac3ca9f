"""Datasets of per-region feature vectors, region probes, and fold handling.

On disk a manifest is a directory holding

* ``manifest.json``: class count, feature dimension, counts, provenance;
* ``samples.jsonl``: one ``{"sample_id", "label", "fold"}`` object per line;
* ``features.bin``: little-endian float64, per sample in ``samples.jsonl``
  order: ``f_w, f_u, f_h`` and then ``p_w, p_u, p_h`` when probabilities are
  present.
"""

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from zoomrnn.errors import InputError, ProtocolError, SchemaError
from zoomrnn.fusion import REGIONS, RegionBundle, accuracy
from zoomrnn.numkit import affine, softmax, softmax_cross_entropy_grad
from zoomrnn.training import SgdConfig, check_fold_protocol, train_model

MANIFEST_VERSION = 1
PROB_SUM_TOL = 1e-6


@dataclass
class SampleRecord:
    sample_id: str
    label: int
    fold: int
    f_w: np.ndarray
    f_u: np.ndarray
    f_h: np.ndarray
    p_w: np.ndarray | None = None
    p_u: np.ndarray | None = None
    p_h: np.ndarray | None = None


class DatasetManifest:
    """Column-oriented labelled samples split into fold 0 and fold 1.

    ``features`` and ``probabilities`` map each region name to an array with
    one row per sample. Invariants are checked on construction.
    """

    def __init__(self, n_classes, feature_dim, sample_ids, labels, folds, features, probabilities=None,
                 provenance=None):
        self.n_classes = int(n_classes)
        self.feature_dim = int(feature_dim)
        self.sample_ids = list(sample_ids)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.folds = np.asarray(folds, dtype=np.int64)
        self.features = {r: np.asarray(features[r], dtype=np.float64) for r in REGIONS}
        self.probabilities = (
            None if probabilities is None
            else {r: np.asarray(probabilities[r], dtype=np.float64) for r in REGIONS}
        )
        self.provenance = dict(provenance or {"kind": "ingested"})
        self.validate()

    def __len__(self):
        return len(self.sample_ids)

    @property
    def has_probabilities(self):
        return self.probabilities is not None

    @property
    def samples(self):
        out = []
        for i, sid in enumerate(self.sample_ids):
            f = {r: self.features[r][i] for r in REGIONS}
            p = {r: (self.probabilities[r][i] if self.has_probabilities else None) for r in REGIONS}
            out.append(SampleRecord(sid, int(self.labels[i]), int(self.folds[i]),
                                    f["whole"], f["upper"], f["head"], p["whole"], p["upper"], p["head"]))
        return out

    def validate(self):
        n = len(self.sample_ids)
        if n == 0:
            raise SchemaError("dataset has no samples")
        if self.n_classes < 1 or self.feature_dim < 1:
            raise SchemaError("n_classes and feature_dim must be positive")
        if len(set(self.sample_ids)) != n:
            raise SchemaError("duplicate sample_id")
        if self.labels.shape != (n,) or self.folds.shape != (n,):
            raise SchemaError("labels/folds length does not match sample count")
        if not set(self.folds.tolist()) <= {0, 1}:
            raise SchemaError("fold must be 0 or 1")
        for r in REGIONS:
            if self.features[r].shape != (n, self.feature_dim):
                raise SchemaError(f"{r} features have shape {self.features[r].shape}, "
                                  f"expected ({n}, {self.feature_dim})")
            if not np.all(np.isfinite(self.features[r])):
                raise SchemaError(f"{r} features contain non-finite values")
        if self.has_probabilities:
            for r in REGIONS:
                p = self.probabilities[r]
                if p.shape != (n, self.n_classes):
                    raise SchemaError(f"{r} probabilities have shape {p.shape}")
                if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > PROB_SUM_TOL):
                    bad = int(np.argmax(np.abs(p.sum(axis=1) - 1.0)))
                    raise SchemaError(f"{r} probabilities of sample {self.sample_ids[bad]!r} "
                                      "are not a probability vector")
        present = set(self.labels.tolist())
        if present != set(range(self.n_classes)):
            raise SchemaError(f"labels must cover the contiguous range [0, {self.n_classes})")
        check_fold_protocol(self)

    def fold_indices(self, fold):
        return np.flatnonzero(self.folds == fold)

    def bundle(self, idx=None):
        if not self.has_probabilities:
            raise ProtocolError("dataset has no probability vectors; annotate it with region probes first")
        idx = slice(None) if idx is None else idx
        f, p = self.features, self.probabilities
        return RegionBundle(f["whole"][idx], f["upper"][idx], f["head"][idx],
                            p["whole"][idx], p["upper"][idx], p["head"][idx])

    def fold_data(self, fold):
        idx = self.fold_indices(fold)
        return FoldData(self.bundle(idx), self.labels[idx], self.folds[idx], fold)

    def region_data(self, region, fold):
        idx = self.fold_indices(fold)
        return FoldData(self.features[region][idx], self.labels[idx], self.folds[idx], fold)

    def with_probabilities(self, probabilities, provenance=None):
        return DatasetManifest(self.n_classes, self.feature_dim, self.sample_ids, self.labels, self.folds,
                               self.features, probabilities, provenance or self.provenance)


@dataclass
class FoldData:
    """Training/evaluation view of one fold."""

    inputs: object
    labels: np.ndarray
    sample_folds: np.ndarray
    fold: int


# --- persistence ------------------------------------------------------------

def _header(manifest):
    return {
        "format_version": MANIFEST_VERSION,
        "n_classes": manifest.n_classes,
        "feature_dim": manifest.feature_dim,
        "n_samples": len(manifest),
        "has_probabilities": manifest.has_probabilities,
        "counts": {"fold0": int(np.sum(manifest.folds == 0)), "fold1": int(np.sum(manifest.folds == 1))},
        "provenance": manifest.provenance,
    }


def save_manifest(manifest, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(_header(manifest), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "samples.jsonl"), "w") as fh:
        for sid, label, fold in zip(manifest.sample_ids, manifest.labels, manifest.folds):
            fh.write(json.dumps({"sample_id": sid, "label": int(label), "fold": int(fold)}, sort_keys=True) + "\n")
    blocks = [manifest.features[r] for r in REGIONS]
    if manifest.has_probabilities:
        blocks += [manifest.probabilities[r] for r in REGIONS]
    rows = np.concatenate(blocks, axis=1)
    with open(os.path.join(directory, "features.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def _read_header(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise SchemaError(f"missing {path}") from None
    if not text.strip():
        raise SchemaError(f"{path} is empty")
    try:
        header = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    required = ("n_classes", "feature_dim", "n_samples", "has_probabilities")
    if not isinstance(header, dict) or any(k not in header for k in required):
        raise SchemaError(f"{path}: header must contain {', '.join(required)}")
    if header.get("format_version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise SchemaError(f"{path}: unsupported format_version {header['format_version']}")
    return header


def _read_samples(path):
    ids, labels, folds = [], [], []
    try:
        fh = open(path)
    except FileNotFoundError:
        raise SchemaError(f"missing {path}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, label, fold = str(rec["sample_id"]), rec["label"], rec["fold"]
                if not isinstance(label, int) or not isinstance(fold, int):
                    raise TypeError("label and fold must be integers")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise SchemaError(f"{path}: malformed line {lineno}: {exc}") from None
            ids.append(sid)
            labels.append(label)
            folds.append(fold)
    return ids, labels, folds


def load_manifest(directory, unit_norm=False):
    """Load and validate a manifest directory.

    ``unit_norm`` rescales every feature vector to unit length after loading.
    """
    header = _read_header(os.path.join(directory, "manifest.json"))
    ids, labels, folds = _read_samples(os.path.join(directory, "samples.jsonl"))
    n, d, c = header["n_samples"], header["feature_dim"], header["n_classes"]
    if len(ids) != n:
        raise SchemaError(f"samples.jsonl has {len(ids)} records, header says {n}")
    width = 3 * d + (3 * c if header["has_probabilities"] else 0)
    try:
        raw = np.fromfile(os.path.join(directory, "features.bin"), dtype="<f8")
    except FileNotFoundError:
        raise SchemaError("missing features.bin") from None
    if raw.size != n * width:
        raise SchemaError(f"features.bin holds {raw.size} values, expected {n * width}")
    rows = raw.reshape(n, width).astype(np.float64)
    features = {r: rows[:, i * d:(i + 1) * d] for i, r in enumerate(REGIONS)}
    if unit_norm:
        features = {r: f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12) for r, f in features.items()}
    probabilities = None
    if header["has_probabilities"]:
        off = 3 * d
        probabilities = {r: rows[:, off + i * c:off + (i + 1) * c] for i, r in enumerate(REGIONS)}
    return DatasetManifest(c, d, ids, labels, folds, features, probabilities,
                           header.get("provenance", {"kind": "ingested"}))


# --- synthesis --------------------------------------------------------------

@dataclass
class SynthParams:
    """Gaussian prototype model of per-region features.

    Each identity has one prototype per region, a random direction scaled to
    length ``prototype_norm``; samples add isotropic noise of the region's
    scale. With probability ``occlusion_rate`` a sample's head feature is
    replaced by pure head-scale noise.
    """

    n_classes: int = 20
    samples_per_identity: int = 40
    feature_dim: int = 32
    sigma_head: float = 0.3
    sigma_upper: float = 0.6
    sigma_whole: float = 1.0
    occlusion_rate: float = 0.25
    seed: int = 0
    prototype_norm: float = 1.8

    def __post_init__(self):
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise InputError("occlusion_rate must lie in [0, 1]")
        if min(self.sigma_head, self.sigma_upper, self.sigma_whole) < 0:
            raise InputError("noise scales must be non-negative")
        if self.n_classes < 1 or self.feature_dim < 1 or self.samples_per_identity < 2:
            raise InputError("need n_classes >= 1, feature_dim >= 1 and samples_per_identity >= 2")

    def sigmas(self):
        return {"whole": self.sigma_whole, "upper": self.sigma_upper, "head": self.sigma_head}


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def synth_generate(params):
    """Draw a deterministic synthetic dataset; identities are split evenly across folds."""
    rng = np.random.default_rng(params.seed)
    c, k, d = params.n_classes, params.samples_per_identity, params.feature_dim
    prototypes = {r: params.prototype_norm * _unit_rows(rng, c, d) for r in REGIONS}
    labels = np.repeat(np.arange(c), k)
    folds = np.empty(c * k, dtype=np.int64)
    for identity in range(c):
        split = np.zeros(k, dtype=np.int64)
        split[rng.permutation(k)[: k // 2]] = 1
        folds[identity * k:(identity + 1) * k] = split
    sigmas = params.sigmas()
    features = {}
    for r in REGIONS:
        features[r] = prototypes[r][labels] + sigmas[r] * rng.standard_normal((c * k, d))
    occluded = rng.random(c * k) < params.occlusion_rate
    n_occ = int(occluded.sum())
    features["head"][occluded] = sigmas["head"] * rng.standard_normal((n_occ, d))
    ids = [f"id{lab:03d}_{i:04d}" for i, lab in enumerate(labels)]
    provenance = {"kind": "synthetic", "seed": params.seed, "params": asdict(params)}
    return DatasetManifest(c, d, ids, labels, folds, features, None, provenance)


def nearest_prototype_accuracy(manifest, region, train_fold):
    """Class-mean classifier fit on ``train_fold`` and scored on the other fold."""
    tr = manifest.fold_indices(train_fold)
    te = manifest.fold_indices(1 - train_fold)
    X = manifest.features[region]
    means = np.stack([X[tr][manifest.labels[tr] == c].mean(axis=0) for c in range(manifest.n_classes)])
    d2 = ((X[te][:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == manifest.labels[te]))


# --- region probes ------------------------------------------------------------

PROBE_CONFIG = SgdConfig(learning_rate=0.02, momentum=0.9, epochs=30, batch_size=10, seed=0)


class RegionProbe:
    """Affine layer + softmax on one region's feature vector."""

    method = "probe"

    def __init__(self, feature_dim, n_classes, region, rng=None):
        self.feature_dim = int(feature_dim)
        self.n_classes = int(n_classes)
        self.region = region
        rng = np.random.default_rng(rng)
        bound = 1.0 / np.sqrt(feature_dim)
        self.params = {"W": rng.uniform(-bound, bound, (n_classes, feature_dim)), "b": np.zeros(n_classes)}

    trainable = True

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        probs = softmax(affine(self.params["W"], x, self.params["b"]))
        return probs, {"x": np.atleast_2d(x), "probs": np.atleast_2d(probs)}

    def backward(self, cache, y):
        d = softmax_cross_entropy_grad(cache["probs"], np.atleast_2d(y))
        return {"W": d.T @ cache["x"], "b": d.sum(axis=0)}

    def predict(self, x):
        return self.forward(x)[0]


@dataclass
class ProbeSet:
    probes: dict
    fold: int
    reports: dict = field(default_factory=dict)

    def arrays(self):
        """Flat named arrays for embedding in a model file."""
        out = {}
        for r in REGIONS:
            out[f"probe.{r}.W"] = self.probes[r].params["W"]
            out[f"probe.{r}.b"] = self.probes[r].params["b"]
        return out

    @classmethod
    def from_arrays(cls, arrays, fold=None):
        probes = {}
        for r in REGIONS:
            W = arrays[f"probe.{r}.W"]
            probe = RegionProbe(W.shape[1], W.shape[0], r, rng=0)
            probe.params = {"W": W, "b": arrays[f"probe.{r}.b"]}
            probes[r] = probe
        return cls(probes, fold)


def train_region_probes(manifest, fold, cfg=None, audit=None):
    """Fit one probe per region on fold ``fold`` only."""
    if fold not in (0, 1):
        raise ProtocolError(f"training fold must be 0 or 1, got {fold}")
    cfg = cfg or PROBE_CONFIG
    probes, reports = {}, {}
    for i, r in enumerate(REGIONS):
        probe = RegionProbe(manifest.feature_dim, manifest.n_classes, r, rng=[cfg.seed, i])
        reports[r] = train_model(probe, manifest.region_data(r, fold), cfg, audit=audit, eval_fold=1 - fold)
        probes[r] = probe
    return ProbeSet(probes, fold, reports)


def annotate_probabilities(manifest, probes, overwrite=True):
    """Return a copy of ``manifest`` with ``p_*`` set to the probe outputs for every sample."""
    if manifest.has_probabilities and not overwrite:
        raise ProtocolError("dataset already has probability vectors and overwrite was not requested")
    probs = {r: probes.probes[r].predict(manifest.features[r]) for r in REGIONS}
    prov = dict(manifest.provenance)
    prov["probes_fold"] = probes.fold
    return manifest.with_probabilities(probs, prov)


def fold_views(manifest, probe_cfg=None, audit=None):
    """Per training fold, the dataset as seen by a model trained on that fold.

    Ingested probabilities are used as-is; otherwise probes are fit on each
    training fold and used to annotate both folds.
    """
    if manifest.has_probabilities:
        return {0: manifest, 1: manifest}
    return {k: annotate_probabilities(manifest, train_region_probes(manifest, k, probe_cfg, audit)) for k in (0, 1)}


def probe_accuracies(view, train_fold):
    """Test-fold accuracy of each region's probabilities in ``view``."""
    te = view.fold_indices(1 - train_fold)
    return {r: accuracy(view.probabilities[r][te], view.labels[te]) for r in REGIONS}


def probe_accuracy_csv(rows):
    """``rows``: iterable of ``(seed, train_fold, {region: acc})``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "train_fold", "region", "accuracy"])
    for seed, fold, accs in rows:
        for r in REGIONS:
            writer.writerow([seed, fold, r, repr(accs[r])])
    return buf.getvalue()


class LeakageAudit:
    """Counts gradient contributions from the fold a model will be scored on."""

    def __init__(self):
        self.batches = 0
        self.samples = 0
        self.violations = 0

    def record(self, batch_folds, eval_fold):
        batch_folds = np.asarray(batch_folds)
        self.batches += 1
        self.samples += int(batch_folds.size)
        if eval_fold is not None:
            self.violations += int(np.sum(batch_folds == eval_fold))

    def summary(self):
        return {"gradient_batches": self.batches, "gradient_samples": self.samples,
                "test_fold_contributions": self.violations}
