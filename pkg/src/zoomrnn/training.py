"""SGD with momentum, the epoch loop, and the two-fold evaluation protocol."""

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from zoomrnn.errors import InputError, NumericalError, ProtocolError
from zoomrnn.fusion import accuracy
from zoomrnn.numkit import one_hot

PAPER_LR = 0.005
PAPER_MOMENTUM = 0.9
PAPER_EPOCHS = 2000


@dataclass
class SgdConfig:
    """Optimizer and loop settings.

    ``batch_size`` samples contribute to each update and their gradients are
    summed, so ``batch_size=1`` is plain per-sample SGD. ``None`` accumulates
    the whole training fold into one update per epoch.
    """

    learning_rate: float = PAPER_LR
    momentum: float = PAPER_MOMENTUM
    epochs: int = PAPER_EPOCHS
    batch_size: int | None = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InputError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise InputError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise InputError("epochs must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise InputError("batch_size must be positive or None")


@dataclass
class TrainReport:
    loss_curve: list
    seed: int
    config: dict
    fold: int | None = None
    fold_accuracies: dict = field(default_factory=dict)
    gradient_batches: int = 0
    wall_clock: float = field(default=0.0, compare=False)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def loss_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(self.loss_curve, start=1):
            writer.writerow([epoch, repr(loss)])
        return buf.getvalue()


def sgd_momentum_step(params, grads, velocity, cfg):
    """``v' = momentum * v + g`` and ``theta' = theta - lr * v'`` for every named array.

    Returns new ``(params, velocity)`` dicts; the inputs are left untouched.
    A missing velocity entry counts as zero.
    """
    new_params, new_velocity = {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            raise InputError(f"sgd_momentum_step: no gradient for {name!r}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        if not (np.shape(theta) == np.shape(g) == np.shape(v)):
            raise InputError(f"sgd_momentum_step: shape mismatch for {name!r}")
        v_new = cfg.momentum * v + g
        new_velocity[name] = v_new
        new_params[name] = theta - cfg.learning_rate * v_new
    return new_params, new_velocity


def _subset(inputs, idx):
    if isinstance(inputs, np.ndarray):
        return inputs[idx]
    return inputs.take(idx)


def train_model(model, data, cfg, audit=None, eval_fold=None):
    """Train ``model`` in place on ``data`` and return a :class:`TrainReport`.

    ``data`` needs ``inputs`` (what ``model.forward`` consumes), ``labels``,
    ``sample_folds`` and ``fold``. Every gradient batch is reported to
    ``audit`` together with the fold that will be used for evaluation.
    """
    start = time.perf_counter()
    labels = np.asarray(data.labels)
    n = len(labels)
    if n == 0:
        raise InputError("train_model: empty training fold")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise InputError("train_model: labels outside the model's class range")
    if eval_fold is None and data.fold is not None:
        eval_fold = 1 - data.fold
    Y = one_hot(labels, model.n_classes)
    sample_folds = np.asarray(data.sample_folds)
    batch = n if cfg.batch_size is None else cfg.batch_size

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    velocity = {}
    curve = []
    n_batches = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            idx = perm[lo:lo + batch]
            if audit is not None:
                audit.record(sample_folds[idx], eval_fold)
            probs, cache = model.forward(_subset(data.inputs, idx), train=True, rng=dropout_rng)
            probs = np.atleast_2d(probs)
            y = Y[idx]
            total += -(y * np.log(np.maximum(probs, 1e-12))).sum() / model.n_classes
            grads = model.backward(cache, y)
            if not model.params:
                continue
            model.params, velocity = sgd_momentum_step(model.params, grads, velocity, cfg)
            n_batches += 1
        loss = total / n
        if not np.isfinite(loss):
            raise NumericalError(f"training diverged at epoch {epoch} (loss={loss})", epoch=epoch)
        curve.append(float(loss))
    return TrainReport(
        loss_curve=curve,
        seed=cfg.seed,
        config=asdict(cfg),
        fold=data.fold,
        gradient_batches=n_batches,
        wall_clock=time.perf_counter() - start,
    )


@dataclass
class CrossFoldResult:
    fold01_acc: float
    fold10_acc: float
    reports: list = field(default_factory=list, compare=False)

    @property
    def mean_acc(self):
        return (self.fold01_acc + self.fold10_acc) / 2.0


def evaluate_cross_fold(model_factory, dataset, cfg, views=None, probe_cfg=None, audit=None):
    """Train on fold 0 / test on fold 1, then the reverse, and average.

    ``model_factory(feature_dim, n_classes, seed)`` builds a fresh model.
    ``views`` maps a training fold to a dataset whose probability vectors were
    produced by probes fit on that fold; when omitted they are built here
    (or the dataset's own probabilities are used if it has them).
    """
    from zoomrnn.data import fold_views

    check_fold_protocol(dataset)
    if views is None:
        views = fold_views(dataset, probe_cfg, audit=audit)
    accs = []
    reports = []
    for train_fold in (0, 1):
        view = views[train_fold]
        train = view.fold_data(train_fold)
        test = view.fold_data(1 - train_fold)
        model = model_factory(dataset.feature_dim, dataset.n_classes, cfg.seed)
        if model.trainable:
            reports.append(train_model(model, train, cfg, audit=audit, eval_fold=1 - train_fold))
        accs.append(accuracy(model.predict(test.inputs), test.labels))
    return CrossFoldResult(accs[0], accs[1], reports)


def check_fold_protocol(dataset):
    labels = np.asarray(dataset.labels)
    folds = np.asarray(dataset.folds)
    for identity in range(dataset.n_classes):
        present = set(folds[labels == identity].tolist())
        if present != {0, 1}:
            raise ProtocolError(f"identity {identity} does not appear in both folds (folds: {sorted(present)})")
