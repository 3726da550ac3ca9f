"""``zoomrnn`` command line: synth, train, eval, gradcheck, boxes, bench.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from zoomrnn.data import (
    LeakageAudit,
    ProbeSet,
    SynthParams,
    annotate_probabilities,
    fold_views,
    load_manifest,
    save_manifest,
    synth_generate,
    train_region_probes,
)
from zoomrnn.errors import DataError, InputError, NumericalError
from zoomrnn.fusion import ALL_METHODS, REGIONS, accuracy, build_model, load_model, save_model
from zoomrnn.geometry import BBox, boxes_to_csv, clamp_to_image, derive_regions
from zoomrnn.gradcheck import run_gradcheck
from zoomrnn.training import SgdConfig, evaluate_cross_fold, train_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
GRADCHECK_LIMIT = 1e-4
THREADS_ENV = "ZOOMRNN_THREADS"

# desk: summed-gradient minibatches keep the bench within minutes on one core;
# lr and dropout were tuned for this regime on the reference synthetic config
DESK_PROFILE = {"hidden": 64, "epochs": 200, "lr": 0.02, "momentum": 0.9, "dropout": 0.7, "batch_size": 10}
PAPER_PROFILE = {"hidden": 2048, "epochs": 2000, "lr": 0.005, "momentum": 0.9, "dropout": 0.5, "batch_size": 1}

# table rows: single regions and simple fusions first, then the learned fusions
TABLE_ORDER = ("whole", "upper", "head", "avg", "max", "concat", "conf-aware", "prob-rnn", "feat-rnn",
               "embed-rnn", "reversed", "zoom")
RESULT_FIELDS = ("method", "seed", "fold01_acc", "fold10_acc", "mean_acc")


def _floats(text, n, name):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise click.BadParameter(f"expected {n} comma-separated numbers, got {text!r}", param_hint=name) from None
    if len(vals) != n:
        raise click.BadParameter(f"expected {n} comma-separated numbers, got {len(vals)}", param_hint=name)
    return vals


def _methods(text):
    if text == "all":
        return list(TABLE_ORDER)
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in ALL_METHODS]
    if bad or not names:
        raise click.BadParameter(f"unknown method(s) {', '.join(bad) or '(none)'}; valid methods: "
                                 f"all, {', '.join(ALL_METHODS)}", param_hint="--methods")
    return sorted(set(names), key=TABLE_ORDER.index)


def _resolve(paper_scale, **given):
    """Explicit flags win over the selected profile."""
    profile = PAPER_PROFILE if paper_scale else DESK_PROFILE
    return {k: (profile[k] if v is None else v) for k, v in given.items()}


def _factory(method, hp):
    def make(feature_dim, n_classes, seed):
        return build_model(method, feature_dim, n_classes, hidden_dim=hp["hidden"], dropout_p=hp["dropout"],
                           rng=seed)
    return make


def _sgd(hp, seed):
    return SgdConfig(learning_rate=hp["lr"], momentum=hp["momentum"], epochs=hp["epochs"],
                     batch_size=hp["batch_size"] or None, seed=seed)


def _echo_json(obj):
    click.echo(json.dumps(obj, sort_keys=True))


def hyperparameter_options(f):
    for opt in reversed([
        click.option("--hidden", type=click.IntRange(min=1), help="GRU state / hidden layer size."),
        click.option("--lr", type=click.FloatRange(min=0), help="Learning rate."),
        click.option("--momentum", type=click.FloatRange(0, 1, max_open=True), help="Momentum coefficient."),
        click.option("--epochs", type=click.IntRange(min=1), help="Training epochs."),
        click.option("--dropout", type=click.FloatRange(0, 1, max_open=True), help="Dropout probability."),
        click.option("--batch-size", type=click.IntRange(min=0),
                     help="Samples summed per update; 0 means the whole fold."),
        click.option("--paper-scale", is_flag=True,
                     help="Hidden 2048, 2000 epochs, lr 0.005, momentum 0.9, dropout 0.5, per-sample updates."),
    ]):
        f = opt(f)
    return f


@click.group()
def cli():
    """Multi-region fusion of per-part features and probabilities."""


@cli.command()
@click.option("--id-count", default=20, show_default=True, type=click.IntRange(min=1))
@click.option("--per-id", default=40, show_default=True, type=click.IntRange(min=2))
@click.option("--dim", default=32, show_default=True, type=click.IntRange(min=1))
@click.option("--sigmas", default="0.3,0.6,1.0", show_default=True, help="Noise scales head,upper,whole.")
@click.option("--occlusion", default=0.25, show_default=True, type=click.FloatRange(0, 1))
@click.option("--prototype-norm", default=SynthParams.prototype_norm, show_default=True,
              type=click.FloatRange(min=0))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def synth(id_count, per_id, dim, sigmas, occlusion, prototype_norm, seed, out):
    """Write a synthetic per-region feature dataset."""
    s_h, s_u, s_w = _floats(sigmas, 3, "--sigmas")
    params = SynthParams(n_classes=id_count, samples_per_identity=per_id, feature_dim=dim, sigma_head=s_h,
                         sigma_upper=s_u, sigma_whole=s_w, occlusion_rate=occlusion, seed=seed,
                         prototype_norm=prototype_norm)
    manifest = synth_generate(params)
    save_manifest(manifest, out)
    click.echo(f"wrote {len(manifest)} samples ({id_count} identities, seed {seed}) to {out}")


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--method", required=True, type=click.Choice(ALL_METHODS))
@hyperparameter_options
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--fold", default=0, show_default=True, type=click.IntRange(0, 1), help="Training fold.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--loss-csv", type=click.Path(dir_okay=False), help="Also write the loss curve here.")
def train(data, method, hidden, lr, momentum, epochs, dropout, batch_size, paper_scale, seed, fold, out,
          loss_csv):
    """Fit one fusion model on one fold and save it.

    Datasets without probability vectors get region probes fit on the
    training fold; the probes are stored in the model file.
    """
    hp = _resolve(paper_scale, hidden=hidden, lr=lr, momentum=momentum, epochs=epochs, dropout=dropout,
                  batch_size=batch_size)
    manifest = load_manifest(data)
    extra = {"meta.train_fold": np.array([float(fold)]), "meta.seed": np.array([float(seed)])}
    if not manifest.has_probabilities:
        probes = train_region_probes(manifest, fold)
        manifest = annotate_probabilities(manifest, probes)
        extra.update(probes.arrays())
    model = _factory(method, hp)(manifest.feature_dim, manifest.n_classes, seed)
    line = f"method={method} seed={seed} train_fold={fold}"
    if model.trainable:
        report = train_model(model, manifest.fold_data(fold), _sgd(hp, seed))
        line += f" final_loss={report.loss_curve[-1]:.6f}"
        if loss_csv:
            Path(loss_csv).write_text(report.loss_csv())
    train_acc = accuracy(model.predict(manifest.fold_data(fold).inputs), manifest.fold_data(fold).labels)
    save_model(out, model, extra)
    click.echo(f"{line} train_acc={train_acc:.4f} -> {out}")


@cli.command("eval")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--fold", default=1, show_default=True, type=click.IntRange(0, 1), help="Fold to score.")
def eval_(data, model_path, fold):
    """Score a saved model on one fold: an accuracy line, then JSON."""
    manifest = load_manifest(data)
    model, extra = load_model(model_path)
    if not manifest.has_probabilities:
        if f"probe.{REGIONS[0]}.W" not in extra:
            raise DataError("dataset has no probability vectors and the model file carries no region probes")
        manifest = annotate_probabilities(manifest, ProbeSet.from_arrays(extra))
    if manifest.feature_dim != model.feature_dim or manifest.n_classes != model.n_classes:
        raise DataError(f"model expects feature_dim={model.feature_dim}, n_classes={model.n_classes}; dataset has "
                        f"{manifest.feature_dim}, {manifest.n_classes}")
    test = manifest.fold_data(fold)
    acc = accuracy(model.predict(test.inputs), test.labels)
    meta = {k.split(".", 1)[1]: int(v[0]) for k, v in extra.items() if k.startswith("meta.")}
    click.echo(f"accuracy {model.method} fold {fold}: {acc:.4f}")
    _echo_json({"accuracy": acc, "fold": fold, "method": model.method, "n_samples": len(test.labels),
                "seed": meta.get("seed"), "train_fold": meta.get("train_fold")})


@cli.command()
@click.option("--dims", default="small", show_default=True, type=click.Choice(["small", "random"]))
@click.option("--seed", default=0, show_default=True, type=int)
def gradcheck(dims, seed):
    """Compare every backward pass with central finite differences."""
    shape, results = run_gradcheck(dims, seed)
    click.echo(f"seed={seed} feature_dim={shape['feature_dim']} n_classes={shape['n_classes']} "
               f"hidden_dim={shape['hidden_dim']}")
    worst = 0.0
    for method, errs in results.items():
        for name, err in errs.items():
            click.echo(f"{method:10s} {name:12s} {err:.3e}")
            worst = max(worst, err)
    click.echo(f"max relative error {worst:.3e}")
    if worst > GRADCHECK_LIMIT:
        raise NumericalError(f"gradient check failed: {worst:.3e} > {GRADCHECK_LIMIT:g}")


@cli.command()
@click.option("--head", required=True, help="Head box l_x,l_y,w,h.")
@click.option("--clamp", help="Clip to an image of size width,height.")
@click.option("--sample-id", default="0", show_default=True)
def boxes(head, clamp, sample_id):
    """Derive upper-body and whole-body boxes from a head box, as CSV."""
    try:
        box = BBox(*_floats(head, 4, "--head"))
    except InputError as exc:
        raise click.BadParameter(str(exc), param_hint="--head") from None
    upper, whole = derive_regions(box)
    if clamp:
        img_w, img_h = _floats(clamp, 2, "--clamp")
        if img_w <= 0 or img_h <= 0:
            raise click.BadParameter("image size must be positive", param_hint="--clamp")
        upper, whole = clamp_to_image(upper, img_w, img_h), clamp_to_image(whole, img_w, img_h)
        for name, b in (("upper", upper), ("whole", whole)):
            if b.flagged:
                click.echo(f"warning: {name} box lies outside the image", err=True)
    click.echo(boxes_to_csv([(sample_id, "upper", upper), (sample_id, "whole", whole)]), nl=False)


def _bench_cell(args):
    method, seed, manifest, views, hp = args
    audit = LeakageAudit()
    res = evaluate_cross_fold(_factory(method, hp), manifest, _sgd(hp, seed), views=views, audit=audit)
    return method, seed, res.fold01_acc, res.fold10_acc, res.mean_acc, audit.summary()


def render_table(rows, methods):
    """Median accuracy per method; ``*`` marks the best and ``+`` the second best per column."""
    cols = ("fold01_acc", "fold10_acc", "mean_acc")
    med = {m: {c: float(np.median([r[c] for r in rows if r["method"] == m])) for c in cols} for m in methods}
    marks = {}
    for c in cols:
        ranked = sorted({med[m][c] for m in methods}, reverse=True)
        for m in methods:
            v = med[m][c]
            marks[m, c] = "*" if v == ranked[0] else ("+" if len(ranked) > 1 and v == ranked[1] else " ")
    width = max(len(m) for m in methods)
    lines = [f"{'method':<{width}}  {'fold 0->1':>10}  {'fold 1->0':>10}  {'mean':>10}"]
    lines.append("-" * len(lines[0]))
    for m in methods:
        cells = "  ".join(f"{100 * med[m][c]:9.2f}{marks[m, c]}" for c in cols)
        lines.append(f"{m:<{width}}  {cells}")
    lines.append("median over seeds, accuracy in %; * best, + second best")
    return "\n".join(lines) + "\n"


def results_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in RESULT_FIELDS})
    return buf.getvalue()


@cli.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False),
              help="Dataset directory; by default each seed gets its own reference synthetic dataset.")
@click.option("--methods", default="all", show_default=True, help="'all' or a comma-separated list.")
@click.option("--seeds", default=5, show_default=True, type=click.IntRange(min=1), help="Seeds 0..N-1.")
@hyperparameter_options
@click.option("--threads", type=click.IntRange(min=1), help=f"Worker processes (default: ${THREADS_ENV} or 1).")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="results.csv path.")
def bench(data, methods, seeds, hidden, lr, momentum, epochs, dropout, batch_size, paper_scale, threads, out):
    """Cross-fold accuracy of every method over several seeds.

    Writes the per-seed CSV to OUT, the median table next to it (.txt) and
    the leakage audit as JSON (.audit.json).
    """
    methods = _methods(methods)
    hp = _resolve(paper_scale, hidden=hidden, lr=lr, momentum=momentum, epochs=epochs, dropout=dropout,
                  batch_size=batch_size)
    if threads is None:
        try:
            threads = max(1, int(os.environ.get(THREADS_ENV, "1")))
        except ValueError:
            raise click.BadParameter(f"${THREADS_ENV} must be an integer", param_hint="--threads") from None
    shared = load_manifest(data) if data else None
    audit = LeakageAudit()
    cells = []
    for seed in range(seeds):
        manifest = shared if shared is not None else synth_generate(SynthParams(seed=seed))
        views = fold_views(manifest, audit=audit)
        cells += [(m, seed, manifest, views, hp) for m in methods]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_bench_cell, cells))
    else:
        outcomes = [_bench_cell(c) for c in cells]
    rows = []
    for method, seed, a01, a10, mean, summary in outcomes:
        rows.append({"method": method, "seed": seed, "fold01_acc": a01, "fold10_acc": a10, "mean_acc": mean})
        audit.batches += summary["gradient_batches"]
        audit.samples += summary["gradient_samples"]
        audit.violations += summary["test_fold_contributions"]
    rows.sort(key=lambda r: (TABLE_ORDER.index(r["method"]), r["seed"]))
    table = render_table(rows, methods)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(results_csv(rows))
    out.with_suffix(".txt").write_text(table)
    summary = dict(audit.summary(), seeds=list(range(seeds)), hyperparameters=hp)
    out.with_suffix(".audit.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    click.echo(table, nl=False)
    click.echo(f"leakage audit: {audit.summary()['test_fold_contributions']} test-fold gradient contributions "
               f"over {audit.summary()['gradient_batches']} batches")


def main(argv=None):
    try:
        rv = cli.main(args=argv, prog_name="zoomrnn", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except NumericalError as exc:
        click.echo(f"numerical error: {exc}", err=True)
        return EXIT_NUMERICAL
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except InputError as exc:
        click.echo(f"usage error: {exc}", err=True)
        return EXIT_USAGE
    except OSError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
