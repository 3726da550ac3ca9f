import json

import numpy as np
import pytest

from zoomrnn.cli import DESK_PROFILE, PAPER_PROFILE, _resolve, main, render_table
from zoomrnn.data import DatasetManifest, save_manifest
from zoomrnn.fusion import REGIONS

SMALL_TRAIN = ["--hidden", "4", "--epochs", "3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    assert main(["synth", "--id-count", "4", "--per-id", "8", "--dim", "5", "--seed", "2", "--out", str(out)]) == 0
    return out


class TestBoxes:
    def test_square_head(self, capsys):
        assert main(["boxes", "--head", "200,300,100,100"]) == 0
        assert capsys.readouterr().out.splitlines() == [
            "sample_id,region,l_x,l_y,w,h", "0,upper,150,300,200,400", "0,whole,150,300,200,700"]

    def test_clamped_outside_is_flagged(self, capsys):
        assert main(["boxes", "--head", "-500,10,10,10", "--clamp", "80,80"]) == 0
        captured = capsys.readouterr()
        assert "outside the image" in captured.err
        assert captured.out.splitlines()[1] == "0,upper,0,10,1,1"

    @pytest.mark.parametrize("head", ["1,2,3", "a,b,c,d", "0,0,0,5"])
    def test_bad_head(self, head):
        assert main(["boxes", "--head", head]) == 1


class TestUsage:
    def test_missing_model_file(self, dataset, tmp_path):
        assert main(["eval", "--data", str(dataset), "--model", str(tmp_path / "missing.bin")]) == 1

    def test_unknown_method_lists_valid(self, dataset, tmp_path, capsys):
        assert main(["train", "--data", str(dataset), "--method", "lstm", "--out", str(tmp_path / "m")]) == 1
        assert "zoom" in capsys.readouterr().err

    def test_unknown_bench_method(self, tmp_path, capsys):
        assert main(["bench", "--methods", "zoom,lstm", "--out", str(tmp_path / "r.csv")]) == 1
        err = capsys.readouterr().err
        assert "lstm" in err and "conf-aware" in err

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "bench" in capsys.readouterr().out

    def test_bad_sigmas(self, tmp_path):
        assert main(["synth", "--sigmas", "0.3,0.6", "--out", str(tmp_path / "d")]) == 1


class TestTrainEval:
    def test_round_trip_and_json(self, dataset, tmp_path, capsys):
        model = tmp_path / "m.bin"
        assert main(["train", "--data", str(dataset), "--method", "zoom", *SMALL_TRAIN, "--seed", "3",
                     "--fold", "1", "--out", str(model), "--loss-csv", str(tmp_path / "loss.csv")]) == 0
        assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,loss"
        capsys.readouterr()
        assert main(["eval", "--data", str(dataset), "--model", str(model), "--fold", "0"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("accuracy zoom fold 0: ")
        payload = json.loads(lines[1])
        assert payload["seed"] == 3 and payload["train_fold"] == 1 and payload["n_samples"] == 16
        assert 0.0 <= payload["accuracy"] <= 1.0

    @pytest.mark.parametrize("method", ["reversed", "concat", "avg", "head"])
    def test_training_is_bit_identical(self, dataset, tmp_path, method):
        blobs = []
        for name in ("a.bin", "b.bin"):
            assert main(["train", "--data", str(dataset), "--method", method, *SMALL_TRAIN,
                         "--out", str(tmp_path / name)]) == 0
            blobs.append((tmp_path / name).read_bytes())
        assert blobs[0] == blobs[1]

    def test_corrupt_dataset_is_data_error(self, dataset, tmp_path):
        bad = tmp_path / "bad"
        bad.mkdir()
        for f in dataset.iterdir():
            (bad / f.name).write_bytes(f.read_bytes())
        (bad / "features.bin").write_bytes(b"\0" * 8)
        assert main(["train", "--data", str(bad), "--method", "avg", "--out", str(tmp_path / "m.bin")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_numerical_error(self, tmp_path):
        rng = np.random.default_rng(0)
        feats = {r: 1e308 * rng.choice([-1.0, 1.0], size=(4, 2)) for r in REGIONS}
        save_manifest(DatasetManifest(2, 2, list("abcd"), [0, 0, 1, 1], [0, 1, 0, 1], feats), tmp_path / "d")
        code = main(["train", "--data", str(tmp_path / "d"), "--method", "zoom", *SMALL_TRAIN,
                     "--out", str(tmp_path / "m.bin")])
        assert code == 3


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("seed=0 ")
    assert float(out.splitlines()[-1].split()[-1]) < 1e-6


class TestBench:
    def run(self, dataset, out, extra=()):
        args = ["bench", "--data", str(dataset), "--methods", "avg,zoom,head", "--seeds", "2",
                *SMALL_TRAIN, "--out", str(out), *extra]
        assert main(args) == 0
        return out.read_text()

    def test_outputs(self, dataset, tmp_path, capsys):
        text = self.run(dataset, tmp_path / "r" / "results.csv")
        lines = text.splitlines()
        assert lines[0] == "method,seed,fold01_acc,fold10_acc,mean_acc"
        assert [l.split(",")[:2] for l in lines[1:]] == [
            ["head", "0"], ["head", "1"], ["avg", "0"], ["avg", "1"], ["zoom", "0"], ["zoom", "1"]]
        for line in lines[1:]:
            _, _, a, b, m = line.split(",")
            assert float(m) == (float(a) + float(b)) / 2
        audit = json.loads((tmp_path / "r" / "results.audit.json").read_text())
        assert audit["test_fold_contributions"] == 0 and audit["gradient_batches"] > 0
        assert (tmp_path / "r" / "results.txt").read_text() in capsys.readouterr().out

    def test_repeatable_and_parallel_safe(self, dataset, tmp_path, monkeypatch):
        first = self.run(dataset, tmp_path / "a.csv")
        assert self.run(dataset, tmp_path / "b.csv") == first
        monkeypatch.setenv("ZOOMRNN_THREADS", "2")
        assert self.run(dataset, tmp_path / "c.csv") == first


def test_table_marks_best_and_second():
    rows = [{"method": m, "seed": 0, "fold01_acc": a, "fold10_acc": a, "mean_acc": a}
            for m, a in (("avg", 0.5), ("zoom", 0.9), ("max", 0.7))]
    lines = render_table(rows, ["avg", "max", "zoom"]).splitlines()
    assert lines[2].split()[1:] == ["50.00", "50.00", "50.00"]
    assert lines[3].split()[1:] == ["70.00+", "70.00+", "70.00+"]
    assert lines[4].split()[1:] == ["90.00*", "90.00*", "90.00*"]


def test_profiles():
    assert _resolve(False, hidden=None, lr=None) == {"hidden": DESK_PROFILE["hidden"], "lr": DESK_PROFILE["lr"]}
    assert _resolve(True, hidden=None, epochs=None) == {"hidden": 2048, "epochs": 2000}
    assert _resolve(True, hidden=8) == {"hidden": 8}
    assert PAPER_PROFILE["lr"] == 0.005 and PAPER_PROFILE["momentum"] == 0.9 and PAPER_PROFILE["dropout"] == 0.5
