import json
import xml.dom.minidom

import numpy as np
import pytest

from ncct import model as M
from ncct.cli import EXIT_IO, EXIT_USAGE, main, read_config_file, read_pairs_file
from ncct.dataset import DEFAULT_CONFUSION_PAIRS, encode_dataset, generate_toy_split, load_dataset
from ncct.report import read_confusion_csv
from ncct.trainer import TrainConfig, read_metrics_csv, read_sweep_csv

SMALL = ["--epochs", "3", "--warmup", "1", "--conv1", "4", "--conv2", "8", "--batch-size", "32"]


@pytest.fixture
def data(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["gen-data", "--per-class", "10", "--size", "8", "--seed", "1", "-o", "train.ncds"]) == 0
    assert main(["gen-data", "--split", "test", "--per-class", "4", "--size", "8", "--seed", "1", "-o", "test.ncds"]) == 0
    assert main(["inject-noise", "train.ncds", "--rate", "0.4", "-o", "noisy.ncds"]) == 0
    return tmp_path


class TestGenData:
    def test_round_trip(self, tmp_path):
        out = tmp_path / "toy.ncds"
        assert main(["gen-data", "--classes", "7", "--per-class", "500", "--size", "32", "--variation", "0.3",
                     "--seed", "1", "-o", str(out)]) == 0
        d = load_dataset(out)
        assert len(d) == 3500 and d.split == "train"
        assert d == generate_toy_split("train", 7, 500, 32, 0.3, seed=1)
        run = json.loads((tmp_path / "toy.ncds.run.json").read_text())
        assert run["command"] == "gen-data"
        assert set(run["outputs"]) == {str(out), str(out) + ".manifest"}

    def test_missing_out(self, capsys):
        assert main(["gen-data", "--classes", "7"]) == EXIT_USAGE
        assert "-o" in capsys.readouterr().err

    def test_one_class(self, tmp_path, capsys):
        assert main(["gen-data", "--classes", "1", "-o", str(tmp_path / "x.ncds")]) == EXIT_USAGE
        assert "C >= 2" in capsys.readouterr().err

    def test_bad_flag(self, capsys):
        assert main(["gen-data", "--colour", "red", "-o", "x"]) == EXIT_USAGE

    def test_unwritable(self, tmp_path):
        assert main(["gen-data", "--per-class", "2", "--size", "8", "-o", str(tmp_path / "no" / "x.ncds")]) == EXIT_IO


class TestInjectNoise:
    def test_realized_rate_printed(self, tmp_path, capsys):
        clean = tmp_path / "c.ncds"
        main(["gen-data", "--classes", "10", "--per-class", "100", "--size", "8", "-o", str(clean)])
        capsys.readouterr()
        assert main(["inject-noise", str(clean), "--kind", "sym", "--rate", "0.3", "-o", str(tmp_path / "n.ncds")]) == 0
        assert "0.300" in capsys.readouterr().out
        assert load_dataset(tmp_path / "n.ncds").noise_rate() == 0.3

    def test_rate_zero_keeps_payload(self, data):
        before = (data / "train.ncds").read_bytes()
        assert main(["inject-noise", "train.ncds", "--rate", "0", "-o", "same.ncds"]) == 0
        assert (data / "same.ncds").read_bytes() == before
        assert (data / "train.ncds").read_bytes() == before

    def test_asym_default_pairs(self, data):
        assert main(["inject-noise", "train.ncds", "--kind", "asym", "--rate", "0.5", "-o", "a.ncds"]) == 0
        d = load_dataset(data / "a.ncds")
        for i in np.flatnonzero(d.train_labels != d.true_labels):
            assert DEFAULT_CONFUSION_PAIRS[int(d.true_labels[i])] == d.train_labels[i]

    def test_shipped_pairs_match_table(self):
        from ncct.cli import default_pairs_file

        assert read_pairs_file(default_pairs_file()) == DEFAULT_CONFUSION_PAIRS

    def test_custom_pairs(self, data):
        (data / "p.txt").write_text("0,1\n# comment\n\n2,3\n")
        assert main(["inject-noise", "train.ncds", "--kind", "asym", "--rate", "1.0", "--pairs", "p.txt",
                     "-o", "a.ncds"]) == 0
        d = load_dataset(data / "a.ncds")
        assert set(np.flatnonzero(d.train_labels != d.true_labels)) == set(np.flatnonzero(np.isin(d.true_labels, [0, 2])))

    @pytest.mark.parametrize("text", ["0-1\n", "0,1,2\n", "a,b\n", "0,0\n", "0,9\n", ""])
    def test_malformed_pairs(self, data, text, capsys):
        (data / "p.txt").write_text(text)
        code = main(["inject-noise", "train.ncds", "--kind", "asym", "--rate", "0.5", "--pairs", "p.txt", "-o", "a.ncds"])
        assert code == EXIT_USAGE
        assert "p.txt" in capsys.readouterr().err

    def test_rate_out_of_range(self, data):
        assert main(["inject-noise", "train.ncds", "--rate", "1.5", "-o", "a.ncds"]) == EXIT_USAGE

    def test_missing_input(self, tmp_path):
        assert main(["inject-noise", str(tmp_path / "nope.ncds"), "--rate", "0.1", "-o", "a"]) == EXIT_IO

    def test_corrupt_input(self, data):
        raw = bytearray((data / "train.ncds").read_bytes())
        raw[30] ^= 0xFF
        (data / "bad.ncds").write_bytes(bytes(raw))
        assert main(["inject-noise", "bad.ncds", "--rate", "0.1", "-o", "a.ncds"]) == EXIT_IO


class TestTrain:
    def test_rows_and_determinism(self, data):
        args = ["train", "--train", "noisy.ncds", "--test", "test.ncds", "--seed", "1", *SMALL]
        assert main(args + ["-o", "a"]) == 0
        assert main(args + ["-o", "b"]) == 0
        assert len(read_metrics_csv(data / "a" / "metrics.csv")) == 3
        assert (data / "a" / "metrics.csv").read_bytes() == (data / "b" / "metrics.csv").read_bytes()

    def test_manifest(self, data):
        assert main(["train", "--train", "noisy.ncds", "--test", "test.ncds", *SMALL, "-o", "r"]) == 0
        run = json.loads((data / "r" / "run.json").read_text())
        assert run["config"]["epochs"] == 3 and run["config"]["conv2_channels"] == 8
        assert set(run["inputs"]) == {"noisy.ncds", "test.ncds"}
        for path in run["outputs"]:
            assert (data / path).is_file()
        assert run["started"] and run["finished"]

    def test_replay(self, data):
        assert main(["train", "--train", "noisy.ncds", "--test", "test.ncds", *SMALL, "-o", "r"]) == 0
        assert main(["replay", "r/run.json", "-o", "again"]) == 0
        assert (data / "r" / "metrics.csv").read_bytes() == (data / "again" / "metrics.csv").read_bytes()

    def test_pc_only_ncc_untouched(self, data):
        assert main(["train", "--train", "noisy.ncds", "--test", "test.ncds", "--mode", "pc_only", "--seed", "5",
                     *SMALL, "-o", "r"]) == 0
        ck = M.load_checkpoint(data / "r" / "model.ncpt")
        init = M.init_params(M.ArchConfig(7, 4, 8), seed=5, dtype=np.float32)
        assert np.array_equal(ck["ncc.w"], init["ncc.w"])
        assert np.array_equal(ck["ncc.b"], init["ncc.b"])

    def test_config_precedence(self, data):
        (data / "cfg.txt").write_text("# run settings\nepochs = 2\nk = 3\nlr_heads = 0.01\n")
        assert main(["train", "--config", "cfg.txt", "--train", "noisy.ncds", "--test", "test.ncds",
                     "--epochs", "1", "--warmup", "0", "--conv1", "4", "--conv2", "8", "-o", "r"]) == 0
        cfg = json.loads((data / "r" / "run.json").read_text())["config"]
        assert cfg["epochs"] == 1  # flag beats file
        assert cfg["k"] == 3 and cfg["lr_heads"] == 0.01  # file beats default
        assert cfg["batch_size"] == TrainConfig().batch_size  # default

    def test_global_seed_before_command(self, data):
        assert main(["--seed", "7", "train", "--train", "noisy.ncds", "--test", "test.ncds", *SMALL, "-o", "r"]) == 0
        assert json.loads((data / "r" / "run.json").read_text())["config"]["seed"] == 7

    def test_bad_config_key(self, data, capsys):
        (data / "cfg.txt").write_text("epoch = 2\n")
        assert main(["train", "--config", "cfg.txt", "--train", "noisy.ncds", "--test", "test.ncds", "-o", "r"]) == EXIT_USAGE
        assert "epoch" in capsys.readouterr().err

    def test_k_too_large(self, data):
        assert main(["train", "--train", "noisy.ncds", "--test", "test.ncds", "--k", "9", *SMALL, "-o", "r"]) == EXIT_USAGE

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, data):
        code = main(["train", "--train", "noisy.ncds", "--test", "test.ncds", "--optimizer", "sgd",
                     "--lr-backbone", "1e300", "--lr-heads", "1e300", *SMALL, "-o", "r"])
        assert code == 3

    def test_missing_dataset(self, data, capsys):
        assert main(["train", "--train", "nope.ncds", "--test", "test.ncds", "-o", "r"]) == EXIT_IO
        assert "nope.ncds" in capsys.readouterr().err

    def test_checkpoint_every(self, data):
        assert main(["train", "--train", "noisy.ncds", "--test", "test.ncds", *SMALL, "--checkpoint-every", "1",
                     "-o", "r"]) == 0
        assert sorted(p.name for p in (data / "r" / "checkpoints").iterdir()) == [
            "epoch001.ncpt", "epoch002.ncpt", "epoch003.ncpt"]


class TestEvalAndReport:
    @pytest.fixture
    def trained(self, data):
        assert main(["train", "--train", "noisy.ncds", "--test", "test.ncds", *SMALL, "-o", "r"]) == 0
        return data

    def test_eval(self, trained, capsys):
        capsys.readouterr()
        assert main(["eval", "--checkpoint", "r/model.ncpt", "--test", "test.ncds", "-o", "ev"]) == 0
        assert "accuracy:" in capsys.readouterr().out
        assert (trained / "ev" / "confusion.csv").is_file()

    def test_report_consistency(self, trained):
        assert main(["report", "--metrics", "r/metrics.csv", "--checkpoint", "r/model.ncpt", "--test", "test.ncds",
                     "-o", "rep"]) == 0
        cm = read_confusion_csv(trained / "rep" / "confusion.csv")
        last = read_metrics_csv(trained / "r" / "metrics.csv")[-1]
        assert np.trace(cm) / cm.sum() == last["test_acc"]
        xml.dom.minidom.parse(str(trained / "rep" / "accuracy.svg"))
        text = (trained / "rep" / "confusion.txt").read_text()
        assert text.splitlines()[0].split()[1:] == ["surprise", "fear", "disgust", "happy", "sad", "anger", "neutral"]

    def test_perfect_predictor_is_diagonal(self, trained):
        # a constant predictor is perfect on a test set holding only its class
        d = load_dataset(trained / "test.ncds")
        params = M.load_checkpoint(trained / "r" / "model.ncpt")
        params["pcc.w"][:] = 0
        params["pcc.b"][:] = 0
        params["pcc.b"][3] = 10.0
        M.save_checkpoint(params, trained / "const.ncpt")
        only3 = d.subset(np.flatnonzero(d.true_labels == 3))
        (trained / "t3.ncds").write_bytes(encode_dataset(only3))
        assert main(["report", "--checkpoint", "const.ncpt", "--test", "t3.ncds", "--dtype", "float64",
                     "-o", "rep"]) == 0
        cm = read_confusion_csv(trained / "rep" / "confusion.csv")
        assert cm[3, 3] == len(only3) and cm.sum() == cm[3, 3]

    def test_missing_inputs_named(self, trained, capsys):
        assert main(["report", "--metrics", "gone.csv", "--sweep", "gone2.csv", "-o", "rep"]) == EXIT_IO
        err = capsys.readouterr().err
        assert "gone.csv" in err and "gone2.csv" in err

    def test_needs_an_input(self, trained):
        assert main(["report", "-o", "rep"]) == EXIT_USAGE


class TestSweep:
    def test_sweep_outputs(self, data):
        assert main(["sweep-k", "--train", "train.ncds", "--test", "test.ncds", "--noise-rates", "0.1,0.6",
                     "--k-values", "1,4,7", "--modes", "ncct,pc_only", "--epochs", "1", "--warmup", "0",
                     "--conv1", "4", "--conv2", "8", "-o", "sw"]) == 0
        rows = read_sweep_csv(data / "sw" / "sweep.csv")
        assert len(rows) == 2 * 3 + 2
        ncct = {(r.noise_rate, r.k): r.last5_mean for r in rows if r.mode == "ncct"}
        for r in rows:
            if r.mode == "pc_only":
                assert r.k == 4
                assert r.ncct_gap == ncct[(r.noise_rate, 4)] - r.last5_mean
        doc = xml.dom.minidom.parse(str(data / "sw" / "k_sweep.svg"))
        assert len(doc.getElementsByTagName("polyline")) == 4

    def test_bad_k_values(self, data):
        assert main(["sweep-k", "--train", "train.ncds", "--test", "test.ncds", "--k-values", "0,8",
                     "-o", "sw"]) == EXIT_USAGE


def test_config_file_parser(tmp_path):
    (tmp_path / "c").write_text("k = 2\n  mode=pc_only  # trailing\n")
    assert read_config_file(tmp_path / "c") == {"k": "2", "mode": "pc_only"}
    (tmp_path / "c").write_text("just words\n")
    with pytest.raises(Exception):
        read_config_file(tmp_path / "c")


def test_version(capsys):
    assert main(["--version"]) == 0
    assert "ncct" in capsys.readouterr().out
