import os
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from spmagic.cli import build_parser, main
from spmagic.config import RunConfig, build_config, read_config_file
from spmagic.data import load_dataset, preprocess, read_expression
from spmagic.model import decoder_forward, encoder_forward, load_checkpoint
from spmagic.attention import spatial_features, fuse
from spmagic.evaluation import kmeans_cluster
from spmagic.seeding import stage_rng

FAST = ["--epochs", "2", "--decoder-hidden", "32", "--embed-dim", "8", "--pca-dims", "10"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("simulate", "--n-spots", 200, "--n-genes", 50, "--separation", 1.5, "--dropout", 0.3, "--out", out) == 0
    return out


def sub_parsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.choices and "impute" in a.choices)
    return action.choices


class TestHelp:
    @pytest.mark.parametrize("command", ["impute", "simulate", "evaluate", "benchmark"])
    def test_lists_every_key_with_default(self, command):
        text = " ".join(sub_parsers()[command].format_help().split())
        defaults = RunConfig()
        for key in RunConfig.field_types():
            assert "--" + key.replace("_", "-") in text
            assert f"(default: {getattr(defaults, key)})" in text

    def test_top_level_help(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("--help")
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for command in ("impute", "simulate", "evaluate", "benchmark"):
            assert command in out


class TestConfig:
    def test_file_parsing(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nepochs = 7\nknn-k=4  # inline\ndeterministic = yes\n\n")
        assert read_config_file(path) == {"epochs": 7, "knn_k": 4, "deterministic": True}

    def test_precedence(self):
        cfg = build_config({"epochs": 7, "seed": 3}, {"epochs": 9, "seed": None})
        assert (cfg.epochs, cfg.seed, cfg.knn_k) == (9, 3, 5)

    def test_flag_beats_file(self, tmp_path, sim_dir):
        path = tmp_path / "run.cfg"
        path.write_text("epochs = 3\n")
        out = tmp_path / "o"
        argv = ["impute", "--expr", sim_dir / "expression.csv", "--coords", sim_dir / "coords.csv", "--out", out,
                "--config", path, *FAST]
        assert run(*argv) == 0  # FAST sets --epochs 2
        assert len(pd.read_csv(out / "loss.csv")) == 2
        argv = [a for a in argv if a not in ("--epochs", "2")]
        assert run(*argv) == 0
        assert len(pd.read_csv(out / "loss.csv")) == 3

    @pytest.mark.parametrize(
        "flags, key",
        [(["--knn-k", "0"], "knn_k"), (["--mask-rate", "1.5"], "mask_rate"), (["--heads", "3"], "heads"),
         (["--knn-max", "2"], "knn_max")],
    )
    def test_invalid_value_rejected_before_outputs(self, flags, key, sim_dir, tmp_path, capsys):
        out = tmp_path / "never"
        code = run("impute", "--expr", sim_dir / "expression.csv", "--coords", sim_dir / "coords.csv", "--out", out, *flags)
        assert code == 2
        assert key in capsys.readouterr().err
        assert not out.exists()

    def test_unknown_file_key(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("learning_rat = 0.1\n")
        assert run("simulate", "--config", path, "--out", tmp_path / "x") == 2
        assert "learning_rat" in capsys.readouterr().err

    def test_unparsable_file_value(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochs = many\n")
        assert run("simulate", "--config", path, "--out", tmp_path / "x") == 2


@pytest.fixture(scope="module")
def outputs(sim_dir, tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    for out in (a, b):
        assert run("impute", "--expr", sim_dir / "expression.csv", "--coords", sim_dir / "coords.csv",
                   "--out", out, "--deterministic", *FAST) == 0
    return a, b


class TestImpute:
    def test_shape_and_sign(self, outputs, sim_dir):
        df = pd.read_csv(outputs[0] / "imputed.csv", index_col=0)
        assert df.shape == (200, 50)
        assert (df.values >= 0).all()
        coords = pd.read_csv(sim_dir / "coords.csv")
        assert list(df.index) == list(coords.iloc[:, 0])

    def test_deterministic(self, outputs):
        a, b = outputs
        for name in ("imputed.csv", "model.ckpt", "loss.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_prints_timings(self, sim_dir, tmp_path, capsys):
        run("impute", "--expr", sim_dir / "expression.csv", "--coords", sim_dir / "coords.csv", "--out", tmp_path, *FAST)
        out = capsys.readouterr().out
        for stage in ("preprocess", "diffusion", "train", "infer"):
            assert stage in out

    def test_degenerate_config(self, sim_dir, tmp_path):
        assert run("impute", "--expr", sim_dir / "expression.csv", "--coords", sim_dir / "coords.csv", "--out", tmp_path,
                   "--diffusion-t", 0, "--epochs", 0, "--decoder-hidden", 32, "--embed-dim", 8) == 0
        ds = load_dataset(sim_dir / "expression.csv", sim_dir / "coords.csv")
        X_d = preprocess(ds.expression, 3000).matrix.dense().astype(np.float32)
        ck = load_checkpoint(tmp_path / "model.ckpt")
        assert ck.loss_history == []
        H = spatial_features(ck.standardized_coords(ds.coords).astype(np.float32), ck.attention)
        expected = decoder_forward(encoder_forward(fuse(X_d, H), ck.autoencoder), ck.autoencoder)
        got = pd.read_csv(tmp_path / "imputed.csv", index_col=0).values
        np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-7)

    def test_binary_and_operator_dump(self, sim_dir, tmp_path):
        op_path = tmp_path / "P.mtx"
        assert run("impute", "--expr", sim_dir / "expression.csv", "--coords", sim_dir / "coords.csv", "--out", tmp_path,
                   "--binary", "--dump-operator", op_path, *FAST) == 0
        with np.load(tmp_path / "imputed.npz") as z:
            assert z["values"].shape == (200, 50)
        from scipy.io import mmread
        P = mmread(op_path).tocsr()
        np.testing.assert_allclose(np.asarray(P.sum(1)).ravel(), 1.0, atol=1e-9)

    def test_matrix_market_input(self, tmp_path):
        sim = tmp_path / "mm"
        assert run("simulate", "--n-spots", 60, "--n-genes", 20, "--format", "matrix-market", "--out", sim) == 0
        assert run("impute", "--expr", sim / "matrix.mtx", "--coords", sim / "coords.csv", "--out", tmp_path / "o", *FAST) == 0
        assert pd.read_csv(tmp_path / "o" / "imputed.csv", index_col=0).shape == (60, 20)

    def test_missing_input(self, tmp_path, capsys):
        assert run("impute", "--expr", tmp_path / "nope.csv", "--coords", tmp_path / "c.csv", "--out", tmp_path / "o") == 1
        assert "load" in capsys.readouterr().err

    def test_misaligned_coords(self, sim_dir, tmp_path, capsys):
        coords = pd.read_csv(sim_dir / "coords.csv").iloc[:-1]
        coords.to_csv(tmp_path / "c.csv", index=False)
        assert run("impute", "--expr", sim_dir / "expression.csv", "--coords", tmp_path / "c.csv", "--out", tmp_path / "o") == 1
        assert "spot" in capsys.readouterr().err


class TestSimulate:
    def test_round_trip(self, sim_dir):
        ds = load_dataset(sim_dir / "expression.csv", sim_dir / "coords.csv", sim_dir / "labels.csv")
        assert ds.expression.shape == (200, 50)
        assert ds.labels is not None and set(np.unique(ds.labels)) == {0, 1, 2}

    def test_dropout(self, tmp_path):
        assert run("simulate", "--n-spots", 300, "--n-genes", 100, "--dropout", 0.8, "--out", tmp_path) == 0
        X = read_expression(tmp_path / "expression.csv", "csv").dense()
        # Poisson zeros add a little on top of the dropout rate
        p = 0.8
        sd = np.sqrt(p * (1 - p) / X.size)
        frac = (X == 0).mean()
        assert p - 3 * sd <= frac <= p + 0.1

    def test_seed_flag(self, tmp_path):
        run("simulate", "--n-spots", 30, "--n-genes", 5, "--seed", 1, "--out", tmp_path / "a")
        run("simulate", "--n-spots", 30, "--n-genes", 5, "--seed", 1, "--out", tmp_path / "b")
        run("simulate", "--n-spots", 30, "--n-genes", 5, "--seed", 2, "--out", tmp_path / "c")
        a, b, c = ((tmp_path / d / "expression.csv").read_bytes() for d in "abc")
        assert a == b and a != c

    def test_invalid_spec(self, tmp_path):
        assert run("simulate", "--dropout", 1.0, "--out", tmp_path) == 2


class TestEvaluate:
    def test_own_kmeans_labels(self, sim_dir, tmp_path, capsys):
        X = read_expression(sim_dir / "expression.csv", "csv")
        pred = kmeans_cluster(X, 3, stage_rng(0, "kmeans").integers(2**63))
        pd.DataFrame({"spot_id": X.spot_ids, "label": pred.labels}).to_csv(tmp_path / "l.csv", index=False)
        capsys.readouterr()
        assert run("evaluate", "--imputed", sim_dir / "expression.csv", "--labels", tmp_path / "l.csv") == 0
        assert capsys.readouterr().out.strip() == "ari=1.000000"

    def test_separable_no_dropout(self, tmp_path, capsys):
        run("simulate", "--n-spots", 150, "--n-genes", 40, "--separation", 3, "--dropout", 0, "--out", tmp_path)
        run("impute", "--expr", tmp_path / "expression.csv", "--coords", tmp_path / "coords.csv", "--out", tmp_path,
            "--diffusion-t", 0, *FAST)
        capsys.readouterr()
        assert run("evaluate", "--imputed", tmp_path / "imputed.csv", "--labels", tmp_path / "labels.csv") == 0
        assert capsys.readouterr().out.strip() == "ari=1.000000"

    def test_shuffled_labels(self, sim_dir, tmp_path, capsys):
        labels = pd.read_csv(sim_dir / "labels.csv")
        labels.iloc[:, 1] = np.random.default_rng(0).permutation(labels.iloc[:, 1].values)
        labels.to_csv(tmp_path / "l.csv", index=False)
        capsys.readouterr()
        assert run("evaluate", "--imputed", sim_dir / "expression.csv", "--labels", tmp_path / "l.csv") == 0
        ari = float(capsys.readouterr().out.strip().split("=")[1])
        assert abs(ari) < 0.05

    def test_binary_input(self, sim_dir, tmp_path, capsys):
        run("impute", "--expr", sim_dir / "expression.csv", "--coords", sim_dir / "coords.csv", "--out", tmp_path,
            "--binary", *FAST)
        capsys.readouterr()
        assert run("evaluate", "--imputed", tmp_path / "imputed.npz", "--labels", sim_dir / "labels.csv") == 0
        assert capsys.readouterr().out.startswith("ari=")

    def test_missing_labels(self, sim_dir, tmp_path):
        pd.DataFrame({"spot_id": ["spot_00000"], "label": [0]}).to_csv(tmp_path / "l.csv", index=False)
        assert run("evaluate", "--imputed", sim_dir / "expression.csv", "--labels", tmp_path / "l.csv") == 1

    def test_bad_k(self, sim_dir):
        assert run("evaluate", "--imputed", sim_dir / "expression.csv", "--labels", sim_dir / "labels.csv", "--k", 0) == 2


class TestBenchmark:
    def test_raw_only(self, tmp_path, capsys):
        assert run("benchmark", "--n-spots", 90, "--n-genes", 30, "--strategies", "raw", "--seeds", "0", "--out", tmp_path) == 0
        lines = (tmp_path / "benchmark.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith("raw,0,")
        assert "| raw |" in capsys.readouterr().out

    def test_cardinality(self, sim_dir, tmp_path):
        assert run("benchmark", "--expr", sim_dir / "expression.csv", "--coords", sim_dir / "coords.csv",
                   "--labels", sim_dir / "labels.csv", "--seeds", "0,1", "--out", tmp_path, *FAST) == 0
        df = pd.read_csv(tmp_path / "benchmark.csv")
        assert len(df) == 8
        assert df.groupby("strategy").size().to_dict() == {
            "attention-pca-fusion": 2, "diffusion-only": 2, "full-hybrid": 2, "raw": 2}

    def test_unknown_strategy(self, tmp_path):
        assert run("benchmark", "--strategies", "raw,umap", "--out", tmp_path) == 2

    def test_expr_needs_labels(self, sim_dir, tmp_path):
        assert run("benchmark", "--expr", sim_dir / "expression.csv", "--coords", sim_dir / "coords.csv", "--out", tmp_path) == 2


def test_console_entry_point_with_thread_env(tmp_path):
    env = {**os.environ, "SPMAGIC_THREADS": "1"}
    proc = subprocess.run([sys.executable, "-m", "spmagic", "simulate", "--n-spots", "20", "--n-genes", "5", "--out", str(tmp_path)],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "labels.csv").exists()
    bad = subprocess.run([sys.executable, "-m", "spmagic", "simulate", "--out", str(tmp_path), "--epochs", "-1"],
                         capture_output=True, text=True)
    assert bad.returncode == 2 and "epochs" in bad.stderr
