"""Command-line interface and model-file persistence."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from kplsvm import cli, model_io
from kplsvm.data import load_csv
from kplsvm.errors import DataError
from kplsvm.kernels import KernelSpec
from kplsvm.loss import LossSpec
from kplsvm.modelsel import evaluate
from kplsvm.trainer import TrainParams, train


@pytest.fixture(scope="module")
def monk3_files(tmp_path_factory):
    """monk3 train/test CSVs plus the corpus manifest directory."""
    root = tmp_path_factory.mktemp("monk3")
    corpus = root / "corpus"
    assert cli.main(["make-data", "--outdir", str(corpus),
                     "--include", "monk3"]) == 0
    lines = (corpus / "monk3.csv").read_text(encoding="utf-8").splitlines()
    train_p = root / "monk3_train.csv"
    test_p = root / "monk3_test.csv"
    train_p.write_text("\n".join(lines[:122]) + "\n", encoding="utf-8")
    test_p.write_text("\n".join(lines[122:]) + "\n", encoding="utf-8")
    return {"train": train_p, "test": test_p, "corpus": corpus}


@pytest.fixture()
def trained_model(monk3_files, tmp_path):
    out = tmp_path / "m.model"
    code = cli.main(["train", "--data", str(monk3_files["train"]),
                     "--c0", "0.125", "--taus", "-0.4,1",
                     "--epsilons", "0.5,-3.5", "--out", str(out)])
    assert code == 0
    return out


class TestModelIO:
    def fit_small(self, rbf=False):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(16, 3))
        y = np.where(X[:, 0] + 0.3 * X[:, 1] > 0, 1.0, -1.0)
        kernel = KernelSpec(kind="rbf", q=2.0) if rbf else KernelSpec()
        params = TrainParams(loss=LossSpec(taus=(-0.4, 1.0),
                                           epsilons=(0.5, -3.5)),
                             c0=0.5, kernel=kernel)
        return train(X, y, params), X

    def test_round_trip_bit_identical(self, tmp_path):
        for rbf in (False, True):
            model, X = self.fit_small(rbf)
            p = tmp_path / f"m{rbf}.json"
            model_io.save_model(model, p)
            loaded = model_io.load_model(p)
            assert np.array_equal(model.decision_function(X),
                                  loaded.decision_function(X))
            assert loaded.kernel == model.kernel
            assert loaded.loss == model.loss
            # and a second save of the loaded model is byte-identical
            p2 = tmp_path / f"m{rbf}_again.json"
            model_io.save_model(loaded, p2)
            assert p.read_bytes() == p2.read_bytes()

    def test_unknown_version_rejected(self, tmp_path):
        model, _ = self.fit_small()
        doc = model_io.model_to_dict(model)
        doc["format_version"] = 99
        with pytest.raises(DataError, match="format_version"):
            model_io.model_from_dict(doc)

    def test_structural_validation(self):
        model, _ = self.fit_small()
        good = model_io.model_to_dict(model)
        bad = dict(good)
        bad["beta"] = bad["beta"][:-1]
        with pytest.raises(DataError, match="beta"):
            model_io.model_from_dict(bad)
        bad = dict(good)
        bad["normalizer"] = {"mins": [0.0], "maxs": [1.0]}
        with pytest.raises(DataError, match="normalizer"):
            model_io.model_from_dict(bad)
        bad = dict(good)
        del bad["bias"]
        with pytest.raises(DataError, match="bias"):
            model_io.model_from_dict(bad)

    def test_not_json_is_data_error(self, tmp_path):
        p = tmp_path / "junk.model"
        p.write_bytes(b"\x00\x01 not json")
        with pytest.raises(DataError):
            model_io.load_model(p)

    def test_write_then_rename(self, tmp_path):
        model, _ = self.fit_small()
        p = tmp_path / "m.json"
        model_io.save_model(model, p)
        assert not (tmp_path / "m.json.tmp").exists()
        # a failing write never clobbers an existing good file
        before = p.read_bytes()
        with pytest.raises(OSError):
            model_io.save_model(model, tmp_path / "no_dir" / "m.json")
        assert p.read_bytes() == before

    def test_diagnostics_survive_as_plain_json(self, tmp_path):
        model, _ = self.fit_small()
        p = tmp_path / "m.json"
        model_io.save_model(model, p)
        loaded = model_io.load_model(p)
        d = loaded.diagnostics
        assert d["kkt_max_residual"] == \
            pytest.approx(model.diagnostics["kkt_max_residual"])
        assert isinstance(d["kkt_report"], dict)
        assert json.loads(p.read_text(encoding="utf-8"))["format_version"] == 1


class TestTrainCommand:
    def test_summary_and_test_accuracy(self, monk3_files, tmp_path, capsys):
        out = tmp_path / "m.model"
        code = cli.main(["train", "--data", str(monk3_files["train"]),
                         "--c0", "0.125", "--taus", "-0.4,1",
                         "--epsilons", "0.5,-3.5", "--out", str(out),
                         "--test", str(monk3_files["test"])])
        assert code == 0
        text = capsys.readouterr().out
        assert "training accuracy:" in text
        assert "support vectors:" in text
        assert "kkt max residual:" in text
        assert "wall time:" in text
        assert "class balance: p =" in text
        test_acc = float(text.split("test accuracy:")[1].strip())
        assert abs(test_acc - 88.889) <= 2.0
        assert out.exists()

    def test_empty_loss_rejected(self, monk3_files, tmp_path):
        code = cli.main(["train", "--data", str(monk3_files["train"]),
                         "--c0", "1", "--taus", "", "--epsilons", "",
                         "--out", str(tmp_path / "m.model")])
        assert code == cli.EXIT_SOLVER

    def test_flag_errors(self, monk3_files, tmp_path, capsys):
        base = ["train", "--data", str(monk3_files["train"]), "--c0", "1",
                "--out", str(tmp_path / "m.model")]
        assert cli.main(base + ["--taus", "0,1", "--epsilons", "0"]) \
            == cli.EXIT_USAGE
        assert cli.main(base + ["--taus", "zero", "--epsilons", "0"]) \
            == cli.EXIT_USAGE
        capsys.readouterr()

    def test_missing_data_file(self, tmp_path):
        code = cli.main(["train", "--data", str(tmp_path / "none.csv"),
                         "--c0", "1", "--out", str(tmp_path / "m.model")])
        assert code == cli.EXIT_DATA

    def test_no_balance_flag(self, monk3_files, tmp_path, capsys):
        code = cli.main(["train", "--data", str(monk3_files["train"]),
                         "--c0", "0.125", "--no-balance",
                         "--out", str(tmp_path / "m.model")])
        assert code == 0
        assert "class balance" not in capsys.readouterr().out
        loaded = model_io.load_model(tmp_path / "m.model")
        assert loaded.diagnostics["balanced"] is False


class TestPredictEval:
    def test_predictions_match_library(self, trained_model, monk3_files,
                                       tmp_path, capsys):
        out = tmp_path / "preds.txt"
        assert cli.main(["predict", "--model", str(trained_model),
                         "--data", str(monk3_files["test"]),
                         "--out", str(out)]) == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        model = model_io.load_model(trained_model)
        ds = load_csv(monk3_files["test"])
        assert [int(v) for v in model.predict(ds.X)] == \
            [int(s) for s in lines]
        assert set(lines) <= {"1", "-1"}

    def test_eval_matches_evaluate_exactly(self, trained_model, monk3_files,
                                           capsys):
        assert cli.main(["eval", "--model", str(trained_model),
                         "--data", str(monk3_files["test"])]) == 0
        printed = float(capsys.readouterr().out.strip())
        model = model_io.load_model(trained_model)
        ds = load_csv(monk3_files["test"])
        assert printed == evaluate(model, ds.X, ds.y)

    def test_predict_stdout_and_eval_out_file(self, trained_model,
                                              monk3_files, tmp_path, capsys):
        assert cli.main(["predict", "--model", str(trained_model),
                         "--data", str(monk3_files["test"])]) == 0
        n_lines = len(capsys.readouterr().out.splitlines())
        assert n_lines == 432
        acc_file = tmp_path / "acc.txt"
        assert cli.main(["eval", "--model", str(trained_model),
                         "--data", str(monk3_files["test"]),
                         "--out", str(acc_file)]) == 0
        body = acc_file.read_text(encoding="utf-8")
        assert body.strip() == capsys.readouterr().out.strip()

    def test_dimension_mismatch(self, trained_model, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("1,0.5\n0,0.25\n", encoding="utf-8")
        assert cli.main(["predict", "--model", str(trained_model),
                         "--data", str(bad)]) == cli.EXIT_DATA
        capsys.readouterr()


class TestLossCurve:
    def test_reference_point(self, capsys):
        assert cli.main(["loss-curve", "--taus", "0.4,0",
                         "--epsilons", "0,0", "--range", "-1:1",
                         "--step", "0.5"]) == 0
        rows = capsys.readouterr().out.splitlines()
        assert rows[0] == "u,loss"
        table = {float(r.split(",")[0]): float(r.split(",")[1])
                 for r in rows[1:]}
        assert table[-1.0] == 0.4          # max(-1, 0.4, 0)
        assert table[1.0] == 1.0
        assert table[0.0] == 0.0

    def test_file_output_and_range_validation(self, tmp_path, capsys):
        out = tmp_path / "curve.csv"
        assert cli.main(["loss-curve", "--taus", "0", "--epsilons", "0",
                         "--range", "0:1", "--step", "0.25",
                         "--out", str(out)]) == 0
        assert out.read_text(encoding="utf-8").startswith("u,loss\n")
        assert cli.main(["loss-curve", "--taus", "0", "--epsilons", "0",
                         "--range", "3:1"]) == cli.EXIT_USAGE
        assert cli.main(["loss-curve", "--taus", "0", "--epsilons", "0",
                         "--range", "nope"]) == cli.EXIT_USAGE
        capsys.readouterr()


class TestVerify:
    def test_fresh_model_passes(self, trained_model, monk3_files, capsys):
        assert cli.main(["verify", "--model", str(trained_model),
                         "--data", str(monk3_files["train"])]) == 0
        text = capsys.readouterr().out
        for field in ("stationarity_w", "complementarity_max",
                      "primal_feasibility_max", "max residual"):
            assert field in text
        assert "verification OK" in text

    def test_impossible_tolerance_fails(self, trained_model, monk3_files,
                                        capsys):
        assert cli.main(["verify", "--model", str(trained_model),
                         "--data", str(monk3_files["train"]),
                         "--tol", "1e-300"]) == cli.EXIT_VERIFY
        capsys.readouterr()

    def test_wrong_data_detected(self, trained_model, monk3_files, capsys):
        # verifying against the test half is not the training problem:
        # either a residual or the score drift must trip
        code = cli.main(["verify", "--model", str(trained_model),
                         "--data", str(monk3_files["test"])])
        assert code == cli.EXIT_VERIFY
        capsys.readouterr()


class TestGridSearchCommand:
    def test_holdout_protocol_run(self, monk3_files, tmp_path, capsys):
        records = tmp_path / "cells.csv"
        code = cli.main(["grid-search", "--data",
                         str(monk3_files["corpus"] / "monk3.csv"),
                         "--n-train", "122", "--predefined-split",
                         "--criterion", "holdout",
                         "--c0-grid", "0.125,1", "--tau-grid", "-0.4,0,0.4",
                         "--eps-grid", "0,0.5", "--out", str(records)])
        assert code == 0
        text = capsys.readouterr().out
        assert "stage 1: C0 =" in text
        for family in ("hinge", "pinball", "2pl", "3pl"):
            assert f"{family}: accuracy" in text
        header = records.read_text(encoding="utf-8").splitlines()[0]
        assert header.startswith("dataset,family,accuracy,time_s,c0,q")

    def test_seed_env_override(self, monk3_files, tmp_path, capsys,
                               monkeypatch):
        args = ["grid-search", "--data",
                str(monk3_files["corpus"] / "monk3.csv"),
                "--n-train", "122", "--criterion", "holdout",
                "--c0-grid", "0.125", "--tau-grid", "0",
                "--eps-grid", "0"]
        monkeypatch.setenv("KPLSVM_SEED", "7")
        assert cli.main(args) == 0
        with_seed_7 = capsys.readouterr().out
        monkeypatch.setenv("KPLSVM_SEED", "8")
        assert cli.main(args) == 0
        with_seed_8 = capsys.readouterr().out
        monkeypatch.setenv("KPLSVM_SEED", "7")
        assert cli.main(args) == 0
        assert capsys.readouterr().out == with_seed_7
        assert with_seed_7 != with_seed_8


class TestBenchCommand:
    def test_replay_linear_monk3(self, monk3_files, tmp_path, capsys):
        outdir = tmp_path / "rep"
        code = cli.main(["bench", "--manifest",
                         str(monk3_files["corpus"] / "manifest.csv"),
                         "--outdir", str(outdir),
                         "--replay", "benchmarks/replay_linear.csv",
                         "--no-timing"])
        assert code == 0
        capsys.readouterr()
        rows = [r.split(",") for r in
                (outdir / "consolidated.csv")
                .read_text(encoding="utf-8").splitlines()[1:]]
        acc = {r[1]: float(r[2]) for r in rows
               if r[0] == "monk3" and r[2]}
        assert abs(acc["hinge"] - 82.639) <= 2.0
        assert abs(acc["3pl"] - 88.889) <= 2.0
        assert acc["hinge"] <= acc["pinball"] <= acc["2pl"] <= acc["3pl"]

    def test_search_mode_writes_records(self, monk3_files, tmp_path, capsys):
        outdir = tmp_path / "rep"
        code = cli.main(["bench", "--manifest",
                         str(monk3_files["corpus"] / "manifest.csv"),
                         "--outdir", str(outdir),
                         "--criterion", "holdout",
                         "--c0-grid", "0.125", "--q-grid", "1",
                         "--tau-grid", "0", "--eps-grid", "0",
                         "--no-timing"])
        assert code == 0
        capsys.readouterr()
        assert (outdir / "monk3_records.csv").exists()
        assert (outdir / "consolidated.csv").exists()

    def test_replay_preset_tables_parse(self):
        from kplsvm.modelsel import _load_replay_table
        lin = _load_replay_table("benchmarks/replay_linear.csv")
        rbf = _load_replay_table("benchmarks/replay_rbf.csv")
        assert len(lin) == 19 and all(len(v) == 4 for v in lin.values())
        assert len(rbf) == 8 and all(len(v) == 4 for v in rbf.values())
        fam3 = [row for row in lin["monk1"] if row[0] == "3pl"][0]
        assert fam3[1] == 0.0625
        assert fam3[3] == (1.0, -0.6) and fam3[4] == (1.5, 1.0)


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "kplsvm.cli",
                               "loss-curve", "--taus", "0",
                               "--epsilons", "0", "--range", "0:1",
                               "--step", "1"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert proc.stdout.splitlines()[0] == "u,loss"

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["transmogrify"])
        assert exc.value.code == 2

    def test_fuse_list_flags(self):
        fused = cli._fuse_list_flags(
            ["train", "--taus", "-0.4,1", "--epsilons", "0.5,-3.5",
             "--out", "m", "--range", "-1:1"])
        assert "--taus=-0.4,1" in fused
        assert "--epsilons=0.5,-3.5" in fused
        assert "--range=-1:1" in fused
        assert "--out" in fused and "m" in fused
