import json
import os

import numpy as np
import pytest

from maneuverlab.cli import TrainConfig, file_digest, load_config, main


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture
def tiny_data(tmp_path):
    path = tmp_path / "data.csv"
    assert run_cli("synth", "--preset", "four-state", "--length", "400",
                   "--seed", "7", "--out", str(path)) == 0
    return path


class TestLoadConfig:
    def test_defaults_match_published_table(self, tmp_path):
        empty = tmp_path / "empty.cfg"
        empty.write_text("# nothing here\n")
        cfg = load_config(empty)
        assert cfg == TrainConfig(
            window=19, repr_size=16, global_size=2, lr=0.001, batch_size=5, epochs=30,
            pu_weight=0.05, reg_weight=0.8, kl_weight=0.01, adf_threshold=0.01,
            prior_kernels=("rbf", "matern32"), prior_scales=(2.0, 1.0, 0.5, 0.25), seed=0,
        )

    def test_autoencoder_special_case_accepted(self, tmp_path):
        cfg_file = tmp_path / "ae.cfg"
        cfg_file.write_text("B=0\nlambda=0\n")
        cfg = load_config(cfg_file)
        assert cfg.kl_weight == 0.0
        assert cfg.reg_weight == 0.0

    def test_global_larger_than_local_rejected(self, tmp_path):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("m=32\nM=16\n")
        with pytest.raises(ValueError, match="global_size"):
            load_config(cfg_file)

    def test_unknown_key_lists_valid_keys(self, tmp_path):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("momentum=0.9\n")
        with pytest.raises(ValueError, match="valid keys.*window"):
            load_config(cfg_file)

    def test_aliases_from_hyperparameter_table(self, tmp_path):
        cfg_file = tmp_path / "alias.cfg"
        cfg_file.write_text("W_t=25\nw_t=0.1\nkappa=7\nADF=0.05\n")
        cfg = load_config(cfg_file)
        assert cfg.window == 25
        assert cfg.pu_weight == 0.1
        assert cfg.batch_size == 7
        assert cfg.adf_threshold == 0.05

    def test_seed_priority_env_lowest(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MANEUVERLAB_SEED", "11")
        assert load_config().seed == 11
        cfg_file = tmp_path / "seeded.cfg"
        cfg_file.write_text("seed=22\n")
        assert load_config(cfg_file).seed == 22
        assert load_config(cfg_file, {"seed": "33"}).seed == 33
        assert load_config(cfg_file, {"seed": "33"}, seed_flag=44).seed == 44

    def test_flags_override_file(self, tmp_path):
        cfg_file = tmp_path / "cfg"
        cfg_file.write_text("epochs=30\n")
        assert load_config(cfg_file, {"epochs": "3"}).epochs == 3


class TestSynth:
    def test_deterministic_output(self, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        for out in (a, b):
            assert run_cli("synth", "--preset", "four-state", "--length", "400",
                           "--seed", "7", "--out", str(out)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_manifest_written(self, tmp_path):
        out = tmp_path / "data.csv"
        run_cli("synth", "--preset", "four-state", "--length", "400", "--seed", "1",
                "--out", str(out))
        manifest = json.loads((tmp_path / "data.csv.manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 1
        assert str(out) in manifest["outputs"]

    def test_unknown_preset(self, tmp_path, capsys):
        code = run_cli("synth", "--preset", "chaos", "--out", str(tmp_path / "x.csv"))
        assert code == 1
        assert "preset" in capsys.readouterr().err


class TestLabelAndAdf:
    def test_label_attaches_states(self, tiny_data, tmp_path):
        out = tmp_path / "labeled.csv"
        assert run_cli("label", "--data", str(tiny_data), "--out", str(out),
                       "--window", "100") == 0
        text = out.read_text().splitlines()
        assert text[0].endswith("state")

    def test_adf_emits_per_window_rows(self, tiny_data, tmp_path):
        out = tmp_path / "adf.csv"
        assert run_cli("adf", "--data", str(tiny_data), "--window", "100",
                       "--out", str(out)) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "start,feature,statistic,p_value,lags"
        assert len(lines) == 1 + 4 * 2  # 4 windows x 2 features


class TestTraining:
    def test_train_tnc_writes_artifacts(self, tiny_data, tmp_path):
        out_dir = tmp_path / "run"
        assert run_cli("train-tnc", "--data", str(tiny_data), "--out-dir", str(out_dir),
                       "--set", "epochs=2") == 0
        assert (out_dir / "tnc.npz").exists()
        log = (out_dir / "tnc_log.csv").read_text().splitlines()
        assert log[0] == "epoch,train_loss,heldout_loss,disc_accuracy"
        assert len(log) == 3
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 2
        assert str(tiny_data) in manifest["inputs"]

    def test_train_dlg_writes_artifacts(self, tiny_data, tmp_path):
        out_dir = tmp_path / "run"
        assert run_cli("train-dlg", "--data", str(tiny_data), "--out-dir", str(out_dir),
                       "--set", "epochs=2") == 0
        assert (out_dir / "dlg.npz").exists()
        log = (out_dir / "dlg_log.csv").read_text().splitlines()
        assert log[0] == "epoch,train_loss,mse,kl_local,kl_global,l_reg,heldout_mse"

    def test_tampered_input_fails_digest_check(self, tiny_data, tmp_path, capsys):
        out_dir = tmp_path / "run"
        run_cli("train-tnc", "--data", str(tiny_data), "--out-dir", str(out_dir),
                "--set", "epochs=1")
        tiny_data.write_text(tiny_data.read_text().replace("0.", "0.0", 1))
        code = run_cli("train-tnc", "--data", str(tiny_data), "--out-dir", str(out_dir),
                       "--set", "epochs=1")
        assert code == 1
        assert "digest" in capsys.readouterr().err
        assert run_cli("train-tnc", "--data", str(tiny_data), "--out-dir", str(out_dir),
                       "--set", "epochs=1", "--force") == 0


class TestEncodeEvaluateReconstruct:
    @pytest.fixture
    def trained(self, tiny_data, tmp_path):
        labeled = tmp_path / "labeled.csv"
        run_cli("label", "--data", str(tiny_data), "--out", str(labeled), "--window", "100")
        tnc_dir = tmp_path / "tnc_run"
        dlg_dir = tmp_path / "dlg_run"
        assert run_cli("train-tnc", "--data", str(labeled), "--out-dir", str(tnc_dir),
                       "--set", "epochs=2") == 0
        assert run_cli("train-dlg", "--data", str(labeled), "--out-dir", str(dlg_dir),
                       "--set", "epochs=2") == 0
        return labeled, tnc_dir / "tnc.npz", dlg_dir / "dlg.npz"

    def test_encode_csv_headers(self, trained, tmp_path):
        labeled, tnc_ckpt, dlg_ckpt = trained
        out = tmp_path / "reps_tnc.csv"
        assert run_cli("encode", "--checkpoint", str(tnc_ckpt), "--data", str(labeled),
                       "--out", str(out)) == 0
        header = out.read_text().splitlines()[0].split(",")
        assert header[0] == "window_start"
        assert header[1:17] == [f"z_{i}" for i in range(16)]

        out2 = tmp_path / "reps_dlg.csv"
        assert run_cli("encode", "--checkpoint", str(dlg_ckpt), "--data", str(labeled),
                       "--out", str(out2)) == 0
        header2 = out2.read_text().splitlines()[0].split(",")
        assert header2[-2:] == ["zg_0", "zg_1"]

    def test_evaluate_without_checkpoints_fails_with_message(self, trained, tmp_path, capsys):
        labeled, _, _ = trained
        code = run_cli("evaluate", "--data", str(labeled), "--out-dir", str(tmp_path / "eval"))
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err

    def test_evaluate_names_missing_checkpoint(self, trained, tmp_path, capsys):
        labeled, _, _ = trained
        missing = tmp_path / "nope.npz"
        code = run_cli("evaluate", "--data", str(labeled), "--tnc", str(missing),
                       "--out-dir", str(tmp_path / "eval"))
        assert code == 1
        assert "nope.npz" in capsys.readouterr().err

    def test_evaluate_and_report(self, trained, tmp_path, capsys):
        labeled, tnc_ckpt, dlg_ckpt = trained
        out_dir = tmp_path / "eval"
        assert run_cli("evaluate", "--data", str(labeled), "--tnc", str(tnc_ckpt),
                       "--dlg", str(dlg_ckpt), "--out-dir", str(out_dir), "--seed", "0") == 0
        table = capsys.readouterr().out
        assert "tnc" in table and "dlg" in table
        eval_csv = out_dir / "evaluation.csv"
        header = eval_csv.read_text().splitlines()[0]
        assert header == "model,window,auprc,accuracy,silhouette,dbi,r2,loss"
        assert (out_dir / "reconstruction.csv").exists()

        assert run_cli("report", "--eval", str(eval_csv)) == 0
        assert "model" in capsys.readouterr().out

    def test_reconstruct_csv(self, trained, tmp_path):
        labeled, _, dlg_ckpt = trained
        out = tmp_path / "recon.csv"
        assert run_cli("reconstruct", "--checkpoint", str(dlg_ckpt), "--data", str(labeled),
                       "--out", str(out)) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "t,a_lat,a_lon,hat_a_lat,hat_a_lon,sigma_lat,sigma_lon"
        assert len(lines) == 401

    def test_reconstruct_rejects_tnc_checkpoint(self, trained, tmp_path, capsys):
        labeled, tnc_ckpt, _ = trained
        code = run_cli("reconstruct", "--checkpoint", str(tnc_ckpt), "--data", str(labeled),
                       "--out", str(tmp_path / "x.csv"))
        assert code == 1
        assert "dlg" in capsys.readouterr().err


class TestUsageErrors:
    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["synth", "--bogus"])
        assert excinfo.value.code == 2

    def test_unknown_command_exits_2(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["frobnicate"])
        assert excinfo.value.code == 2


class TestPipelineDeterminism:
    def test_rerun_reproduces_all_outputs_bit_identically(self, tmp_path):
        digests = []
        for run in ("one", "two"):
            base = tmp_path / run
            base.mkdir()
            data = base / "data.csv"
            labeled = base / "labeled.csv"
            run_cli("synth", "--preset", "four-state", "--length", "400", "--seed", "5",
                    "--out", str(data))
            run_cli("label", "--data", str(data), "--out", str(labeled), "--window", "100")
            run_cli("train-tnc", "--data", str(labeled), "--out-dir", str(base / "tnc"),
                    "--set", "epochs=2", "--seed", "5")
            run_cli("encode", "--checkpoint", str(base / "tnc" / "tnc.npz"),
                    "--data", str(labeled), "--out", str(base / "reps.csv"))
            digests.append([
                file_digest(data),
                file_digest(labeled),
                file_digest(base / "tnc" / "tnc.npz"),
                file_digest(base / "tnc" / "tnc_log.csv"),
                file_digest(base / "reps.csv"),
            ])
        assert digests[0] == digests[1]
