import json

import numpy as np
import pytest

from tmkt import cli, data, mixing


def run_cli(capsys, *argv):
    code = cli.cli_dispatch(list(argv))
    captured = capsys.readouterr()
    return code, json.loads(captured.out) if captured.out.strip() else None


def run_cli_err(capsys, *argv):
    code = cli.cli_dispatch(list(argv))
    return code, capsys.readouterr().err


class TestSolveP:
    def test_json_output(self, capsys):
        code, payload = run_cli(capsys, "solve-p", "--timesteps", "10", "--ratio", "0.4")
        assert code == 0
        assert payload["p"] == pytest.approx(mixing.solve_p(10, 0.4))
        assert payload["achieved_expectation"] == pytest.approx(4.0, abs=1e-9)

    def test_infeasible_conditional_exits_config(self, capsys):
        code, err = run_cli_err(capsys, "solve-p", "--timesteps", "10",
                                "--ratio", "0.4", "--mode", "conditional")
        assert code == 3
        assert "0.55" in err

    def test_bad_ratio_exits_config(self, capsys):
        code, _ = run_cli(capsys, "solve-p", "--timesteps", "10", "--ratio", "1.5")
        assert code == 3


class TestUsageErrors:
    def test_unknown_flag_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.cli_dispatch(["solve-p", "--timesteps", "10", "--ratio", "0.4",
                              "--frobnicate"])
        assert exc.value.code == 2

    def test_unknown_subcommand_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.cli_dispatch(["transmogrify"])
        assert exc.value.code == 2


class TestSampleTstar:
    def test_histogram_sums_to_draws(self, capsys):
        code, payload = run_cli(capsys, "sample-tstar", "--timesteps", "6",
                                "--ratio", "0.5", "--draws", "2000", "--seed", "1")
        assert code == 0
        assert sum(payload["histogram"].values()) == 2000
        assert abs(payload["mean_replaced"] - payload["target_replaced"]) < 0.3


class TestGenDataAndMix:
    def test_gen_then_mix(self, capsys, tmp_path):
        out = tmp_path / "ds"
        code, payload = run_cli(capsys, "gen-data", "--out", str(out),
                                "--classes", "2", "--per-class", "1",
                                "--size", "16", "--timesteps", "4")
        assert code == 0
        assert payload["samples"] == 2

        mixed_path = tmp_path / "mixed.seq"
        code, payload = run_cli(capsys, "mix",
                                "--static", str(out / "static_0000.seq"),
                                "--event", str(out / "event_0000.seq"),
                                "--tstar", "3", "--out", str(mixed_path))
        assert code == 0
        assert payload["t_star"] == 3
        assert payload["modality_labels"] == [1, 1, 0, 0]
        frames = data.load_tensor(mixed_path)
        static = data.load_tensor(out / "static_0000.seq")
        event = data.load_tensor(out / "event_0000.seq")
        np.testing.assert_array_equal(frames[:2], static[:2])
        np.testing.assert_array_equal(frames[2:], event[2:])

    def test_mix_missing_file_exits_data(self, capsys, tmp_path):
        code, _ = run_cli(capsys, "mix", "--static", str(tmp_path / "a.seq"),
                          "--event", str(tmp_path / "b.seq"), "--tstar", "1")
        assert code in (4,)  # unreadable sequence file


class TestVarsim:
    def test_report_fields(self, capsys):
        code, payload = run_cli(capsys, "varsim", "--replications", "2000",
                                "--seed", "4")
        assert code == 0
        assert payload["min_eig_diff"] >= -1e-10
        assert abs(payload["trace_identity_lhs"] - payload["trace_identity_rhs"]) < 1e-12

    def test_model_file_round_trip(self, capsys, tmp_path):
        from tmkt import variance
        model = variance.random_model(np.random.default_rng(0))
        path = tmp_path / "model.json"
        path.write_text(json.dumps(model.to_dict()))
        code, payload = run_cli(capsys, "varsim", "--model-file", str(path),
                                "--replications", "1000")
        assert code == 0
        assert payload["replications"] == 1000


class TestTrainCommands:
    def test_train_missing_config_exits_config(self, capsys, tmp_path):
        code, _ = run_cli(capsys, "train", "--config", str(tmp_path / "nope.json"))
        assert code == 3

    def test_train_eval_gradvar_pipeline(self, capsys, tmp_path):
        tr, ev = tmp_path / "tr", tmp_path / "ev"
        data.gen_paired_dataset(tr, classes=2, per_class=4, size=16, timesteps=4, seed=0)
        data.gen_paired_dataset(ev, classes=2, per_class=2, size=16, timesteps=4, seed=1)
        ckpt = tmp_path / "net.ckpt"
        cfg = {
            "train_manifest": str(tr / "manifest.json"),
            "eval_manifest": str(ev / "manifest.json"),
            "timesteps": 4, "epochs": 1, "batch_size": 4,
            "conv_channels": [4, 6], "hidden": 12,
            "checkpoint_path": str(ckpt),
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))

        code, payload = run_cli(capsys, "train", "--config", str(cfg_path))
        assert code == 0
        assert payload["epochs"] == 1

        code, payload = run_cli(capsys, "eval", "--config", str(cfg_path),
                                "--checkpoint", str(ckpt))
        assert code == 0
        assert 0.0 <= payload["eval_acc"] <= 1.0

        code, payload = run_cli(capsys, "gradvar", "--config", str(cfg_path),
                                "--strategy", "tsm", "--batches", "3",
                                "--alpha", "0.5")
        assert code == 0
        assert payload["trace"] >= 0.0
        assert payload["num_batches"] == 3


class TestCkaCheck:
    def test_invariances_pass(self, capsys):
        code, payload = run_cli(capsys, "cka-check")
        assert code == 0
        assert payload["pass"] is True
