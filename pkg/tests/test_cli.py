"""CLI surface: subcommand contracts, determinism, exit codes, file formats."""

import json
from pathlib import Path

import numpy as np
import pytest

from qfat.cli import main


def run(argv) -> int:
    return main(argv)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def tiny_train_setup(workdir):
    """A small dataset + config + trained checkpoint shared across CLI tests."""
    data = workdir / "demos.jsonl"
    assert run(["gen-data", "--env", "multiroute", "--n", "60", "--noise-std", "0.01",
                "--seed", "7", "--out", str(data)]) == 0
    config = workdir / "config.json"
    config.write_text(json.dumps({
        "policy": {"state_dim": 2, "action_dim": 2, "mixtures": 2, "state_history": 3,
                   "goal_horizon": 0, "layers": 1, "heads": 2, "embed_dim": 8,
                   "dropout": 0.1, "action_horizon": 1},
        "train": {"epochs": 2, "batch_size": 128, "max_lr": 1e-3, "min_lr": 1e-6,
                  "schedule": "cosine", "beta1": 0.9, "beta2": 0.95,
                  "weight_decay": 0.0, "history_mask_prob": 0.0,
                  "eval_every": 1, "seed": 7},
    }))
    out = workdir / "run1"
    assert run(["train", "--dataset", str(data), "--config", str(config),
                "--out", str(out)]) == 0
    return data, config, out


class TestGenData:
    def test_byte_identical_for_fixed_seed(self, workdir):
        a = workdir / "a.jsonl"
        b = workdir / "b.jsonl"
        for path in (a, b):
            assert run(["gen-data", "--env", "multiroute", "--n", "50",
                        "--seed", "7", "--out", str(path)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_meta_embeds_config_and_seed(self, workdir):
        path = workdir / "meta.jsonl"
        run(["gen-data", "--env", "sequencing", "--n", "10", "--seed", "3",
             "--out", str(path)])
        first = json.loads(path.read_text().splitlines()[0])
        assert first["meta"]["seed"] == 3
        assert first["meta"]["env"] == "sequencing"

    def test_unknown_flag_rejected(self, capsys):
        assert run(["gen-data", "--env", "multiroute", "--frobnicate", "1"]) == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_env_rejected(self):
        assert run(["gen-data", "--env", "mars"]) == 1


class TestTrain:
    def test_outputs_exist(self, tiny_train_setup):
        _, _, out = tiny_train_setup
        for name in ("best.qfat", "best.json", "final.qfat", "final.json", "log.csv"):
            assert (out / name).exists(), name

    def test_log_embeds_config_and_seed(self, tiny_train_setup):
        _, _, out = tiny_train_setup
        header = (out / "log.csv").read_text().splitlines()[0]
        meta = json.loads(header[2:])
        assert meta["seed"] == 7
        assert meta["policy"]["mixtures"] == 2

    def test_missing_dataset_is_validation_failure(self, workdir, tiny_train_setup):
        _, config, _ = tiny_train_setup
        assert run(["train", "--dataset", str(workdir / "nope.jsonl"),
                    "--config", str(config)]) == 1

    def test_dimension_mismatch_rejected(self, workdir, tiny_train_setup):
        data, _, _ = tiny_train_setup
        bad = workdir / "bad_config.json"
        cfg = json.loads((workdir / "config.json").read_text())
        cfg["policy"]["state_dim"] = 5
        bad.write_text(json.dumps(cfg))
        assert run(["train", "--dataset", str(data), "--config", str(bad)]) == 1


class TestEval:
    def test_eval_writes_report_with_sampler_echo(self, tiny_train_setup, workdir):
        _, _, out = tiny_train_setup
        ev = workdir / "eval1"
        code = run(["eval", "--checkpoint", str(out / "best.qfat"), "--env", "multiroute",
                    "--sampler", "scaled", "--alpha", "1e-6", "--episodes", "4",
                    "--seed", "11", "--out", str(ev)])
        assert code == 0
        report = json.loads((ev / "report.json").read_text())
        assert report["sampler"] == {"kind": "scaled", "alpha": 1e-6,
                                     "mode_noise": "none", "noise_scale": 1e-4}
        assert report["seed"] == 11
        assert (ev / "trajectories.csv").exists()
        assert (ev / "overlay.svg").exists()
        csv_lines = (ev / "trajectories.csv").read_text().splitlines()
        assert csv_lines[1] == "episode,step,x,y,ax,ay"

    def test_thread_count_does_not_change_outputs(self, tiny_train_setup, workdir):
        _, _, out = tiny_train_setup
        blobs = []
        for threads, name in [("1", "evt1"), ("4", "evt4")]:
            ev = workdir / name
            assert run(["eval", "--checkpoint", str(out / "best.qfat"),
                        "--env", "multiroute", "--episodes", "6", "--seed", "5",
                        "--threads", threads, "--out", str(ev)]) == 0
            blobs.append(((ev / "report.json").read_bytes(),
                          (ev / "trajectories.csv").read_bytes(),
                          (ev / "overlay.svg").read_bytes()))
        assert blobs[0][0] == blobs[1][0]
        assert blobs[0][1] == blobs[1][1]
        assert blobs[0][2] == blobs[1][2]

    def test_missing_checkpoint_rejected(self, workdir):
        assert run(["eval", "--checkpoint", str(workdir / "ghost.qfat"),
                    "--env", "multiroute"]) == 1

    def test_conditional_on_unconditional_checkpoint_rejected(self, tiny_train_setup):
        _, _, out = tiny_train_setup
        assert run(["eval", "--checkpoint", str(out / "best.qfat"), "--env", "multiroute",
                    "--conditional", "--episodes", "2"]) == 1


@pytest.fixture(scope="module")
def gmm_spec(tmp_path_factory):
    path = tmp_path_factory.mktemp("modes") / "gmm.json"
    path.write_text(json.dumps({
        "weights": [0.5, 0.5],
        "means": [[-1.0, 0.0], [0.0, -1.0]],
        "stddevs": [[1.5, 0.2], [0.2, 1.5]],
    }))
    return path


class TestModes:

    def test_stable_json_output(self, gmm_spec, capsys):
        assert run(["modes", "--gmm", str(gmm_spec), "--seed", "3"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert list(out.keys()) == ["modes", "weights", "log_densities", "degraded",
                                    "config", "seed"]
        assert len(out["modes"]) == 3
        assert out["seed"] == 3

    def test_reproducible_given_seed(self, gmm_spec, capsys):
        run(["modes", "--gmm", str(gmm_spec), "--seed", "3"])
        first = capsys.readouterr().out
        run(["modes", "--gmm", str(gmm_spec), "--seed", "3"])
        assert capsys.readouterr().out == first

    def test_custom_config_file(self, gmm_spec, tmp_path, capsys):
        cfg = tmp_path / "mf.json"
        cfg.write_text(json.dumps({"epsilon": 1e-8, "max_it": 500, "n_init": 10,
                                   "merge_radius": 1e-3, "eig_tol": 1e-9,
                                   "reject_threshold": 1e-4}))
        assert run(["modes", "--gmm", str(gmm_spec), "--config", str(cfg)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["config"]["max_it"] == 500

    def test_degraded_exit_code(self, tmp_path, capsys):
        spec = tmp_path / "g.json"
        spec.write_text(json.dumps({"weights": [0.5, 0.5], "means": [[-2.0], [2.0]],
                                    "stddevs": [[1.0], [1.0]]}))
        cfg = tmp_path / "m.json"
        cfg.write_text(json.dumps({"epsilon": 1e-300, "max_it": 1}))
        assert run(["modes", "--gmm", str(spec), "--config", str(cfg)]) == 2
        assert json.loads(capsys.readouterr().out)["degraded"] is True

    def test_missing_spec_rejected(self, tmp_path):
        assert run(["modes", "--gmm", str(tmp_path / "none.json")]) == 1


class TestSampleViz:
    def test_writes_csv_and_svg(self, tmp_path, capsys):
        spec = tmp_path / "g.json"
        spec.write_text(json.dumps({
            "weights": [0.5, 0.5],
            "means": [[-1.0, -1.0], [1.0, 1.0]],
            "stddevs": [[0.3, 0.3], [0.3, 0.3]],
        }))
        out = tmp_path / "viz"
        assert run(["sample-viz", "--gmm", str(spec), "--n", "50",
                    "--seed", "2", "--out", str(out)]) == 0
        lines = (out / "samples.csv").read_text().splitlines()
        assert json.loads(lines[0][2:])["seed"] == 2
        assert lines[1] == "sampler,index,x0,x1"
        assert len(lines) == 2 + 3 * 50
        assert (out / "samples.svg").exists()

    def test_deterministic(self, tmp_path):
        spec = tmp_path / "g.json"
        spec.write_text(json.dumps({"weights": [1.0], "means": [[0.0, 0.0]],
                                    "stddevs": [[1.0, 1.0]]}))
        a, b = tmp_path / "va", tmp_path / "vb"
        for out in (a, b):
            assert run(["sample-viz", "--gmm", str(spec), "--n", "20",
                        "--seed", "9", "--out", str(out)]) == 0
        assert (a / "samples.csv").read_bytes() == (b / "samples.csv").read_bytes()
        assert (a / "samples.svg").read_bytes() == (b / "samples.svg").read_bytes()


class TestBench:
    def test_small_config_bench_runs(self, tmp_path, capsys):
        cfg = tmp_path / "bench.json"
        cfg.write_text(json.dumps({
            "policy": {"state_dim": 4, "action_dim": 2, "mixtures": 2,
                       "state_history": 4, "goal_horizon": 0, "layers": 1,
                       "heads": 2, "embed_dim": 16, "dropout": 0.0,
                       "action_horizon": 1}}))
        out = tmp_path / "bench_out.json"
        assert run(["bench", "--config", str(cfg), "--reps", "30",
                    "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "backbone_forward" in text
        payload = json.loads(out.read_text())
        assert set(payload["timings"]) == {"backbone_forward", "head_decode",
                                           "sample_vanilla", "sample_scaled",
                                           "sample_mode"}
        for stats in payload["timings"].values():
            assert stats["mean_ms"] > 0


class TestTopLevel:
    def test_no_subcommand_is_error(self):
        assert run([]) == 1

    def test_unknown_subcommand_is_error(self):
        assert run(["transmogrify"]) == 1
