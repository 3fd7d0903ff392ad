"""Command-line interface: subcommand exit codes, emitted artifacts, run
manifests, config-file validation, and byte-level reproducibility of the
train/eval round trip.

Commands run in-process through ``metriclab.cli.run`` so exit codes and
artifacts can be asserted directly; one subprocess test covers the
installed console script.
"""

import json
import shutil
import subprocess

import numpy as np
import pytest

from metriclab import reference_train_config
from metriclab.cli import ExperimentConfig, run

TINY_CONFIG = {
    "seed": 0,
    "dataset": {
        "n_classes": 4, "subclusters_per_class": 1, "samples_per_subcluster": 10,
        "input_dim": 6, "class_kappa": 20.0, "subcluster_kappa": 60.0, "seed": 3,
    },
    "batch": {"n_classes": 2, "samples_per_class": 2},
    "loss": {"margin": 0.2},
    "train": {"variant": "triplet_only", "total_iters": 6, "eval_interval": 3,
              "embed_dim": 4, "init_scale": 1.0},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG), encoding="ascii")
    return path


def _manifest(out_dir):
    return json.loads((out_dir / "manifest.json").read_text())


class TestCheckCommands:
    def test_selftest_passes(self, capsys):
        assert run(["selftest"]) == 0
        assert "selftest: PASS" in capsys.readouterr().out

    def test_gradcheck_covers_every_loss(self, tmp_path, capsys):
        out = tmp_path / "grad"
        assert run(["gradcheck", "--trials", "2", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["pass"] is True
        assert [r["loss"] for r in report["results"]] == [
            "triplet", "s_triplet", "simce", "m_simce", "ce",
            "combined_simce", "combined_m_simce"]
        assert all(r["max_rel_error"] <= 1e-6 for r in report["results"])
        manifest = _manifest(out)
        assert manifest["subcommand"] == "gradcheck"
        assert manifest["artifacts"] == ["report.json"]
        assert len(manifest["config_sha256"]) == 64

    def test_gradcheck_single_loss(self, tmp_path):
        out = tmp_path / "grad"
        assert run(["gradcheck", "--loss", "simce", "--trials", "2", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert [r["loss"] for r in report["results"]] == ["simce"]

    def test_gradcheck_unknown_loss_is_usage_error(self, capsys):
        assert run(["gradcheck", "--loss", "nosuch", "--trials", "1"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_hessian_check(self, tmp_path, capsys):
        out = tmp_path / "hess"
        assert run(["hessian-check", "--trials", "3", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["pass"] is True
        kinds = {p["kind"] for p in report["probes"]}
        assert kinds == {"triplet", "simce"}

    def test_robustness_check_passes_at_full_sample_count(self, tmp_path):
        out = tmp_path / "rob"
        assert run(["robustness-check", "--points", "1", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["pass"] is True

    def test_robustness_check_starved_of_samples_exits_2(self, capsys):
        """50 Monte-Carlo draws cannot hit the 0.1% quadratic tolerance, so
        the command reports a numerical failure, not a usage error."""
        code = run(["robustness-check", "--points", "1", "--samples", "50", "--seed", "5"])
        assert code == 2
        assert "FAIL" in capsys.readouterr().out

    def test_margin_check(self, tmp_path):
        out = tmp_path / "margin"
        assert run(["margin-check", "--trials", "2", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["pass"] is True
        assert report["max_excess"] <= 1e-12  # rounding slack near z = -20
        assert len(report["margins"]) == 2
        assert all(m["margin"] >= 2.0 for m in report["margins"])


class TestDataCommands:
    def test_gen_data_writes_dataset_and_manifest(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "data"
        assert run(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
        header = (out / "dataset.csv").read_text().splitlines()[0]
        assert header == "label,subcluster,noise," + ",".join(f"f{i}" for i in range(6))
        assert _manifest(out)["artifacts"] == ["dataset.csv"]
        assert "40 rows" in capsys.readouterr().out

    def test_gen_data_is_deterministic(self, tiny_config, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run(["gen-data", "--config", str(tiny_config), "--out", str(out_a)])
        run(["gen-data", "--config", str(tiny_config), "--out", str(out_b)])
        assert (out_a / "dataset.csv").read_bytes() == (out_b / "dataset.csv").read_bytes()

    def test_gen_data_seed_override_reaches_the_dataset(self, tiny_config, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run(["gen-data", "--config", str(tiny_config), "--out", str(out_a)])
        run(["gen-data", "--config", str(tiny_config), "--seed", "9", "--out", str(out_b)])
        assert (out_a / "dataset.csv").read_bytes() != (out_b / "dataset.csv").read_bytes()
        assert _manifest(out_b)["seed"] == 9
        assert _manifest(out_b)["config_sha256"] != _manifest(out_a)["config_sha256"]


class TestTrainEvalRoundTrip:
    def test_train_writes_all_artifacts(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "run"
        assert run(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
        expected = ["curves.csv", "evals.csv", "manifest.json", "model.json",
                    "sim_end.csv", "sim_mid.csv", "sim_start.csv"]
        assert sorted(p.name for p in out.iterdir()) == expected
        curves = (out / "curves.csv").read_text().splitlines()
        assert curves[0] == "iter,loss,lr,n_non"
        assert len(curves) == 1 + 6
        evals = (out / "evals.csv").read_text().splitlines()
        assert evals[0] == "iter,rank1,uniformity,kappa_hat,inter_intra"
        assert [int(line.split(",")[0]) for line in evals[1:]] == [0, 3, 6]
        assert "train: triplet_only for 6 iterations" in capsys.readouterr().out

    def test_train_is_byte_reproducible(self, tiny_config, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run(["train", "--config", str(tiny_config), "--out", str(out_a)])
        run(["train", "--config", str(tiny_config), "--out", str(out_b)])
        for name in ("curves.csv", "evals.csv", "model.json",
                     "sim_start.csv", "sim_mid.csv", "sim_end.csv", "manifest.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name

    def test_eval_reads_a_trained_model(self, tiny_config, tmp_path):
        run_dir, eval_dir = tmp_path / "run", tmp_path / "eval"
        run(["train", "--config", str(tiny_config), "--out", str(run_dir)])
        code = run(["eval", "--config", str(tiny_config),
                    "--model", str(run_dir / "model.json"), "--out", str(eval_dir)])
        assert code == 0
        metrics = json.loads((eval_dir / "metrics.json").read_text())
        assert set(metrics) == {"rank1", "uniformity", "kappa_hat", "intra_class_dist",
                                "inter_class_dist", "inter_intra_ratio", "degenerate_classes"}
        assert 0.0 <= metrics["rank1"] <= 1.0
        # the final in-run evaluation and the standalone eval see the same split
        evals = (run_dir / "evals.csv").read_text().splitlines()[-1].split(",")
        np.testing.assert_allclose(metrics["rank1"], float(evals[1]), atol=1e-12)

    def test_export_sim_with_and_without_model(self, tiny_config, tmp_path):
        run_dir = tmp_path / "run"
        run(["train", "--config", str(tiny_config), "--out", str(run_dir)])
        raw_dir, emb_dir = tmp_path / "raw", tmp_path / "emb"
        assert run(["export-sim", "--config", str(tiny_config), "--out", str(raw_dir)]) == 0
        assert run(["export-sim", "--config", str(tiny_config), "--out", str(emb_dir),
                    "--model", str(run_dir / "model.json"), "--kind", "cosine_over_max"]) == 0
        raw_header = (raw_dir / "sim.csv").read_text().splitlines()[0]
        emb_header = (emb_dir / "sim.csv").read_text().splitlines()[0]
        assert raw_header == "# kind=cosine B=4"
        assert emb_header == "# kind=cosine_over_max B=4"
        assert (raw_dir / "sim.csv").read_bytes() != (emb_dir / "sim.csv").read_bytes()


class TestUsageAndConfigErrors:
    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_required_flag(self, capsys):
        assert run(["train"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_train_needs_out(self, tiny_config, capsys):
        assert run(["train", "--config", str(tiny_config)]) == 1
        assert "--out" in capsys.readouterr().err

    def test_invalid_json_config(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="ascii")
        assert run(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "not valid JSON" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        payload = dict(TINY_CONFIG, optimizer={"kind": "adam"})
        bad.write_text(json.dumps(payload), encoding="ascii")
        assert run(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "unknown config key 'optimizer'" in capsys.readouterr().err

    def test_unknown_key_inside_a_section(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        payload = dict(TINY_CONFIG, batch={"n_classes": 2, "side": "left"})
        bad.write_text(json.dumps(payload), encoding="ascii")
        assert run(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert "unknown key 'side'" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run(["gen-data", "--config", str(tmp_path / "absent.json"),
                    "--out", str(tmp_path / "o")]) == 1
        assert "cannot read config" in capsys.readouterr().err

    def test_capacity_problems_are_exit_1(self, tmp_path, capsys):
        payload = dict(TINY_CONFIG, batch={"n_classes": 8, "samples_per_class": 2})
        path = tmp_path / "config.json"
        path.write_text(json.dumps(payload), encoding="ascii")
        assert run(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
        assert "the batch needs 8" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        assert run(["--help"]) == 0
        assert "metriclab" in capsys.readouterr().out


class TestReferenceConfigFile:
    def test_matches_the_library_factory(self):
        """configs/reference.json and reference_train_config() describe the
        same run, so CLI users and library users train the same model."""
        config = ExperimentConfig.from_file("configs/reference.json")
        assert config.train_config() == reference_train_config(
            variant="triplet_only", seed=0)

    def test_sha256_is_stable_under_key_order(self, tmp_path):
        payload = json.loads(open("configs/reference.json").read())
        reordered = {k: payload[k] for k in reversed(list(payload))}
        shuffled = tmp_path / "shuffled.json"
        shuffled.write_text(json.dumps(reordered), encoding="ascii")
        a = ExperimentConfig.from_file("configs/reference.json").sha256()
        b = ExperimentConfig.from_file(shuffled).sha256()
        assert a == b


class TestConsoleScript:
    @pytest.mark.skipif(shutil.which("metriclab") is None,
                        reason="console script not on PATH")
    def test_installed_entry_point(self):
        proc = subprocess.run(["metriclab", "margin-check", "--trials", "1"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "margin-check: PASS" in proc.stdout
