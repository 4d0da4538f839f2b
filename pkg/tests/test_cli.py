"""Configuration, the training runner, report files, plots and the command line."""

import hashlib
import math

import numpy as np
import pytest

from mahacal import cli, plots, runner
from mahacal.config import ConfigError, RunConfig
from mahacal.model import FewShotModel, NonFiniteLossError
from mahacal.tasks import Task

TINY = dict(
    feature_dim=4, depth=1, encoder_hidden=8, encoder_heads=2, encoder_blocks=1,
    train_episodes=6, val_episodes=2, eval_episodes=2, mc_samples=10, pool_per_class=40,
    query_per_class=10, ood_samples=20, plot_resolution=12, t_max=20,
)


def tiny_config(tmp_path, **changes):
    cfg = RunConfig(**{**TINY, "out_dir": str(tmp_path / "run"), **changes})
    path = tmp_path / "tiny.cfg"
    cfg.save(path)
    return cfg, path


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestRunConfig:
    def test_text_round_trip(self):
        cfg = RunConfig(lr=0.1 + 0.2, rank=3, dataset="circles")
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_comments_and_overrides(self):
        cfg = RunConfig.from_text("# note\nrank = 2  # inline\n\nseed=4\n", seed=9)
        assert cfg.rank == 2 and cfg.seed == 9

    @pytest.mark.parametrize("text,match", [
        ("rank 2", "line 1"),
        ("colour = red", "unknown key"),
        ("rank = two", "cannot parse"),
        ("head = gp", "head must be"),
        ("rank = -1", "rank"),
        ("mc_samples = 0", "mc_samples"),
        ("dataset = spirals", "dataset"),
    ])
    def test_invalid_files(self, text, match):
        with pytest.raises(ConfigError, match=match):
            RunConfig.from_text(text)

    def test_keys_in(self):
        assert RunConfig.keys_in("a = 1\n# b = 2\nc=3 # d = 4\n") == {"a", "c"}


class TestRunner:
    def test_seed_streams_are_reproducible_and_distinct(self):
        a, b = runner.seed_streams(3), runner.seed_streams(3)
        assert a["train"].random() == b["train"].random()
        assert runner.seed_streams(3)["train"].random() != runner.seed_streams(3)["eval"].random()

    def test_cosine_schedule(self):
        cfg = RunConfig(lr=0.01, train_episodes=100)
        assert runner.learning_rate(cfg, 0) == pytest.approx(0.01)
        assert runner.learning_rate(cfg, 50) == pytest.approx(0.005)
        assert runner.learning_rate(cfg.replace(lr_schedule="constant"), 50) == 0.01

    def test_reference_training_run(self):
        # moons 2-way/5-shot, 2000 episodes, seed 7: last-500 training accuracy
        result = runner.train(RunConfig(seed=7), calibrate_after=False)
        assert result.final_accuracy(500) >= 0.90

    def test_zero_episodes_keep_initial_parameters(self, tmp_path):
        cfg, _ = tiny_config(tmp_path, train_episodes=0)
        result = runner.train(cfg)
        fresh = runner.build_model(cfg)
        assert result.model.temperature == 1
        for key, value in fresh.state_dict().items():
            np.testing.assert_array_equal(result.model.state_dict()[key], value)

    def test_training_log(self, tmp_path):
        cfg, _ = tiny_config(tmp_path)
        log = tmp_path / "log.csv"
        result = runner.train(cfg, log_path=log)
        lines = log.read_text().splitlines()
        assert lines[0] == "episode,loss,accuracy,running_accuracy" and len(lines) == 7
        assert len(result.losses) == 6 and result.model.temperature >= 1

    def test_non_finite_losses_abort(self, tmp_path, monkeypatch):
        def broken(self, task):
            raise NonFiniteLossError("nan")

        monkeypatch.setattr(FewShotModel, "loss", broken)
        cfg, _ = tiny_config(tmp_path)
        with pytest.raises(runner.TrainingAborted, match="3 consecutive"):
            runner.train(cfg)

    def test_evaluate_rejects_zero_episodes(self, tmp_path):
        cfg, _ = tiny_config(tmp_path)
        with pytest.raises(ConfigError):
            runner.evaluate(runner.build_model(cfg), cfg, episodes=0)

    def test_report_round_trip(self, tmp_path):
        cfg, _ = tiny_config(tmp_path)
        report = runner.evaluate(runner.build_model(cfg), cfg)
        path = tmp_path / "report.csv"
        runner.write_report(report, path)
        assert runner.read_report(path) == report.row()
        assert (tmp_path / "report_bins.csv").read_text().count("\n") == 1 + 2 * 15
        assert path.read_text().startswith("# energy score = logsumexp(logits)")
        assert report.bins.ece == pytest.approx(report.ece)

    def test_mc_sample_count_does_not_change_accuracy_much(self, tmp_path):
        cfg, _ = tiny_config(tmp_path, eval_episodes=3)
        model = runner.train(cfg).model
        a = runner.evaluate(model, cfg.replace(mc_samples=1))
        b = runner.evaluate(model, cfg.replace(mc_samples=100))
        assert a.mc_samples == 1 and b.mc_samples == 100
        assert abs(a.accuracy - b.accuracy) < 0.1

    def test_experiment_cells(self):
        cells = runner.experiment_cells("moons", RunConfig(), seeds=range(2))
        assert len(cells) == 2 * len(runner.MODEL_GRID)
        assert {c.head for _, c in cells} == {"protonet", "protonet_sn", "shrinkage_class",
                                              "shrinkage_shared", "mahalanobis"}
        with pytest.raises(ConfigError, match="available suites"):
            runner.experiment_cells("mnist", RunConfig())

    def test_worker_count(self, monkeypatch):
        monkeypatch.setenv("MMC_THREADS", "4")
        assert runner.worker_count() == 4
        monkeypatch.setenv("MMC_THREADS", "lots")
        with pytest.raises(ConfigError):
            runner.worker_count()

    def test_summary_table(self, tmp_path):
        metrics = {k: 0.5 for k in runner.REPORT_METRICS}
        cells = [runner.CellResult("A", s, {**metrics, "mean_spread": 2.0, "ood_ece": 0.1 * s}, 0.9, 1.0)
                 for s in range(3)]
        (row,) = runner.summarize(cells)
        assert row["ood_ece_mean"] == pytest.approx(0.1)
        assert row["ood_ece_std"] == pytest.approx(0.1)
        path = tmp_path / "t.csv"
        runner.write_table([row], path)
        assert runner.read_table(path) == [row]
        assert "10.00±10.00" in runner.format_table([row])


class TestPlots:
    def test_isotropic_ellipse_is_circular(self):
        major, minor = plots.ellipse_axes(2.5 * np.eye(2))
        assert major / minor == pytest.approx(1.0, abs=1e-6)
        pts = plots.ellipse_points([1.0, -1.0], 4.0 * np.eye(2), n_sigma=2.0)
        np.testing.assert_allclose(np.hypot(pts[:, 0] - 1, pts[:, 1] + 1), 4.0, atol=1e-12)

    def test_ellipse_axes_follow_eigenvalues(self):
        assert plots.ellipse_axes(np.diag([9.0, 1.0])) == pytest.approx((3.0, 1.0))

    def test_entropy_bounds(self):
        assert plots.predictive_entropy(np.full((1, 4), 0.25))[0] == pytest.approx(math.log(4))
        assert plots.predictive_entropy(np.array([[1.0, 0.0]]))[0] == 0.0

    def test_entropy_surface_needs_2d_inputs(self, tmp_path):
        cfg, _ = tiny_config(tmp_path)
        task = Task(np.zeros((2, 3)), np.array([0, 1]), np.zeros((2, 3)), np.array([0, 1]), 2, 1,
                    np.zeros(3), np.ones(3))
        with pytest.raises(ValueError, match="2-D"):
            plots.entropy_surface(runner.build_model(cfg), task, np.random.default_rng(0))


class TestCommandLine:
    def test_train_eval_plot_cycle(self, tmp_path, capsys):
        cfg, path = tiny_config(tmp_path)
        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(path)]) == 0
        ckpt = out / "model.mmc"
        before = digest(ckpt)
        assert (out / "model.cfg").exists() and (out / "train_log.csv").exists()

        assert cli.main(["eval", "--config", str(path)]) == 0
        first = (out / "report.csv").read_text()
        assert cli.main(["eval", "--config", str(path)]) == 0
        assert (out / "report.csv").read_text() == first

        assert cli.main(["plot", "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        for name in ("entropy.svg", "eigenvalues.svg", "ellipses.svg"):
            assert (out / "plots" / name).read_text().lstrip().startswith("<?xml")
        assert digest(ckpt) == before
        assert "wrote" in capsys.readouterr().out

    def test_same_seed_gives_identical_checkpoints(self, tmp_path):
        _, path = tiny_config(tmp_path)
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
        assert digest(tmp_path / "a" / "model.mmc") == digest(tmp_path / "b" / "model.mmc")

    def test_flags_override_config_file(self, tmp_path):
        _, path = tiny_config(tmp_path, seed=1)
        args = cli.build_parser().parse_args(["train", "--config", str(path), "--seed", "5", "--rank", "2"])
        cfg = cli.resolve_config(args)
        assert cfg.seed == 5 and cfg.rank == 2 and cfg.feature_dim == 4

    def test_eval_keeps_saved_settings(self, tmp_path):
        _, path = tiny_config(tmp_path, seed=11)
        assert cli.main(["train", "--config", str(path), "--episodes", "0"]) == 0
        args = cli.build_parser().parse_args(["eval", "--checkpoint", str(tmp_path / "run" / "model.mmc")])
        _, saved = runner.load_run(args.checkpoint)
        assert cli.resolve_config(args, saved).seed == 11

    def test_dump_task(self, tmp_path):
        _, path = tiny_config(tmp_path)
        assert cli.main(["dump-task", "--config", str(path), "--dataset", "circles", "--episodes", "2"]) == 0
        assert sorted(p.name for p in (tmp_path / "run").glob("*.csv")) == ["circles_task000.csv",
                                                                            "circles_task001.csv"]

    def test_exit_codes(self, tmp_path, capsys):
        _, path = tiny_config(tmp_path)
        assert cli.main(["train", "--config", str(path), "--head", "gp"]) == cli.EXIT_CONFIG
        assert cli.main(["eval", "--config", str(path), "--checkpoint", str(tmp_path / "none.mmc")]) == cli.EXIT_IO
        bad = tmp_path / "bad.mmc"
        bad.write_bytes(b"JUNK")
        assert cli.main(["eval", "--config", str(path), "--checkpoint", str(bad)]) == cli.EXIT_IO
        assert cli.main(["experiment", "mnist", "--config", str(path)]) == cli.EXIT_CONFIG
        assert cli.main(["dump-task", "--config", str(path), "--episodes", "0"]) == cli.EXIT_CONFIG
        err = capsys.readouterr().err
        assert "available suites: moons, circles, gaussians" in err

    def test_empty_evaluation_is_an_error(self, tmp_path):
        _, path = tiny_config(tmp_path)
        assert cli.main(["train", "--config", str(path), "--episodes", "0"]) == 0
        assert cli.main(["eval", "--config", str(path), "--episodes", "0"]) == cli.EXIT_CONFIG

    def test_numeric_failure_exit_code(self, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise runner.TrainingAborted("nan")

        monkeypatch.setattr(runner, "train", explode)
        _, path = tiny_config(tmp_path)
        assert cli.main(["train", "--config", str(path)]) == cli.EXIT_NUMERIC

    def test_experiment_is_reproducible(self, tmp_path, monkeypatch):
        monkeypatch.setattr(runner, "MODEL_GRID", runner.MODEL_GRID[:1] + runner.MODEL_GRID[4:5])
        _, path = tiny_config(tmp_path, train_episodes=3, eval_episodes=1)
        texts = []
        for name in ("x", "y"):
            argv = ["experiment", "moons", "--config", str(path), "--seeds", "2", "--perturb-episodes", "1",
                    "--out", str(tmp_path / name)]
            assert cli.main(argv) == 0
            texts.append((tmp_path / name / "moons_table.csv").read_text())
        assert texts[0] == texts[1]
        header = texts[0].splitlines()[0].split(",")
        for key in runner.REPORT_METRICS:
            assert f"{key}_mean" in header
        assert len(texts[0].splitlines()) == 3
