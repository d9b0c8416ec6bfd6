import json

import numpy as np
import pytest

from config import RESOLVED_CONFIG_NAME, build_config
from diffcore import load_checkpoint
from errors import ConfigError, NonFiniteLossError
from models import AblationConfiguration
from services.ablation_service import AblationService, loss_grid, sweep_configurations
from services.training_service import (
    LOSS_LOG_HEADER,
    LOSS_LOG_NAME,
    SUMMARY_NAME,
    TrainingService,
    checkpoint_path,
)
from conftest import TINY_SETTINGS


def _nan_combine(cls, ent, con, weights):
    return cls * float("nan")


def _log_rows(out_dir):
    lines = (out_dir / LOSS_LOG_NAME).read_text().splitlines()
    assert lines[0] == LOSS_LOG_HEADER
    return [line.split(",") for line in lines[1:]]


class TestTrainingService:
    """Test the online mixup training loop"""

    def test_one_epoch(self, tiny_config, tiny_dataset):
        """Test: 16 images at batch 4 give 4 logged steps, a checkpoint and a summary"""
        trainer = TrainingService(tiny_config, tiny_dataset.train.training_view(), tiny_dataset.val.training_view())
        summary = trainer.train()
        out = trainer.out_dir

        assert summary.epochs_completed == 1 and summary.steps == 4
        rows = _log_rows(out)
        assert [int(r[0]) for r in rows] == [0, 1, 2, 3]
        for row in rows:
            values = [float(v) for v in row[1:]]
            assert all(np.isfinite(values))
            assert 0.0 <= values[-1] <= 1.0
        assert checkpoint_path(out, 1).exists()
        assert summary.checkpoint == str(checkpoint_path(out, 1))
        assert summary.final_val_accuracy is not None
        assert json.loads((out / SUMMARY_NAME).read_text())["steps"] == 4
        assert (out / RESOLVED_CONFIG_NAME).exists()

    def test_checkpoint_contents(self, tiny_config, tiny_dataset):
        """Test: the epoch checkpoint holds parameters, Adam state and position"""
        trainer = TrainingService(tiny_config, tiny_dataset.train.training_view())
        trainer.train()
        checkpoint = load_checkpoint(checkpoint_path(trainer.out_dir, 1))
        assert sorted(checkpoint.params) == sorted(trainer.net.params)
        assert checkpoint.adam.step == 4
        assert checkpoint.meta["epoch"] == 1 and checkpoint.meta["global_step"] == 4

    def test_total_matches_components(self, tiny_config, tiny_dataset):
        """Test: each logged total equals cls + weighted ent + weighted con"""
        trainer = TrainingService(tiny_config, tiny_dataset.train.training_view())
        trainer.train()
        for _, cls, ent, con, total, _ in _log_rows(trainer.out_dir):
            expected = float(cls) + tiny_config.lambda_ent * float(ent) + tiny_config.lambda_con * float(con)
            assert float(total) == pytest.approx(expected, rel=1e-12)

    def test_mixup_off_logs_unit_lambda(self, tiny_config, tiny_dataset):
        """Test: with mixing disabled every step uses lambda 1"""
        trainer = TrainingService(tiny_config.with_overrides(mixup=False), tiny_dataset.train.training_view())
        trainer.train()
        assert {float(r[-1]) for r in _log_rows(trainer.out_dir)} == {1.0}

    def test_parameters_change(self, tiny_config, tiny_dataset):
        """Test: training moves the weights"""
        trainer = TrainingService(tiny_config, tiny_dataset.train.training_view())
        before = trainer.net.state_dict()
        trainer.train()
        after = trainer.net.state_dict()
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_deterministic(self, tmp_path, tiny_config, tiny_dataset):
        """Test: the same seed gives byte-identical checkpoints and logs"""
        outputs = []
        for name in ("a", "b"):
            cfg = tiny_config.with_overrides(out_dir=str(tmp_path / name))
            TrainingService(cfg, tiny_dataset.train.training_view()).train()
            outputs.append((
                checkpoint_path(cfg.out_dir, 1).read_bytes(),
                (tmp_path / name / LOSS_LOG_NAME).read_text(),
            ))
        assert outputs[0] == outputs[1]

    def test_resume_reproduces_run(self, tmp_path, tiny_config, tiny_dataset):
        """Test: stopping after epoch 1 and resuming gives the uninterrupted run's losses and weights"""
        view = tiny_dataset.train.training_view()
        full = tiny_config.with_overrides(epochs=2, out_dir=str(tmp_path / "full"))
        TrainingService(full, view).train()

        split = tiny_config.with_overrides(epochs=1, out_dir=str(tmp_path / "split"))
        TrainingService(split, view).train()
        resumed = TrainingService(split.with_overrides(epochs=2), view)
        resumed.resume(checkpoint_path(split.out_dir, 1))
        assert (resumed.epoch, resumed.global_step) == (1, 4)
        summary = resumed.train()

        assert summary.steps == 8
        assert (tmp_path / "split" / LOSS_LOG_NAME).read_text() == (tmp_path / "full" / LOSS_LOG_NAME).read_text()
        assert checkpoint_path(split.out_dir, 2).read_bytes() == checkpoint_path(full.out_dir, 2).read_bytes()

    def test_non_finite_loss_aborts(self, monkeypatch, tiny_config, tiny_dataset):
        """Test: a non-finite loss raises with the step index and keeps earlier checkpoints"""
        view = tiny_dataset.train.training_view()
        TrainingService(tiny_config, view).train()

        trainer = TrainingService(tiny_config.with_overrides(epochs=2), view)
        trainer.resume(checkpoint_path(tiny_config.out_dir, 1))
        monkeypatch.setattr("services.training_service.combine", _nan_combine)
        with pytest.raises(NonFiniteLossError) as exc:
            trainer.train()
        assert exc.value.step == 4
        assert checkpoint_path(tiny_config.out_dir, 1).exists()
        assert not checkpoint_path(tiny_config.out_dir, 2).exists()

    def test_data_mismatch(self, tiny_config, tiny_dataset):
        """Test: images that do not fit the network raise ConfigError"""
        images, labels = tiny_dataset.train.training_view()
        with pytest.raises(ConfigError):
            TrainingService(tiny_config, (images[:, :, :8, :8], labels))
        with pytest.raises(ConfigError):
            TrainingService(tiny_config, (images, labels[:, :2]))

    def test_resume_needs_optimizer_state(self, tmp_path, tiny_config, tiny_dataset):
        """Test: a parameters-only checkpoint cannot be resumed"""
        from diffcore import save_checkpoint

        trainer = TrainingService(tiny_config, tiny_dataset.train.training_view())
        path = save_checkpoint(tmp_path / "weights.mxcm", trainer.net.state_dict())
        with pytest.raises(ConfigError):
            trainer.resume(path)


class TestAblation:
    """Test the ablation harness"""

    def test_grid_rows(self, tiny_config):
        """Test: the grid has the five loss combinations with the run weights"""
        grid = loss_grid(tiny_config)
        assert [c.name for c in grid] == ["baseline", "mixup_cls", "mixup_cls_ent", "mixup_cls_con", "full"]
        assert grid[0].mixup is False and grid[0].lambda_ent == 0.0 and grid[0].lambda_con == 0.0
        assert (grid[1].lambda_ent, grid[1].lambda_con) == (0.0, 0.0)
        assert (grid[4].lambda_ent, grid[4].lambda_con) == (tiny_config.lambda_ent, tiny_config.lambda_con)

    def test_unknown_row(self, tiny_config):
        """Test: unknown row names raise ConfigError"""
        with pytest.raises(ConfigError):
            loss_grid(tiny_config, ["full", "bogus"])

    def test_sweep_rows(self, tiny_config):
        """Test: a sweep varies one parameter of the full objective"""
        rows = sweep_configurations(tiny_config, "alpha", [0.1, 0.5])
        assert [r.name for r in rows] == ["alpha=0.1", "alpha=0.5"]
        assert [r.alpha for r in rows] == [0.1, 0.5]
        assert all(r.lambda_con == tiny_config.lambda_con for r in rows)
        with pytest.raises(ConfigError):
            sweep_configurations(tiny_config, "epochs", [1])

    def test_sweep_value_out_of_range(self, tiny_config):
        """Test: alpha 0 or a negative weight is reported as a ConfigError"""
        with pytest.raises(ConfigError, match="alpha=0"):
            sweep_configurations(tiny_config, "alpha", [0.0, 0.2])
        with pytest.raises(ConfigError):
            sweep_configurations(tiny_config, "lambda_con", [-1.0])

    def test_single_row(self, tiny_config, tiny_dataset):
        """Test: one configuration and one seed give a single-row table"""
        service = AblationService(tiny_config, tiny_dataset)
        rows = service.run_ablation([AblationConfiguration(name="full", lambda_ent=0.02, lambda_con=2e-4)], [3])
        assert len(rows) == 1
        row = rows[0]
        assert row.status == "ok" and row.seeds == 1
        assert 0.0 <= row.miou_mean <= 1.0 and row.miou_std == 0.0
        assert (service.out_dir / "ablation.csv").exists()
        assert "full" in (service.out_dir / "ablation.txt").read_text()

    def test_divergence_marks_row_failed(self, monkeypatch, tiny_config, tiny_dataset):
        """Test: a configuration with a non-finite loss is reported failed"""
        monkeypatch.setattr("services.training_service.combine", _nan_combine)
        rows = AblationService(tiny_config, tiny_dataset).run_ablation([AblationConfiguration(name="mixup_cls")], [1, 2])
        assert rows[0].status == "failed"
        assert rows[0].miou_mean is None
        assert "non-finite" in rows[0].error

    def test_needs_seeds(self, tiny_config, tiny_dataset):
        """Test: an empty seed list is rejected"""
        with pytest.raises(ConfigError):
            AblationService(tiny_config, tiny_dataset).run_ablation(loss_grid(tiny_config), [])

    @pytest.mark.slow
    def test_full_grid_three_seeds(self, tiny_config, tiny_dataset):
        """Test: the full grid over 3 seeds gives 5 rows with mean and std columns"""
        rows = AblationService(tiny_config.with_overrides(epochs=2), tiny_dataset).run_ablation(
            loss_grid(tiny_config), [0, 1, 2]
        )
        assert len(rows) == 5
        for row in rows:
            assert row.status == "ok" and row.seeds == 3
            for metric in ("miou", "coverage", "uniformity"):
                assert getattr(row, f"{metric}_std") is not None


@pytest.mark.slow
def test_reference_configuration_trains(tmp_path):
    """Test: a reduced reference run trains to finite losses and a usable classifier"""
    from synthdata import generate_dataset

    cfg = build_config({
        **TINY_SETTINGS,
        "image_size": 32,
        "block_channels": (8, 16, 16),
        "block_strides": (2, 2, 2),
        "train_size": 256,
        "val_size": 64,
        "epochs": 5,
        "batch_size": 16,
        "out_dir": str(tmp_path / "run"),
    })
    dataset = generate_dataset(cfg.dataset_config(), workers=cfg.workers)
    summary = TrainingService(cfg, dataset.train.training_view(), dataset.val.training_view()).train()
    assert summary.steps == 5 * 16
    assert np.isfinite(summary.last_loss.total)
    assert summary.final_val_accuracy is not None


@pytest.fixture(scope="module")
def default_dataset():
    from synthdata import generate_dataset

    cfg = build_config({})
    return generate_dataset(cfg.dataset_config(), workers=cfg.workers)


@pytest.mark.slow
def test_default_configuration_accuracy(tmp_path, default_dataset):
    """Test: the default configuration reaches 95% validation exact-match accuracy"""
    cfg = build_config({"out_dir": str(tmp_path / "run")})
    summary = TrainingService(
        cfg, default_dataset.train.training_view(), default_dataset.val.training_view()
    ).train()
    assert summary.epochs_completed == cfg.epochs
    assert summary.final_val_accuracy >= 0.95


@pytest.mark.slow
def test_full_objective_not_below_baseline(tmp_path, default_dataset):
    """Test: over 3 seeds the full objective's mean mIoU and coverage are at least the baseline's"""
    cfg = build_config({"out_dir": str(tmp_path / "ablation")})
    baseline, full = AblationService(cfg, default_dataset).run_ablation(
        loss_grid(cfg, ["baseline", "full"]), [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    )
    assert baseline.status == full.status == "ok"
    assert full.miou_mean >= baseline.miou_mean
    assert full.coverage_mean >= baseline.coverage_mean
