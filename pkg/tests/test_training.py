"""Tests for the optimizer, schedule, checkpoints and the training loop."""

import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from hmfn.config import RESOLVED_CONFIG_NAME, config_hash
from hmfn.dataset import VERSION_DIR, load_dataset
from hmfn.errors import CheckpointError, ContractError, DatasetValidationError
from hmfn.evaluation import load_results
from hmfn.model import build_model, state_arrays
from hmfn.numerics import Tensor, precision
from hmfn.training import (
    BEST_DIR,
    CHECKPOINT_META_NAME,
    LAST_DIR,
    METRICS_NAME,
    AdamState,
    adam_step,
    global_grad_norm,
    infer,
    load_checkpoint,
    one_cycle_lr,
    save_checkpoint,
    train,
)
from tests.conftest import tiny_config


def _param(*values):
    return {"w": Tensor(np.array(values, dtype=np.float64), requires_grad=True)}


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    """A two-step run on the tiny dataset."""
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(data_root=str(tiny_dataset), output_dir=str(out), max_steps=2)
    return cfg, train(cfg)


class TestAdam:
    """Tests for the AdamW step."""

    def test_first_step(self):
        """The first bias-corrected step moves by lr times sign(g)."""
        params = _param(1.0)
        state = AdamState.zeros_like(params)
        stats = adam_step(params, {"w": np.array([0.5])}, state, lr=0.1, weight_decay=0.0)
        assert params["w"].data[0] == pytest.approx(0.9, abs=1e-6)
        assert state.step == 1
        assert not stats.skipped

    def test_weight_decay_is_decoupled(self):
        """Decay shrinks the weight directly: 1 - lr*wd - lr."""
        params = _param(1.0)
        adam_step(params, {"w": np.array([0.5])}, AdamState.zeros_like(params), lr=0.1, weight_decay=0.01)
        assert params["w"].data[0] == pytest.approx(0.899, abs=1e-6)

    def test_clipping(self):
        """A gradient of norm 50 is scaled to the clip norm before the moments."""
        params = _param(0.0, 0.0)
        state = AdamState.zeros_like(params)
        stats = adam_step(params, {"w": np.array([30.0, 40.0])}, state, lr=0.01, clip_norm=10.0)
        assert stats.grad_norm == pytest.approx(50.0)
        assert stats.clip_scale == pytest.approx(0.2)
        np.testing.assert_allclose(state.m["w"], [0.6, 0.8])

    def test_non_finite_gradient_skips(self):
        """NaN gradients leave weights and moments alone."""
        params = _param(1.0)
        state = AdamState.zeros_like(params)
        stats = adam_step(params, {"w": np.array([np.nan])}, state, lr=0.1)
        assert stats.skipped
        assert params["w"].data[0] == 1.0
        assert state.step == 0

    def test_missing_moments(self):
        with pytest.raises(ContractError, match="w"):
            adam_step(_param(1.0), {"w": np.array([1.0])}, AdamState(), lr=0.1)

    def test_global_norm(self):
        assert global_grad_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == pytest.approx(5.0)


class TestSchedule:
    """Tests for the one-cycle learning rate."""

    def test_key_points(self):
        """base/10 at the start, base at 40%, base/1000 at the end."""
        assert one_cycle_lr(0, 100, 1e-3) == pytest.approx(1e-4)
        assert one_cycle_lr(40, 100, 1e-3) == pytest.approx(1e-3)
        assert one_cycle_lr(100, 100, 1e-3) == pytest.approx(1e-6)
        assert one_cycle_lr(250, 100, 1e-3) == pytest.approx(1e-6)

    def test_shape(self):
        """Rises to the peak, then falls."""
        rates = [one_cycle_lr(s, 100, 1e-3) for s in range(101)]
        assert all(a <= b for a, b in zip(rates[:40], rates[1:41]))
        assert all(a >= b for a, b in zip(rates[40:], rates[41:]))

    def test_midpoint_of_warmup(self):
        """Cosine warmup is halfway at 20%."""
        assert one_cycle_lr(20, 100, 1e-3) == pytest.approx((1e-4 + 1e-3) / 2)

    @pytest.mark.parametrize(("step", "total"), [(0, 0), (-1, 10)])
    def test_invalid(self, step, total):
        with pytest.raises(ContractError):
            one_cycle_lr(step, total, 1e-3)


class TestCheckpoint:
    """Tests for checkpoint files."""

    def test_round_trip(self, tmp_path):
        """Float32 weights, moments, step and config come back unchanged."""
        cfg = tiny_config()
        with precision(cfg.precision):
            model = build_model(cfg)
        state = AdamState.zeros_like(model.params)
        state.step = 3
        state.m["encoder0.weight"] += 0.25
        save_checkpoint(tmp_path, model, state, step=5)
        loaded, loaded_state, meta = load_checkpoint(tmp_path)
        for name, arr in state_arrays(model).items():
            np.testing.assert_array_equal(loaded.params[name].data, arr)
        np.testing.assert_allclose(loaded_state.m["encoder0.weight"], 0.25)
        assert loaded_state.step == 3
        assert meta["step"] == 5
        assert meta["config_hash"] == config_hash(cfg)
        assert loaded.cfg == cfg

    def test_precision_follows_config(self, tmp_path):
        """Weights are rebuilt in the precision the config names."""
        save_checkpoint(tmp_path, build_model(tiny_config(precision="float64")))
        loaded, _, _ = load_checkpoint(tmp_path)
        assert loaded.params["encoder0.weight"].data.dtype == np.float64

    def test_tampered_config(self, tmp_path):
        """A config edited after saving no longer matches its hash."""
        save_checkpoint(tmp_path, build_model(tiny_config()))
        path = tmp_path / CHECKPOINT_META_NAME
        meta = json.loads(path.read_text())
        meta["config"]["seed"] = 99
        path.write_text(json.dumps(meta))
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(tmp_path)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)

    def test_corrupt_descriptor(self, tmp_path):
        save_checkpoint(tmp_path, build_model(tiny_config()))
        (tmp_path / CHECKPOINT_META_NAME).write_text("{")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)


class TestTrain:
    """Tests for the training loop and inference."""

    def test_run_outputs(self, trained):
        """A run writes its config, metrics, best and last checkpoints."""
        cfg, result = trained
        out = result.output_dir
        assert result.steps == 2
        assert len(result.step_losses) == 2
        assert all(math.isfinite(v) for v in result.step_losses)
        assert (out / RESOLVED_CONFIG_NAME).exists()
        assert (out / BEST_DIR / CHECKPOINT_META_NAME).exists()
        assert (out / LAST_DIR / CHECKPOINT_META_NAME).exists()
        assert result.best_checkpoint == out / BEST_DIR
        assert result.best_val_map is not None and 0.0 <= result.best_val_map <= 1.0

    def test_metrics_log(self, trained):
        """One JSON line per step plus one per epoch."""
        _, result = trained
        records = [json.loads(line) for line in (result.output_dir / METRICS_NAME).read_text().splitlines()]
        steps = [r for r in records if r["type"] == "step"]
        epochs = [r for r in records if r["type"] == "epoch"]
        assert [r["step"] for r in steps] == [1, 2]
        assert steps[0]["lr"] == pytest.approx(1e-4)
        assert len(epochs) == 1 and "val_map" in epochs[0]

    def test_checkpoint_step(self, trained):
        _, result = trained
        _, state, meta = load_checkpoint(result.output_dir / LAST_DIR)
        assert meta["step"] == 2
        assert state.step == 2

    def test_infer(self, trained, tmp_path):
        """Inference writes detections for every frame of the split."""
        cfg, result = trained
        dets, path = infer(result.best_checkpoint, split="test", out=tmp_path / "dets.json")
        tables = load_dataset(cfg.data_root)
        loaded, meta = load_results(path)
        assert set(loaded) == set(dets)
        assert len(dets) == len(tables.sample) // len(tables.scene)
        assert meta["split"] == "test"
        assert meta["config_hash"] == config_hash(cfg)
        assert all(b.score is not None and b.score >= cfg.score_threshold for v in dets.values() for b in v)

    def test_without_validation(self, tiny_dataset, tmp_path):
        """With val_split 'none' the lowest-loss epoch is kept."""
        cfg = tiny_config(data_root=str(tiny_dataset), val_split="none", max_steps=1)
        result = train(cfg, tmp_path)
        assert result.best_val_map is None
        assert (tmp_path / BEST_DIR / CHECKPOINT_META_NAME).exists()

    def test_invalid_dataset_stops_before_training(self, tiny_dataset, tmp_path):
        """A dataset with violations is refused before any optimizer step."""
        root = Path(shutil.copytree(tiny_dataset, tmp_path / "data"))
        path = root / VERSION_DIR / "instance.json"
        records = json.loads(path.read_text())
        records[0]["nbr_annotations"] += 1
        path.write_text(json.dumps(records))
        with pytest.raises(DatasetValidationError):
            train(tiny_config(data_root=str(root)), tmp_path / "run")
        assert not (tmp_path / "run" / METRICS_NAME).exists()
