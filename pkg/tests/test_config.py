"""Tests for run configuration, presets and scale alignment."""

import json

import pytest

from hmfn.config import (
    DEFAULT_PRESET,
    PRESETS,
    RESOLVED_CONFIG_NAME,
    RunConfig,
    check_alignment,
    config_hash,
    get_presets_summary,
    load_config,
    resolve_branch_strides,
    resolve_config,
    save_config,
)
from hmfn.errors import ConfigError, DatasetIOError
from tests.conftest import tiny_config


class TestRunConfig:
    """Tests for RunConfig validation and serialization."""

    @pytest.mark.parametrize(
        "overrides",
        [
            {"scales": ()},
            {"scales": (0.05, 0.075, 0.06)},
            {"scales": (0.05, -0.1)},
            {"epochs": 0},
            {"max_steps": 0},
            {"precision": "float16"},
            {"upsample_mode": "cubic"},
            {"learning_rate": 0.0},
            {"workers": 0},
            {"half_extent": 0.0},
        ],
    )
    def test_invalid(self, overrides):
        """Out-of-range settings are config errors."""
        with pytest.raises(ConfigError):
            RunConfig(**overrides)

    def test_derived_settings(self):
        """Ablation switches drive classes and point channels."""
        cfg = RunConfig(pedes_only=False, speed=True)
        assert cfg.class_names == ("pedestrian", "cyclist")
        assert cfg.point_channels == 6
        assert RunConfig().class_names == ("pedestrian",)
        assert RunConfig().point_channels == 4

    def test_dict_round_trip_keeps_hash(self):
        """from_dict(to_dict()) is the same config with the same hash."""
        cfg = tiny_config(seed=7)
        again = RunConfig.from_dict(json.loads(cfg.to_json()))
        assert again == cfg
        assert config_hash(again) == config_hash(cfg)
        assert len(config_hash(cfg)) == 16

    def test_hash_tracks_changes(self):
        cfg = RunConfig()
        assert config_hash(cfg.merged({"seed": 1})) != config_hash(cfg)

    def test_merged_ignores_none(self):
        """Unset flags do not override anything."""
        cfg = RunConfig(epochs=3)
        assert cfg.merged({"epochs": None}).epochs == 3

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig.from_dict({"bogus": 1})
        with pytest.raises(ConfigError, match="bogus"):
            RunConfig().merged({"bogus": 1})


class TestConfigFiles:
    """Tests for config file I/O."""

    def test_save_and_load(self, tmp_path):
        """A saved config loads back as overrides reproducing it."""
        cfg = tiny_config(max_steps=3)
        path = save_config(cfg, tmp_path / "run")
        assert path.name == RESOLVED_CONFIG_NAME
        assert RunConfig.from_dict(load_config(path)) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetIOError):
            load_config(tmp_path / "nope.json")

    @pytest.mark.parametrize("text", ["{oops", "[1, 2]"])
    def test_bad_content(self, tmp_path, text):
        """Config files hold one JSON object."""
        path = tmp_path / "cfg.json"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_config(path)


class TestPresets:
    """Tests for presets and precedence."""

    def test_default(self):
        """Without a preset the fine-first pedestrian model is used."""
        cfg = resolve_config()
        assert DEFAULT_PRESET == "hmfn"
        assert cfg.scales == (0.05, 0.075)
        assert cfg.pedes_only

    @pytest.mark.parametrize(
        ("name", "scales", "pedes_only", "speed"),
        [
            ("base", (0.075,), False, False),
            ("model1", (0.075, 0.05), False, False),
            ("model2", (0.075, 0.05), False, True),
            ("model3", (0.075,), True, False),
            ("hmfn", (0.05, 0.075), True, False),
        ],
    )
    def test_ablation_rows(self, name, scales, pedes_only, speed):
        cfg = resolve_config(name)
        assert (cfg.scales, cfg.pedes_only, cfg.speed) == (scales, pedes_only, speed)

    def test_stacking(self):
        """Presets joined by '+' apply left to right."""
        cfg = resolve_config("model1+desk")
        assert cfg.scales == (0.075, 0.05)
        assert cfg.feature_dim == PRESETS["desk"].overrides["feature_dim"]

    @pytest.mark.parametrize("name", ["nope", "hmfn+nope"])
    def test_unknown_preset(self, name):
        with pytest.raises(ConfigError, match="nope"):
            resolve_config(name)

    def test_precedence(self, tmp_path):
        """Flags beat the config file, which beats the preset."""
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"epochs": 3, "feature_dim": 8}))
        cfg = resolve_config("full", path, {"epochs": 5, "seed": None})
        assert (cfg.epochs, cfg.feature_dim, cfg.half_extent) == (5, 8, 25.2)

    def test_summary_lists_presets(self):
        summary = get_presets_summary()
        assert all(name in summary for name in PRESETS)
        assert "(default)" in summary


class TestAlignment:
    """Tests for per-scale stride resolution and grid alignment."""

    def test_fine_first_strides(self):
        """0.075 m next to a 0.05 m reference needs one extra stride-2 stage."""
        plans = resolve_branch_strides((0.05, 0.075), (1, 2, 2, 2), (16, 32, 32, 48))
        assert plans[0] == ((1, 2, 2, 2), (16, 32, 32, 48))
        assert plans[1] == ((1, 2, 2, 2, 2), (16, 32, 32, 48, 48))

    def test_coarse_first_strides(self):
        """0.05 m next to a 0.075 m reference drops the last stride."""
        plans = resolve_branch_strides((0.075, 0.05), (1, 2, 2, 2), (16, 32, 32, 48))
        assert plans[1] == ((1, 2, 2, 1), (16, 32, 32, 48))

    def test_unalignable_scale(self):
        """No power-of-two stride relates 0.07 m to a 0.4 m reference cell."""
        with pytest.raises(ConfigError, match="0.07"):
            resolve_branch_strides((0.05, 0.07), (1, 2, 2, 2), (16, 32, 32, 48))

    @pytest.mark.parametrize(
        ("preset", "dims"),
        [
            ("hmfn", [(48, 48), (16, 16)]),
            ("model1", [(32, 32), (96, 96)]),
            ("base", [(32, 32)]),
            ("hmfn+full", [(126, 126), (42, 42)]),
        ],
    )
    def test_grid_dims(self, preset, dims):
        assert check_alignment(resolve_config(preset)) == dims

    def test_tiny_config(self):
        assert check_alignment(tiny_config()) == [(24, 24), (8, 8)]

    def test_extent_breaks_alignment(self):
        """A range whose grids round differently is rejected with a hint."""
        with pytest.raises(ConfigError, match="half_extent"):
            check_alignment(RunConfig(half_extent=9.65))
