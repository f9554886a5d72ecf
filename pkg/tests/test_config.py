"""Tests for the config module."""

from pathlib import Path

import pytest

from src.config import RunConfig, deep_merge, parse_config, profile_defaults, threads_from_env
from src.utils.constants import THREADS_ENV_VAR
from src.utils.errors import ConfigurationError

FIXTURES = Path(__file__).parent / "fixtures"


class TestProfiles:
    """Test profile defaults."""

    def test_desk_defaults(self):
        """Test the desk profile shrinks the encoder and crops."""
        cfg = RunConfig.for_profile("desk")
        assert cfg.encoder.input_dims == (32, 32, 32)
        assert cfg.encoder.embed_dim == 96
        assert cfg.crop.pad_crop_target == (40, 40, 40)
        assert len(cfg.windows) == 3

    def test_full_defaults(self):
        """Test the full profile keeps the 96^3 / patch 12 encoder."""
        cfg = RunConfig.for_profile("full")
        assert cfg.encoder.n_tokens == 512
        assert cfg.crop.eval_center_crop == (192, 192, 192)
        assert cfg.phantom.dims == (224, 224, 224)

    def test_unknown_profile(self):
        """Test an unknown profile is rejected."""
        with pytest.raises(ConfigurationError):
            RunConfig.for_profile("cluster")


class TestFromYaml:
    """Test YAML loading."""

    def test_sample_config(self):
        """Test file values override profile defaults and the rest survive."""
        cfg = parse_config(FIXTURES / "sample_config.yaml")
        assert cfg.profile == "desk"
        assert cfg.seed == 7
        assert cfg.log_level == "WARNING"
        assert [(w.center, w.width) for w in cfg.windows] == [(40.0, 80.0)]
        assert cfg.encoder.channels == 1
        assert cfg.encoder.depth == 2
        assert cfg.encoder.embed_dim == 96
        assert cfg.dino.total_epochs == 2
        assert cfg.dino.prototype_count == 256
        assert cfg.evaluation.n_boot == 50

    def test_profile_argument_wins(self):
        """Test an explicit profile overrides the file's profile key."""
        cfg = RunConfig.from_yaml(FIXTURES / "sample_config.yaml", profile="full")
        assert cfg.profile == "full"
        assert cfg.encoder.input_dims == (96, 96, 96)

    def test_empty_file_is_default(self, tmp_path):
        """Test an empty file gives the desk defaults."""
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert RunConfig.from_yaml(path).config_hash() == RunConfig.for_profile("desk").config_hash()

    def test_unknown_top_level_key(self, tmp_path):
        """Test misspelled keys are named in the error."""
        path = tmp_path / "bad.yaml"
        path.write_text("learningrate: 0.1\n")
        with pytest.raises(ConfigurationError, match="unknown key 'learningrate'"):
            RunConfig.from_yaml(path)

    def test_unknown_nested_key(self, tmp_path):
        """Test nested unknown keys carry their dotted path."""
        path = tmp_path / "bad.yaml"
        path.write_text("dino:\n  learningrate: 0.1\n")
        with pytest.raises(ConfigurationError, match="unknown key 'dino.learningrate'"):
            RunConfig.from_yaml(path)

    def test_invalid_value(self, tmp_path):
        """Test out-of-range values are reported by key."""
        path = tmp_path / "bad.yaml"
        path.write_text("seed: -1\n")
        with pytest.raises(ConfigurationError, match="invalid value for 'seed'"):
            RunConfig.from_yaml(path)

    def test_channel_mismatch(self, tmp_path):
        """Test the encoder channel count must match the windows."""
        path = tmp_path / "bad.yaml"
        path.write_text("windows: brain\n")
        with pytest.raises(ConfigurationError, match="encoder.channels"):
            RunConfig.from_yaml(path)

    def test_unknown_window_preset(self, tmp_path):
        """Test an unknown preset name is rejected."""
        path = tmp_path / "bad.yaml"
        path.write_text("windows: lung\n")
        with pytest.raises(ConfigurationError):
            RunConfig.from_yaml(path)

    def test_missing_file(self):
        """Test a missing file raises ConfigurationError."""
        with pytest.raises(ConfigurationError, match="not found"):
            RunConfig.from_yaml("/nonexistent/config.yaml")

    def test_invalid_yaml(self, tmp_path):
        """Test malformed YAML raises ConfigurationError."""
        path = tmp_path / "bad.yaml"
        path.write_text("seed: [1, 2\n")
        with pytest.raises(ConfigurationError, match="Invalid YAML"):
            RunConfig.from_yaml(path)

    def test_non_mapping(self, tmp_path):
        """Test a YAML list is rejected."""
        path = tmp_path / "bad.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigurationError, match="mapping"):
            RunConfig.from_yaml(path)


class TestSerialisation:
    """Test YAML export and hashing."""

    def test_yaml_round_trip(self, tmp_path):
        """Test an exported config reloads to the same hash."""
        cfg = parse_config(FIXTURES / "sample_config.yaml")
        cfg.to_yaml(tmp_path / "effective.yaml")
        assert RunConfig.from_yaml(tmp_path / "effective.yaml").config_hash() == cfg.config_hash()

    def test_hash_tracks_values(self):
        """Test the hash changes with any value."""
        a = RunConfig.for_profile("desk", {"seed": 1})
        b = RunConfig.for_profile("desk", {"seed": 2})
        assert a.config_hash() != b.config_hash()
        assert len(a.config_hash()) == 64

    def test_to_dict_is_json_ready(self):
        """Test paths and tuples dump to plain JSON types."""
        data = RunConfig.for_profile("desk").to_dict()
        assert data["output_dir"] == "runs"
        assert data["crop"]["model_input"] == [32, 32, 32]


class TestHelpers:
    """Test merge and environment helpers."""

    def test_deep_merge_leaves_base(self):
        """Test merging copies instead of mutating."""
        base = {"a": {"b": 1, "c": 2}}
        merged = deep_merge(base, {"a": {"b": 3}})
        assert merged == {"a": {"b": 3, "c": 2}}
        assert base == {"a": {"b": 1, "c": 2}}

    def test_full_profile_only_sets_phantom(self):
        """Test the full profile relies on the model defaults."""
        assert set(profile_defaults("full")) == {"phantom"}

    def test_threads_from_env(self, monkeypatch):
        """Test a positive integer is read from the environment."""
        monkeypatch.setenv(THREADS_ENV_VAR, "4")
        assert threads_from_env() == 4

    def test_threads_unset(self, monkeypatch):
        """Test an unset variable means no override."""
        monkeypatch.setenv(THREADS_ENV_VAR, "")
        assert threads_from_env() is None

    @pytest.mark.parametrize("raw", ["four", "0", "-2"])
    def test_threads_invalid(self, monkeypatch, raw):
        """Test non-positive or non-integer values are rejected."""
        monkeypatch.setenv(THREADS_ENV_VAR, raw)
        with pytest.raises(ConfigurationError):
            threads_from_env()
