"""Tests for config_manager module."""

import sys
from pathlib import Path

import pytest

from robustgen.config_manager import (
    SEED_ENV_VAR,
    ManifestError,
    RunManifest,
    deep_merge,
    get_config_dir,
    get_config_path,
    load_bundled_config,
    load_manifest,
    load_user_config,
    manifest_hash,
)
from robustgen.measures import MeasureSettings
from robustgen.trainer import TEACHER_NETWORK


@pytest.fixture
def no_user_config(tmp_path, monkeypatch):
    monkeypatch.setattr(
        "robustgen.config_manager.get_config_path",
        lambda: tmp_path / "nonexistent" / "config.yaml",
    )
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)


class TestConfigPaths:
    """Test configuration path functions."""

    def test_get_config_dir_returns_path(self):
        """get_config_dir should return a Path object."""
        config_dir = get_config_dir()
        assert isinstance(config_dir, Path)
        if sys.platform == "win32":
            assert config_dir.name == "robustgen"
        else:
            assert config_dir.name == ".robustgen"

    def test_get_config_path_returns_yaml_path(self):
        config_path = get_config_path()
        assert config_path.name == "config.yaml"
        assert config_path.parent == get_config_dir()

    def test_windows_uses_appdata(self, monkeypatch):
        """On Windows, should use APPDATA directory."""
        monkeypatch.setattr(sys, "platform", "win32")
        monkeypatch.setenv("APPDATA", "C:\\Users\\Test\\AppData\\Roaming")

        from robustgen import config_manager

        config_dir = config_manager.get_config_dir()
        assert "AppData" in str(config_dir) or "robustgen" in str(config_dir)

    def test_unix_uses_home_dotfile(self, monkeypatch):
        monkeypatch.setattr(sys, "platform", "darwin")

        from robustgen import config_manager

        assert config_manager.get_config_dir().name == ".robustgen"


class TestLoadUserConfig:
    """Test load_user_config function."""

    def test_returns_none_when_no_config(self, tmp_path, monkeypatch):
        monkeypatch.setattr(
            "robustgen.config_manager.get_config_path",
            lambda: tmp_path / "nonexistent" / "config.yaml",
        )
        assert load_user_config() is None

    def test_loads_valid_yaml(self, tmp_path, monkeypatch):
        config_file = tmp_path / "config.yaml"
        config_file.write_text(
            """seeds:
  num_seeds: 3
training:
  max_epochs: 50
"""
        )
        monkeypatch.setattr("robustgen.config_manager.get_config_path", lambda: config_file)

        result = load_user_config()
        assert result["seeds"]["num_seeds"] == 3
        assert result["training"]["max_epochs"] == 50

    def test_returns_none_on_invalid_yaml(self, tmp_path, monkeypatch):
        """Should return None if YAML is invalid."""
        config_file = tmp_path / "config.yaml"
        config_file.write_text("invalid: yaml: content: [")
        monkeypatch.setattr("robustgen.config_manager.get_config_path", lambda: config_file)

        assert load_user_config() is None


class TestManifest:
    """Test manifest resolution and validation."""

    def test_bundled_manifest_is_valid(self, no_user_config):
        manifest = load_manifest()
        assert manifest.grid["depth"] == [2, 3, 4, 5]
        assert manifest.datasets["teacher"].kind == TEACHER_NETWORK
        assert manifest.num_seeds == 10
        assert manifest.measures == MeasureSettings()
        assert manifest.regression_family == "single_axis_varies"
        assert len(manifest.hash) == 16

    def test_explicit_file_overrides(self, tmp_path, no_user_config):
        path = tmp_path / "small.yaml"
        path.write_text(
            """grid:
  depth: [1, 2]
seeds:
  num_seeds: 2
"""
        )
        manifest = load_manifest(path)
        assert manifest.grid["depth"] == [1, 2]
        assert manifest.grid["width"] == [16, 32, 64]
        assert manifest.num_seeds == 2

    def test_user_config_sits_between(self, tmp_path, monkeypatch):
        user_file = tmp_path / "user.yaml"
        user_file.write_text("seeds:\n  num_seeds: 4\n  master_seed: 9\n")
        monkeypatch.setattr("robustgen.config_manager.get_config_path", lambda: user_file)
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        explicit = tmp_path / "run.yaml"
        explicit.write_text("seeds:\n  num_seeds: 5\n")

        manifest = load_manifest(explicit)
        assert manifest.num_seeds == 5
        assert manifest.master_seed == 9

    def test_seed_environment_override(self, no_user_config, monkeypatch):
        base = load_manifest()
        monkeypatch.setenv(SEED_ENV_VAR, "42")
        manifest = load_manifest()
        assert manifest.master_seed == 42
        assert manifest.hash != base.hash

    def test_settings_hash_qualifies_the_manifest_hash(self, no_user_config):
        manifest = load_manifest()
        default = manifest.settings_hash(n_eff_min=12.0, noise_filter=True)
        assert default.startswith(f"{manifest.hash}-")
        assert default == manifest.settings_hash(noise_filter=True, n_eff_min=12.0)
        assert manifest.settings_hash(n_eff_min=2.0, noise_filter=True) != default

    def test_bad_seed_environment_value(self, no_user_config, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, "forty-two")
        with pytest.raises(ManifestError):
            load_manifest()

    def test_missing_file(self, tmp_path, no_user_config):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path, no_user_config):
        path = tmp_path / "bad.yaml"
        path.write_text("grid: [unclosed\n")
        with pytest.raises(ManifestError):
            load_manifest(path)

    @pytest.mark.parametrize(
        "override",
        [
            {"grid": {"depth": []}},
            {"grid": {"momentum": [0.9]}},
            {"grid": {"dataset_id": ["missing"]}},
            {"datasets": {"teacher": {"kind": "imagenet"}}},
            {"training": {"weight_decay": 0.1}},
            {"regression": {"family": "per_seed"}},
            {"evaluation": {"axes": ["optimizer"]}},
            {"seeds": {"num_seeds": 0}},
        ],
    )
    def test_invalid_manifests(self, override):
        data = deep_merge(load_bundled_config(), override)
        with pytest.raises(ManifestError):
            RunManifest.from_dict(data)


class TestManifestHash:
    """Test manifest_hash."""

    def test_key_order_does_not_matter(self):
        assert manifest_hash({"a": 1, "b": [1, 2]}) == manifest_hash({"b": [1, 2], "a": 1})

    def test_locations_are_not_hashed(self):
        data = load_bundled_config()
        moved = deep_merge(data, {"store": {"path": "elsewhere.jsonl"}, "output": {"dir": "x"}})
        assert manifest_hash(moved) == manifest_hash(data)

    def test_results_change_the_hash(self):
        data = load_bundled_config()
        assert manifest_hash(deep_merge(data, {"seeds": {"num_seeds": 3}})) != manifest_hash(data)


class TestDeepMerge:
    """Test deep_merge."""

    def test_nested_mappings_merge_and_lists_replace(self):
        base = {"grid": {"depth": [1, 2], "width": [4]}, "seeds": {"num_seeds": 3}}
        merged = deep_merge(base, {"grid": {"depth": [5]}})
        assert merged == {"grid": {"depth": [5], "width": [4]}, "seeds": {"num_seeds": 3}}
        assert base["grid"]["depth"] == [1, 2]
