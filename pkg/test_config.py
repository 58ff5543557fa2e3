"""Tests for experiment configs and environment settings"""

import json
import os

import pytest

from idslab.config import load_config, load_settings, parse_config, resolve_config, with_seed
from idslab.errors import ConfigError
from idslab.fpr import INNER_OMEGA

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")


def lines(*rows: str) -> str:
    return "\n".join(rows)


class TestParseConfig:

    def test_minimal_defaults(self):
        cfg = parse_config('{"schema": 1}')
        assert cfg.name == "experiment"
        assert not cfg.is_grid and cfg.world.kind == "two-mode"
        assert cfg.methods == ("ids",)
        dcfg = cfg.distill_config("ids")
        assert (dcfg.omega, dcfg.steps, dcfg.lr, dcfg.t_min, dcfg.t_max) == (7.5, 200, 0.05, 0.05, 0.95)
        assert (cfg.fpr.lam, cfg.fpr.n_iters, cfg.fpr.metric) == (1.0, 3, "euclidean")

    def test_grid_learning_rate_default(self):
        cfg = parse_config('{"schema": 1, "shapes": {"side": 12, "object_size": 4.0}}')
        assert cfg.is_grid
        assert cfg.distill_config("dds").lr == 0.1

    def test_explicit_learning_rate_wins(self):
        cfg = parse_config('{"schema": 1, "shapes": {}, "distill": {"lr": 0.02}}')
        assert cfg.distill_config("dds").lr == 0.02

    def test_schema_mismatch(self):
        with pytest.raises(ConfigError, match="schema"):
            parse_config('{"schema": 2}')

    def test_missing_schema(self):
        with pytest.raises(ConfigError):
            parse_config('{"name": "x"}')

    def test_unknown_key_reports_line(self):
        text = lines('{', '  "schema": 1,', '  "distill": {', '    "steps": 10,', '    "stpes": 20', '  }', '}')
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.line == 5
        assert "unknown key" in str(info.value)
        assert str(info.value).startswith("line 5:")

    def test_wrong_type_reports_line(self):
        text = lines('{', '  "schema": 1,', '  "seeds": "many"', '}')
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.line == 3

    def test_error_inside_task_list(self):
        text = lines('{', '  "schema": 1,', '  "tasks": [', '    {"source_label": 0},',
                     '    {"source_label": -1}', '  ]', '}')
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.line == 5

    def test_invalid_json(self):
        with pytest.raises(ConfigError) as info:
            parse_config('{\n  "schema": 1,\n}')
        assert info.value.line is not None

    def test_world_and_shapes_are_exclusive(self):
        with pytest.raises(ConfigError):
            parse_config('{"schema": 1, "world": {}, "shapes": {}}')

    def test_ssim_needs_grid(self):
        with pytest.raises(ConfigError):
            parse_config('{"schema": 1, "fpr": {"metric": "ssim"}}')
        assert parse_config('{"schema": 1, "shapes": {}, "fpr": {"metric": "ssim"}}').fpr.metric == "ssim"

    def test_trained_backend_needs_path(self):
        with pytest.raises(ConfigError):
            parse_config('{"schema": 1, "backend": {"kind": "trained"}}')

    def test_bad_time_range(self):
        with pytest.raises(ConfigError):
            parse_config('{"schema": 1, "distill": {"t_min": 0.5, "t_max": 0.2}}')
        with pytest.raises(ConfigError):
            parse_config('{"schema": 1, "ablation": {"t_ranges": [[0.3, 1.5]]}}')

    def test_even_window(self):
        with pytest.raises(ConfigError):
            parse_config('{"schema": 1, "shapes": {}, "metrics": {"window": 4}}')

    def test_custom_modes(self):
        text = json.dumps({"schema": 1, "world": {"kind": "modes", "dimension": 1, "modes": [
            {"label": 0, "center": [-1.0]}, {"label": 3, "center": [1.0], "sigma": 0.2}]}})
        cfg = parse_config(text)
        assert [m.label for m in cfg.world.modes] == [0, 3]
        assert cfg.world.modes[0].sigma == 0.3

    def test_shipped_configs_parse(self):
        for name in sorted(os.listdir(CONFIG_DIR)):
            cfg = load_config(os.path.join(CONFIG_DIR, name))
            assert cfg.base_dir == CONFIG_DIR


class TestResolveConfig:

    def test_materializes_defaults(self):
        doc = resolve_config(parse_config('{"schema": 1, "name": "demo"}'))
        assert doc["name"] == "demo"
        assert doc["distill"]["lr"] == 0.05
        assert doc["fpr"] == {"lambda": 1.0, "n_iters": 3, "metric": "euclidean", "omega": INNER_OMEGA,
                              "update": "z_t"}
        assert doc["world"]["kind"] == "two-mode"
        assert "shapes" not in doc

    def test_null_inner_guidance_shares_the_outer_scale(self):
        cfg = parse_config('{"schema": 1, "fpr": {"omega": null}}')
        assert cfg.fpr.omega is None
        assert resolve_config(cfg)["fpr"]["omega"] is None

    def test_resolved_document_parses_back(self):
        cfg = parse_config('{"schema": 1, "seeds": 3, "methods": ["dds", "ids"]}')
        again = parse_config(json.dumps(resolve_config(cfg)))
        assert resolve_config(again) == resolve_config(cfg)

    def test_seed_override(self):
        cfg = parse_config('{"schema": 1, "seed": 3}')
        assert with_seed(cfg, None).seed == 3
        assert with_seed(cfg, 11).seed == 11
        with pytest.raises(ConfigError):
            with_seed(cfg, -1)


class TestSettings:

    def test_environment(self, monkeypatch):
        monkeypatch.setenv("IDSLAB_OUT_DIR", "/tmp/idslab-out")
        monkeypatch.setenv("IDSLAB_LOG_LEVEL", "debug")
        monkeypatch.setenv("IDSLAB_JOBS", "4")
        settings = load_settings()
        assert (settings.out_dir, settings.log_level, settings.jobs) == ("/tmp/idslab-out", "DEBUG", 4)

    def test_bad_jobs_value(self, monkeypatch):
        monkeypatch.setenv("IDSLAB_JOBS", "lots")
        assert load_settings().jobs == 1
