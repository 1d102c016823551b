import json
import math

import pytest

from moe_lrc.config import ConfigError, RunConfig, apply_preset, load_config, validate_config


class TestDefaults:
    def test_empty_config_valid(self):
        cfg = validate_config({})
        assert cfg.quant.bits == 2
        assert cfg.allocation.buckets == [0, 16, 32, 128, 256, 512, 1024]
        assert cfg.simulate.input_len == 256
        assert cfg.resolved_forward_top_k() == 2

    def test_router_skew_presets_resolve(self):
        cfg = validate_config({"model": {"router_skew": "mixtral-like"}})
        assert cfg.model.resolved_skew() == pytest.approx(1.4)
        cfg = validate_config({"model": {"router_skew": 0.5}})
        assert cfg.model.resolved_skew() == 0.5

    def test_tail_dofs_accept_inf_strings(self):
        cfg = validate_config({"model": {"tail_dofs": [3, "inf", 10.0]}})
        assert cfg.model.resolved_dofs() == (3.0, math.inf, 10.0)


@pytest.mark.parametrize(
    "data,field",
    [
        ({"quant": {"bits": 5}}, "bits"),
        ({"quant": {"group_size": 0}}, "group_size"),
        ({"quant": {"hqq_iters": -1}}, "hqq_iters"),
        ({"quant": {"hqq_shrink_p": 0.0}}, "hqq_shrink_p"),
        ({"model": {"hidden": 0}}, "hidden"),
        ({"model": {"num_shared": -1}}, "num_shared"),
        ({"model": {"num_experts": 2, "top_k": 3}}, "top_k"),
        ({"forward": {"top_n": 5}}, "top_n"),
        ({"forward": {"num_tokens": 0}}, "num_tokens"),
        ({"allocation": {"avg_budget": -1}}, "avg_budget"),
        ({"allocation": {"buckets": [16, 32]}}, "buckets"),
        ({"allocation": {"uniform_rank": -4}}, "uniform_rank"),
        ({"simulate": {"plans": [{"name": "p", "expert_bits": 5}]}}, "expert_bits"),
        ({"simulate": {"plans": [{"name": "p", "cache_policy": "lru"}]}},
         "cache_budget_bytes"),
        ({"simulate": {"plans": [{"name": "a"}, {"name": "a"}]}}, "unique"),
        ({"simulate": {"output_lens": [0]}}, "output_lens"),
        ({"simulate": {"input_len": -1}}, "input_len"),
    ],
)
def test_rejections_name_the_field(data, field):
    with pytest.raises(ConfigError) as exc:
        validate_config(data)
    assert field in str(exc.value)


class TestRuntimeResolution:
    def test_bad_dof_rejected_on_resolve(self):
        cfg = validate_config({"model": {"tail_dofs": [2.0]}})
        with pytest.raises(ConfigError, match="tail_dofs"):
            cfg.model.resolved_dofs()

    def test_unknown_router_preset(self):
        cfg = validate_config({"model": {"router_skew": "nope"}})
        with pytest.raises(ConfigError, match="router_skew"):
            cfg.model.resolved_skew()

    def test_unknown_dims_preset(self):
        cfg = validate_config({"simulate": {"dims_preset": "nope"}})
        with pytest.raises(ConfigError, match="dims_preset"):
            cfg.simulate.resolved_dims()

    def test_explicit_dims_win_over_preset(self):
        cfg = validate_config(
            {"simulate": {"dims": {"hidden": 8, "ffn": 16, "num_layers": 1,
                                   "num_experts": 2, "top_k": 1}}}
        )
        assert cfg.simulate.resolved_dims().hidden == 8


class TestPreset:
    def test_apply_preset(self):
        cfg = apply_preset(RunConfig(), "deepseek-16b")
        assert cfg.model.num_experts == 64
        assert cfg.model.num_shared == 2
        assert cfg.model.top_k == 6
        assert cfg.simulate.dims_preset == "deepseek-16b"
        assert cfg.model.router_skew == "deepseek-like"

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            apply_preset(RunConfig(), "llama-405b")


class TestLoadConfig:
    def test_file_seed_and_preset(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 1, "model": {"hidden": 16, "ffn": 16}}))
        cfg = load_config(p, preset="mixtral-8x7b", seed=42)
        assert cfg.seed == 42
        assert cfg.model.hidden == 16
        assert cfg.model.num_layers == 32

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.json")

    def test_config_preset_field_applies(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"preset": "mixtral-8x22b"}))
        cfg = load_config(p)
        assert cfg.model.num_layers == 56
