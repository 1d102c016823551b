import csv
import math

import pytest

from moe_lrc.config import ConfigError, validate_config
from moe_lrc.moe import ForwardConfig, build_trace, evaluate_fidelity, gen_synthetic_model, gen_tokens
from moe_lrc.pipeline import (
    THREADS_ENV,
    compress_model,
    load_allocation_json,
    max_workers,
    run_simulate,
    run_stats,
    run_gen,
    save_allocation_json,
    uniform_allocation,
    write_csv,
)
from moe_lrc.quant import QuantConfig, dequantize, quantize
from moe_lrc.ranks import allocate_ranks, kurtosis_profile
from moe_lrc.simulate import ModelDims, SystemConfig, TransferPlan, simulate


class TestWorkerCap:
    def test_env_caps_workers(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "1")
        assert max_workers() == 1

    def test_invalid_env_rejected(self, monkeypatch):
        monkeypatch.setenv(THREADS_ENV, "lots")
        with pytest.raises(ConfigError):
            max_workers()

    def test_default_bounded(self, monkeypatch):
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert 1 <= max_workers() <= 8


class TestCsvFormat:
    def test_nine_significant_digits(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, ["a", "b"], [{"a": 1 / 3, "b": 123456789012.0}])
        content = p.read_text().splitlines()
        assert content[0] == "a,b"
        assert content[1] == "0.333333333,1.23456789e+11"

    def test_ints_and_strings_pass_through(self, tmp_path):
        p = tmp_path / "t.csv"
        write_csv(p, ["x", "y"], [{"x": 42, "y": "w1"}])
        assert p.read_text().splitlines()[1] == "42,w1"


class TestAllocationJson:
    def test_round_trip(self, tmp_path):
        model = gen_synthetic_model(seed=0, hidden=16, ffn=32, num_layers=2,
                                    num_experts=3, top_k=1,
                                    tail_dofs=(3.0, math.inf), router_skew=1.0)
        profile = kurtosis_profile(model)
        alloc = allocate_ranks(profile, avg_budget=16)
        p = tmp_path / "alloc.json"
        save_allocation_json(alloc, profile, p)
        loaded = load_allocation_json(p)
        assert loaded.ranks == alloc.ranks
        assert loaded.buckets == alloc.buckets
        assert loaded.avg_budget == alloc.avg_budget

    def test_allocation_backed_plan(self, tmp_path):
        """A simulate plan can point at the compress-stage allocation table."""
        model = gen_synthetic_model(seed=1, hidden=16, ffn=32, num_layers=2,
                                    num_experts=4, top_k=2, router_skew=1.4)
        profile = kurtosis_profile(model)
        alloc = allocate_ranks(profile, avg_budget=16)
        alloc_path = tmp_path / "alloc.json"
        save_allocation_json(alloc, profile, alloc_path)

        trace = build_trace(model, ForwardConfig(top_k=2, top_n=1), 4, seed=2)
        dims = ModelDims(hidden=128, ffn=256, num_layers=2, num_experts=4, top_k=2)
        plan = TransferPlan(name="alloc", expert_bits=2, top_n=1,
                            allocation=load_allocation_json(alloc_path))
        rep = simulate(trace, plan, SystemConfig(), dims, output_len=4,
                       include_prefill=False)
        assert rep.total_bytes_moved > 0

    def test_run_simulate_with_allocation_path(self, tmp_path):
        model = gen_synthetic_model(seed=3, hidden=16, ffn=32, num_layers=2,
                                    num_experts=4, top_k=2, router_skew=1.4)
        profile = kurtosis_profile(model)
        alloc = allocate_ranks(profile, avg_budget=16)
        alloc_path = tmp_path / "alloc.json"
        save_allocation_json(alloc, profile, alloc_path)
        trace = build_trace(model, ForwardConfig(top_k=2, top_n=1), 4, seed=4)
        trace_path = tmp_path / "trace.jsonl"
        trace.to_jsonl(trace_path)

        cfg = validate_config(
            {
                "simulate": {
                    "dims": {"hidden": 128, "ffn": 256, "num_layers": 2,
                             "num_experts": 4, "top_k": 2},
                    "plans": [
                        {"name": "fp16", "expert_bits": 16},
                        {"name": "int2-alloc", "expert_bits": 2, "top_n": 1,
                         "allocation_path": str(alloc_path)},
                    ],
                    "output_lens": [4],
                }
            }
        )
        result = run_simulate(cfg, trace_path, tmp_path / "out")
        assert result["rows"] == 2
        with open(result["sim_csv"]) as f:
            rows = list(csv.DictReader(f))
        assert {r["plan"] for r in rows} == {"fp16", "int2-alloc"}


class TestLosslessArtifacts:
    def test_on_grid_model_has_zero_quantized_error(self):
        """Snapping weights onto the quantization grid makes quantized
        forwards exact (round-trip idempotence at the model level)."""
        model = gen_synthetic_model(seed=5, hidden=16, ffn=32, num_layers=1,
                                    num_experts=3, top_k=2, router_skew=1.0)
        qcfg = QuantConfig(bits=4, group_size=16, hqq_iters=0)
        for layer in model.layers:
            for e in layer.experts + layer.shared_experts:
                e.w1 = dequantize(quantize(e.w1, qcfg))
                e.w3 = dequantize(quantize(e.w3, qcfg))
                e.w2 = dequantize(quantize(e.w2, qcfg))
        profile = kurtosis_profile(model)
        cm = compress_model(model, qcfg, uniform_allocation(profile, 0), profile)
        tokens = gen_tokens(6, 16, 10)
        rep = evaluate_fidelity(model, cm, tokens, ForwardConfig(top_k=2, top_n=0))
        assert rep.mean_rel_err["quantized"] <= 1e-9
        assert rep.mean_rel_err["compensated"] <= 1e-9


class TestStageSummaries:
    def test_stats_summary_fields(self, tmp_path):
        cfg = validate_config(
            {"model": {"hidden": 16, "ffn": 32, "num_layers": 1, "num_experts": 4,
                       "top_k": 2},
             "quant": {"hqq_iters": 0},
             "forward": {"top_n": 1, "num_tokens": 6}}
        )
        gen = run_gen(cfg, tmp_path)
        stats = run_stats(cfg, gen["model_path"], tmp_path)
        assert 0.0 < stats["top1_mean_score"] <= 1.0
        with open(stats["routing_csv"]) as f:
            rows = list(csv.DictReader(f))
        agg = [r for r in rows if r["layer"] == "-1"]
        assert len(agg) == 4  # one row per score position
        total = sum(float(r["mean_score"]) for r in agg)
        assert total == pytest.approx(1.0, abs=1e-6)
