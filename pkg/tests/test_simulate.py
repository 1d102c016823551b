import pytest

from moe_lrc.moe import ForwardConfig, build_trace, gen_synthetic_model
from moe_lrc.presets import DIM_PRESETS, SYSTEM_PRESETS
from moe_lrc.simulate import (
    ModelDims,
    SimulationError,
    SystemConfig,
    TransferPlan,
    expert_comp_bytes,
    expert_weight_bytes,
    simulate,
    sweep_report,
    token_cost_gpu_only,
    token_cost_gpu_ndp,
    _LRUCache,
    _NoCache,
)

TOY_DIMS = ModelDims(hidden=256, ffn=512, num_layers=2, num_experts=8, top_k=2)

GPU = SystemConfig(name="gpu-only", pcie_bw=25e9)
NDP = SystemConfig(name="gpu-ndp", pcie_bw=25e9, ndp_enabled=True, ndp_bw=512e9,
                   ndp_capacity=512e9, ndp_flops=16e12, overlap=True)


def make_trace(num_tokens=8, layers=2, experts=8, top_k=2, seed=0):
    model = gen_synthetic_model(seed=seed, hidden=16, ffn=32, num_layers=layers,
                                num_experts=experts, top_k=top_k, router_skew=1.4)
    return build_trace(model, ForwardConfig(top_k=top_k, top_n=1), num_tokens, seed + 1)


class TestByteAccounting:
    def test_fp16_mixtral_expert_fetch_time(self):
        dims = DIM_PRESETS["mixtral-8x7b"]
        wb = expert_weight_bytes(dims, 16)
        assert wb == 352_321_536
        assert wb / 25e9 == pytest.approx(14.09e-3, rel=1e-3)

    def test_ndp_int2_expert_read_time(self):
        dims = DIM_PRESETS["mixtral-8x7b"]
        wb = expert_weight_bytes(dims, 2)
        assert wb == 44_040_192
        assert wb / 512e9 == pytest.approx(86.02e-6, rel=1e-3)

    def test_int2_fp16_ratio_exact(self):
        assert expert_weight_bytes(TOY_DIMS, 2) * 8 == expert_weight_bytes(TOY_DIMS, 16)

    def test_comp_bytes_uniform(self):
        dims = DIM_PRESETS["mixtral-8x7b"]
        plan = TransferPlan(name="p", expert_bits=2, top_n=1, rank=16)
        assert expert_comp_bytes(dims, plan, 0, 0) == 331_776


class TestLRUCache:
    def test_budget_below_one_expert_rejected(self):
        with pytest.raises(SimulationError):
            _LRUCache(budget_bytes=10, entry_bytes=100)

    def test_lru_eviction_order(self):
        cache = _LRUCache(budget_bytes=200, entry_bytes=100)
        cache.insert("a")
        cache.insert("b")
        assert cache.lookup("a")  # refresh a
        cache.insert("c")         # evicts b
        assert not cache.lookup("b")
        assert cache.lookup("a") and cache.lookup("c")

    def test_no_cache_never_hits(self):
        cache = _NoCache()
        cache.insert("a")
        assert not cache.lookup("a")


class TestTokenCostGpuOnly:
    def test_all_cached_leaves_compute_only(self):
        trace = make_trace()
        plan = TransferPlan(name="p", expert_bits=2)
        cache = _LRUCache(10**12, expert_weight_bytes(TOY_DIMS, 2))
        for layer in range(2):
            for e in range(8):
                cache.insert((layer, e))
        cost = token_cost_gpu_only(trace.records[0], plan, GPU, TOY_DIMS, cache)
        assert cost.transfer_s == 0.0
        assert cost.pcie_bytes == 0
        assert cost.compute_s > 0.0
        assert cost.hits == 2

    def test_transfer_bytes_without_cache(self):
        trace = make_trace()
        plan = TransferPlan(name="p", expert_bits=2, top_n=1, rank=32)
        cost = token_cost_gpu_only(trace.records[0], plan, GPU, TOY_DIMS, _NoCache())
        expected = 2 * expert_weight_bytes(TOY_DIMS, 2) + expert_comp_bytes(
            TOY_DIMS, plan, trace.records[0].layer, trace.records[0].selected[0]
        )
        assert cost.pcie_bytes == expected
        assert cost.transfer_s == pytest.approx(expected / 25e9)


class TestTokenCostGpuNdp:
    def test_requires_ndp(self):
        trace = make_trace()
        with pytest.raises(SimulationError):
            token_cost_gpu_ndp(trace.records[0], TransferPlan(name="p"), GPU,
                               TOY_DIMS, _NoCache())

    def test_top_n_zero_means_no_expert_pcie_traffic(self):
        trace = make_trace()
        plan = TransferPlan(name="p", expert_bits=2, top_n=0)
        cost = token_cost_gpu_ndp(trace.records[0], plan, NDP, TOY_DIMS, _NoCache())
        shuttle = 2 * 2 * TOY_DIMS.hidden * 2  # two NDP experts, in+out, fp16
        assert cost.pcie_bytes == shuttle
        assert cost.ndp_compute_s >= 2 * expert_weight_bytes(TOY_DIMS, 2) / NDP.ndp_bw

    def test_compensated_expert_moves_to_gpu(self):
        trace = make_trace()
        plan = TransferPlan(name="p", expert_bits=2, top_n=1, rank=16)
        cost = token_cost_gpu_ndp(trace.records[0], plan, NDP, TOY_DIMS, _NoCache())
        wb = expert_weight_bytes(TOY_DIMS, 2)
        cb = expert_comp_bytes(TOY_DIMS, plan, 0, 0)
        shuttle = 1 * 2 * TOY_DIMS.hidden * 2
        assert cost.pcie_bytes == wb + cb + shuttle


class TestSimulate:
    def test_doubling_pcie_halves_latency_when_transfer_bound(self):
        trace = make_trace(num_tokens=8)
        plan = TransferPlan(name="fp16", expert_bits=16)
        dims = DIM_PRESETS["mixtral-8x7b"]
        trace32 = make_trace(num_tokens=4, layers=32)
        r1 = simulate(trace32, plan, GPU, dims, output_len=4, include_prefill=False)
        fast = SystemConfig(name="gpu-fast", pcie_bw=50e9)
        r2 = simulate(trace32, plan, fast, dims, output_len=4, include_prefill=False)
        per_tok_1 = r1.decode_s / 4
        per_tok_2 = r2.decode_s / 4
        assert abs(per_tok_1 / per_tok_2 - 2.0) < 0.02

    def test_speedup_band_int2_top1_rank32(self):
        dims = DIM_PRESETS["mixtral-8x7b"]
        trace = make_trace(num_tokens=4, layers=32)
        fp16 = simulate(trace, TransferPlan(name="fp16", expert_bits=16), GPU, dims,
                        output_len=4, include_prefill=False)
        int2 = simulate(
            trace, TransferPlan(name="int2", expert_bits=2, top_n=1, rank=32), GPU,
            dims, output_len=4, include_prefill=False,
        )
        speedup = int2.tokens_per_s / fp16.tokens_per_s
        assert 6.0 <= speedup <= 8.0

    def test_compensator_traffic_share_small(self):
        dims = DIM_PRESETS["mixtral-8x7b"]
        trace = make_trace(num_tokens=4, layers=32)
        plan = TransferPlan(name="int2", expert_bits=2, top_n=1, rank=32)
        rep = simulate(trace, plan, GPU, dims, output_len=4, include_prefill=False)
        comp_bytes = 4 * 32 * expert_comp_bytes(dims, plan, 0, 0)
        assert comp_bytes / rep.total_bytes_moved < 0.02

    def test_byte_conservation_exact(self):
        trace = make_trace(num_tokens=6)
        plan = TransferPlan(name="int2", expert_bits=2, top_n=1, rank=16)
        rep = simulate(trace, plan, GPU, TOY_DIMS, output_len=6, include_prefill=False)
        wb = expert_weight_bytes(TOY_DIMS, 2)
        expected = 0
        for r in trace.records:
            expected += len(r.selected) * wb
            expected += expert_comp_bytes(TOY_DIMS, plan, r.layer, r.selected[0])
        assert rep.total_bytes_moved == expected

    def test_byte_conservation_with_cache(self):
        trace = make_trace(num_tokens=6)
        wb = expert_weight_bytes(TOY_DIMS, 2)
        plan = TransferPlan(name="int2", expert_bits=2, cache_policy="lru",
                            cache_budget_bytes=4 * wb)
        rep = simulate(trace, plan, GPU, TOY_DIMS, output_len=6, include_prefill=False)
        misses = sum(len(r.selected) for r in trace.records) - round(
            rep.cache_hit_rate * sum(len(r.selected) for r in trace.records)
        )
        assert rep.total_bytes_moved == misses * wb

    def test_monotone_in_bits(self):
        trace = make_trace(num_tokens=4)
        tps = []
        for bits in (2, 3, 4, 16):
            plan = TransferPlan(name=f"b{bits}", expert_bits=bits)
            tps.append(simulate(trace, plan, GPU, TOY_DIMS, output_len=4).tokens_per_s)
        assert all(a >= b for a, b in zip(tps, tps[1:]))

    def test_monotone_in_top_n_and_rank(self):
        trace = make_trace(num_tokens=4)
        lat = []
        for top_n in (0, 1, 2):
            plan = TransferPlan(name=f"n{top_n}", expert_bits=2, top_n=top_n, rank=64)
            lat.append(simulate(trace, plan, GPU, TOY_DIMS, output_len=4).decode_s)
        assert lat[0] <= lat[1] <= lat[2]
        lat = []
        for rank in (16, 64, 256):
            plan = TransferPlan(name=f"r{rank}", expert_bits=2, top_n=1, rank=rank)
            lat.append(simulate(trace, plan, GPU, TOY_DIMS, output_len=4).decode_s)
        assert lat[0] <= lat[1] <= lat[2]

    def test_gpu_ndp_beats_gpu_only(self):
        trace = make_trace(num_tokens=4)
        plan = TransferPlan(name="int2", expert_bits=2, top_n=1, rank=32)
        gpu_rep = simulate(trace, plan, GPU, TOY_DIMS, output_len=4, include_prefill=False)
        ndp_rep = simulate(trace, plan, NDP, TOY_DIMS, output_len=4, include_prefill=False)
        assert ndp_rep.tokens_per_s > gpu_rep.tokens_per_s

    def test_deterministic(self):
        trace = make_trace(num_tokens=5)
        plan = TransferPlan(name="int3", expert_bits=3, top_n=1, rank=16)
        a = simulate(trace, plan, GPU, TOY_DIMS, output_len=5)
        b = simulate(trace, plan, GPU, TOY_DIMS, output_len=5)
        assert a == b

    def test_truncated_trace_rejected(self):
        trace = make_trace(num_tokens=3)
        plan = TransferPlan(name="p", expert_bits=2)
        with pytest.raises(SimulationError):
            simulate(trace, plan, GPU, TOY_DIMS, output_len=10)

    def test_layer_mismatch_rejected(self):
        trace = make_trace(num_tokens=3, layers=4)
        plan = TransferPlan(name="p", expert_bits=2)
        with pytest.raises(SimulationError):
            simulate(trace, plan, GPU, TOY_DIMS, output_len=3)

    def test_ndp_capacity_enforced(self):
        trace = make_trace(num_tokens=3)
        tiny = SystemConfig(name="tiny-ndp", ndp_enabled=True, ndp_bw=512e9,
                            ndp_capacity=1000, ndp_flops=16e12)
        with pytest.raises(SimulationError):
            simulate(trace, TransferPlan(name="p", expert_bits=2), tiny, TOY_DIMS,
                     output_len=3)

    def test_prefill_accounted(self):
        trace = make_trace(num_tokens=4)
        plan = TransferPlan(name="p", expert_bits=2)
        rep = simulate(trace, plan, GPU, TOY_DIMS, input_len=256, output_len=4)
        all_experts = 2 * 8 * expert_weight_bytes(TOY_DIMS, 2)
        assert rep.prefill_bytes == all_experts
        assert rep.prefill_s > 0
        no_prefill = simulate(trace, plan, GPU, TOY_DIMS, output_len=4,
                              include_prefill=False)
        assert no_prefill.prefill_bytes == 0
        assert rep.total_bytes_moved == no_prefill.total_bytes_moved + all_experts

    def test_speedup_ceiling(self):
        dims = DIM_PRESETS["mixtral-8x7b"]
        trace = make_trace(num_tokens=2, layers=32)
        base = simulate(trace, TransferPlan(name="fp16", expert_bits=16), GPU, dims,
                        output_len=2, include_prefill=False)
        for bits in (2, 3, 4):
            rep = simulate(trace, TransferPlan(name=f"b{bits}", expert_bits=bits), GPU,
                           dims, output_len=2, include_prefill=False)
            speedup = rep.tokens_per_s / base.tokens_per_s
            assert speedup <= 16 / bits
            if base.compute_s < 0.1 * base.decode_s:
                assert speedup >= 0.9 * 16 / bits


class TestSweep:
    def test_single_cell(self):
        trace = make_trace(num_tokens=3)
        rows = sweep_report(trace, TOY_DIMS, [TransferPlan(name="p", expert_bits=2)],
                            [GPU], output_lens=[3])
        assert len(rows) == 1
        assert rows[0].plan == "p" and rows[0].system == "gpu-only"

    def test_grid_size_and_tokens_per_s_monotone_in_bits(self):
        trace = make_trace(num_tokens=4)
        plans = [TransferPlan(name=f"b{b}", expert_bits=b) for b in (2, 3, 4, 16)]
        rows = sweep_report(trace, TOY_DIMS, plans, [GPU, NDP], output_lens=[2, 4])
        assert len(rows) == 4 * 2 * 2
        gpu_rows = [r for r in rows if r.system == "gpu-only" and r.output_len == 4]
        tps = [r.tokens_per_s for r in gpu_rows]
        assert all(a >= b for a, b in zip(tps, tps[1:]))

    def test_preset_systems_resolve(self):
        assert SYSTEM_PRESETS["gpu-only"].ndp_enabled is False
        assert SYSTEM_PRESETS["gpu-ndp"].ndp_enabled is True
