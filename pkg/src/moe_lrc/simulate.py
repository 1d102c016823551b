"""Analytical transfer-cost model for offloaded MoE decoding.

Replays a routing trace against a byte-exact cost model.  GPU-only systems
fetch every selected expert over PCIe (optionally through an LRU cache);
GPU-NDP systems execute non-compensated experts near memory and only move the
top-n experts' weights and compensators to the GPU.  Latency per layer is the
serial sum of transfer and compute, or their max when transfer/compute
overlap is enabled.  All byte counts are exact integers.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

from .lowrank import compensator_size_bytes
from .quant import packed_size_bytes
from .ranks import PROJECTIONS, RankAllocation

PLAN_BITS = (2, 3, 4, 16)
FP16_BYTES = 2
CACHE_POLICIES = ("none", "lru")


class SimulationError(ValueError):
    """Raised for invalid simulator configuration or truncated traces."""


@dataclass(frozen=True)
class ModelDims:
    """Shape parameters of the simulated model (no weights involved)."""

    hidden: int
    ffn: int
    num_layers: int
    num_experts: int
    top_k: int
    num_shared: int = 0

    def validate(self) -> None:
        if min(self.hidden, self.ffn, self.num_layers, self.num_experts) <= 0:
            raise SimulationError("model dims must be positive")
        if not 0 <= self.top_k <= self.num_experts:
            raise SimulationError(f"top_k {self.top_k} outside [0, {self.num_experts}]")
        if self.num_shared < 0:
            raise SimulationError("num_shared must be >= 0")


@dataclass(frozen=True)
class SystemConfig:
    """Bandwidth and compute parameters of one deployment target."""

    name: str = "gpu-only"
    pcie_bw: float = 25e9          # effective host-device bytes/s
    gpu_flops: float = 989.4e12
    gpu_hbm_bw: float = 3.35e12
    gpu_mem_capacity: float = 80e9
    ndp_enabled: bool = False
    ndp_bw: float = 512e9
    ndp_capacity: float = 512e9
    ndp_flops: float = 16e12
    overlap: bool = False

    def validate(self) -> None:
        if self.pcie_bw <= 0 or self.gpu_flops <= 0 or self.gpu_hbm_bw <= 0:
            raise SimulationError("pcie_bw, gpu_flops and gpu_hbm_bw must be positive")
        if self.gpu_mem_capacity <= 0:
            raise SimulationError("gpu_mem_capacity must be positive")
        if self.ndp_enabled and (self.ndp_bw <= 0 or self.ndp_capacity <= 0
                                 or self.ndp_flops <= 0):
            raise SimulationError("NDP rates must be positive when ndp_enabled")


@dataclass(frozen=True)
class TransferPlan:
    """What moves per token: expert bit-width, compensated top-n, cache policy."""

    name: str = "fp16"
    expert_bits: int = 16
    top_n: int = 0
    rank: int = 0
    allocation: RankAllocation | None = None
    factor_bits: int = 3
    cache_policy: str = "none"
    cache_budget_bytes: int = 0

    def validate(self) -> None:
        if self.expert_bits not in PLAN_BITS:
            raise SimulationError(f"expert_bits must be one of {PLAN_BITS}")
        if self.top_n < 0 or self.rank < 0:
            raise SimulationError("top_n and rank must be >= 0")
        if self.cache_policy not in CACHE_POLICIES:
            raise SimulationError(f"cache_policy must be one of {CACHE_POLICIES}")
        if self.cache_policy == "lru" and self.cache_budget_bytes <= 0:
            raise SimulationError("lru cache requires a positive cache_budget_bytes")


def expert_weight_bytes(dims: ModelDims, bits: int) -> int:
    """Packed bytes of one expert's three projections (codes only)."""
    return 3 * packed_size_bytes(dims.hidden, dims.ffn, bits)


def expert_comp_bytes(dims: ModelDims, plan: TransferPlan, layer: int, expert: int) -> int:
    """Compensator bytes for one expert under the plan's rank source."""
    if plan.allocation is not None:
        total = 0
        for proj in PROJECTIONS:
            try:
                r = plan.allocation.rank_of(layer, expert, proj)
            except KeyError:
                raise SimulationError(
                    f"plan allocation has no rank for layer {layer}, expert {expert}, {proj}"
                ) from None
            total += compensator_size_bytes(dims.hidden, dims.ffn, r, plan.factor_bits)
        return total
    return 3 * compensator_size_bytes(dims.hidden, dims.ffn, plan.rank, plan.factor_bits)


def _comp_ranks(dims: ModelDims, plan: TransferPlan, layer: int, expert: int) -> list[int]:
    if plan.allocation is not None:
        return [plan.allocation.rank_of(layer, expert, p) for p in PROJECTIONS]
    return [plan.rank] * 3


class _NoCache:
    def lookup(self, key) -> bool:
        return False

    def insert(self, key) -> None:
        pass


class _LRUCache:
    """LRU over uniformly sized expert entries, keyed by (layer, expert)."""

    def __init__(self, budget_bytes: int, entry_bytes: int):
        if budget_bytes < entry_bytes:
            raise SimulationError(
                f"cache budget {budget_bytes} below one expert ({entry_bytes} bytes); "
                "behavior under constant thrash is undefined"
            )
        self.capacity = budget_bytes // entry_bytes
        self._entries: OrderedDict = OrderedDict()

    def lookup(self, key) -> bool:
        if key in self._entries:
            self._entries.move_to_end(key)
            return True
        return False

    def insert(self, key) -> None:
        if key in self._entries:
            self._entries.move_to_end(key)
            return
        while len(self._entries) >= self.capacity:
            self._entries.popitem(last=False)
        self._entries[key] = True


def _make_cache(plan: TransferPlan, sys_cfg: SystemConfig, dims: ModelDims):
    if plan.cache_policy == "none":
        return _NoCache()
    if plan.cache_budget_bytes > sys_cfg.gpu_mem_capacity:
        raise SimulationError("cache_budget_bytes exceeds gpu_mem_capacity")
    return _LRUCache(plan.cache_budget_bytes, expert_weight_bytes(dims, plan.expert_bits))


@dataclass
class LayerCost:
    transfer_s: float = 0.0
    compute_s: float = 0.0
    ndp_compute_s: float = 0.0
    pcie_bytes: int = 0
    hits: int = 0
    misses: int = 0

    def latency(self, overlap: bool) -> float:
        if not overlap:
            return self.transfer_s + self.compute_s + self.ndp_compute_s
        if self.ndp_compute_s == 0.0:
            return max(self.transfer_s, self.compute_s)
        # NDP runs as its own stream against the serial fetch-then-compute GPU side.
        return max(self.transfer_s + self.compute_s, self.ndp_compute_s)


def _expert_flops(dims: ModelDims, bits: int) -> int:
    """GEMV multiply-adds for one expert plus one dequant op per element."""
    mac = 2 * 3 * dims.hidden * dims.ffn
    dequant = 3 * dims.hidden * dims.ffn if bits < 16 else 0
    return mac + dequant


def _gpu_compute_s(dims: ModelDims, sys_cfg: SystemConfig, num_experts: int,
                   bits: int, recon_flops: int = 0) -> float:
    """Roofline GPU time: flop-bound or HBM-bound, whichever dominates."""
    flops = num_experts * _expert_flops(dims, bits) + recon_flops
    hbm = num_experts * 3 * dims.hidden * dims.ffn * FP16_BYTES
    return max(flops / sys_cfg.gpu_flops, hbm / sys_cfg.gpu_hbm_bw)


def _recon_flops(dims: ModelDims, ranks: list[int]) -> int:
    """Applying the factored correction costs 2*(m+n)*r per projection."""
    return sum(2 * (dims.hidden + dims.ffn) * r for r in ranks)


def token_cost_gpu_only(record, plan: TransferPlan, sys_cfg: SystemConfig,
                        dims: ModelDims, cache) -> LayerCost:
    """One layer of one decode token on a GPU-only system.

    Every selected expert not in cache moves over PCIe at the plan bit-width;
    compensated experts additionally move their factor pair.  Shared experts
    are pinned GPU-resident and only contribute compute.
    """
    cost = LayerCost()
    wb = expert_weight_bytes(dims, plan.expert_bits)
    for e in record.selected:
        key = (record.layer, e)
        if cache.lookup(key):
            cost.hits += 1
        else:
            cost.misses += 1
            cost.pcie_bytes += wb
            cache.insert(key)
    recon = 0
    for e in record.selected[: plan.top_n]:
        cost.pcie_bytes += expert_comp_bytes(dims, plan, record.layer, e)
        recon += _recon_flops(dims, _comp_ranks(dims, plan, record.layer, e))
    cost.transfer_s = cost.pcie_bytes / sys_cfg.pcie_bw
    active = len(record.selected) + dims.num_shared
    cost.compute_s = _gpu_compute_s(dims, sys_cfg, active, plan.expert_bits, recon)
    return cost


def token_cost_gpu_ndp(record, plan: TransferPlan, sys_cfg: SystemConfig,
                       dims: ModelDims, cache) -> LayerCost:
    """One layer of one decode token on a GPU-NDP system.

    Non-compensated selected experts execute on the NDP device against their
    locally stored low-bit weights; only the top-n experts move weights plus
    compensators to the GPU.  Activation vectors shuttle over PCIe for every
    NDP-executed expert.  Shared experts stay GPU-resident.
    """
    if not sys_cfg.ndp_enabled:
        raise SimulationError(f"system {sys_cfg.name!r} has ndp_enabled=False")
    cost = LayerCost()
    comp_ids = record.selected[: plan.top_n]
    ndp_ids = record.selected[plan.top_n :]

    wb = expert_weight_bytes(dims, plan.expert_bits)
    recon = 0
    for e in comp_ids:
        key = (record.layer, e)
        if cache.lookup(key):
            cost.hits += 1
        else:
            cost.misses += 1
            cost.pcie_bytes += wb
            cache.insert(key)
        cost.pcie_bytes += expert_comp_bytes(dims, plan, record.layer, e)
        recon += _recon_flops(dims, _comp_ranks(dims, plan, record.layer, e))

    # Token in, partial output back, fp16, per NDP-executed expert.
    cost.pcie_bytes += len(ndp_ids) * 2 * dims.hidden * FP16_BYTES

    cost.transfer_s = cost.pcie_bytes / sys_cfg.pcie_bw
    gpu_experts = len(comp_ids) + dims.num_shared
    cost.compute_s = _gpu_compute_s(dims, sys_cfg, gpu_experts, plan.expert_bits, recon)

    per_expert_ndp = max(wb / sys_cfg.ndp_bw,
                         _expert_flops(dims, plan.expert_bits) / sys_cfg.ndp_flops)
    cost.ndp_compute_s = len(ndp_ids) * per_expert_ndp
    return cost


@dataclass
class SimReport:
    plan: str
    system: str
    tokens_per_s: float
    decode_s: float
    transfer_s: float
    compute_s: float
    ndp_compute_s: float
    total_bytes_moved: int
    cache_hit_rate: float
    prefill_s: float
    prefill_bytes: int
    input_len: int
    output_len: int

    def as_row(self) -> dict:
        return {
            "plan": self.plan,
            "system": self.system,
            "input_len": self.input_len,
            "output_len": self.output_len,
            "tokens_per_s": self.tokens_per_s,
            "decode_s": self.decode_s,
            "transfer_s": self.transfer_s,
            "compute_s": self.compute_s,
            "ndp_compute_s": self.ndp_compute_s,
            "total_bytes_moved": self.total_bytes_moved,
            "cache_hit_rate": self.cache_hit_rate,
            "prefill_s": self.prefill_s,
            "prefill_bytes": self.prefill_bytes,
        }


def _check_ndp_capacity(dims: ModelDims, plan: TransferPlan, sys_cfg: SystemConfig) -> None:
    resident = dims.num_layers * dims.num_experts * expert_weight_bytes(dims, plan.expert_bits)
    for layer in range(dims.num_layers):
        for e in range(dims.num_experts):
            resident += expert_comp_bytes(dims, plan, layer, e)
    if resident > sys_cfg.ndp_capacity:
        raise SimulationError(
            f"resident expert bytes {resident} exceed ndp_capacity "
            f"{int(sys_cfg.ndp_capacity)}"
        )


def _prefill(dims: ModelDims, plan: TransferPlan, sys_cfg: SystemConfig,
             input_len: int, cache) -> tuple[float, int]:
    """One aggregated pass: every routed expert moves once (GPU-only) and the
    batched prompt computes at the active expert count."""
    bytes_moved = 0
    if not sys_cfg.ndp_enabled:
        wb = expert_weight_bytes(dims, plan.expert_bits)
        for layer in range(dims.num_layers):
            for e in range(dims.num_experts):
                bytes_moved += wb
                cache.insert((layer, e))
    active = dims.top_k + dims.num_shared
    flops = input_len * dims.num_layers * active * _expert_flops(dims, plan.expert_bits)
    rate = sys_cfg.ndp_flops if sys_cfg.ndp_enabled else sys_cfg.gpu_flops
    return bytes_moved / sys_cfg.pcie_bw + flops / rate, bytes_moved


def simulate(trace, plan: TransferPlan, sys_cfg: SystemConfig, dims: ModelDims,
             input_len: int = 256, output_len: int | None = None,
             include_prefill: bool = True) -> SimReport:
    """Replay a routing trace and report per-token latency and throughput.

    The trace must cover ``output_len`` decode tokens for every layer of
    ``dims``.  Prefill is modeled as a single aggregated transfer of all
    routed experts (skippable); decode sums per-layer costs token by token.
    Deterministic: identical inputs give identical reports.
    """
    dims.validate()
    plan.validate()
    sys_cfg.validate()
    if input_len < 0:
        raise SimulationError("input_len must be >= 0")

    by_token: dict[int, list] = {}
    for r in trace.records:
        if r.layer >= dims.num_layers:
            raise SimulationError(
                f"trace layer {r.layer} outside model with {dims.num_layers} layers"
            )
        if any(e >= dims.num_experts for e in r.selected):
            raise SimulationError("trace selects an expert id outside the model")
        by_token.setdefault(r.token, []).append(r)

    tokens = sorted(by_token)
    if output_len is None:
        output_len = len(tokens)
    if output_len <= 0:
        raise SimulationError("output_len must be positive")
    if len(tokens) < output_len:
        raise SimulationError(
            f"truncated trace: {len(tokens)} tokens available, {output_len} requested"
        )
    for t in tokens[:output_len]:
        layers_seen = {r.layer for r in by_token[t]}
        if layers_seen != set(range(dims.num_layers)):
            raise SimulationError(
                f"truncated trace: token {t} covers {len(layers_seen)} layers but the "
                f"simulated dims expect {dims.num_layers}; generate the trace from a "
                f"model with matching num_layers"
            )

    if sys_cfg.ndp_enabled:
        _check_ndp_capacity(dims, plan, sys_cfg)
    cache = _make_cache(plan, sys_cfg, dims)
    cost_fn = token_cost_gpu_ndp if sys_cfg.ndp_enabled else token_cost_gpu_only

    prefill_s, prefill_bytes = (0.0, 0)
    if include_prefill:
        prefill_s, prefill_bytes = _prefill(dims, plan, sys_cfg, input_len, cache)

    decode_s = 0.0
    transfer_s = compute_s = ndp_s = 0.0
    bytes_moved = 0
    hits = misses = 0
    for t in tokens[:output_len]:
        for record in sorted(by_token[t], key=lambda r: r.layer):
            cost = cost_fn(record, plan, sys_cfg, dims, cache)
            decode_s += cost.latency(sys_cfg.overlap)
            transfer_s += cost.transfer_s
            compute_s += cost.compute_s
            ndp_s += cost.ndp_compute_s
            bytes_moved += cost.pcie_bytes
            hits += cost.hits
            misses += cost.misses

    if decode_s <= 0.0:
        raise SimulationError("decode latency is zero; nothing was executed or moved")
    lookups = hits + misses
    return SimReport(
        plan=plan.name,
        system=sys_cfg.name,
        tokens_per_s=output_len / decode_s,
        decode_s=decode_s,
        transfer_s=transfer_s,
        compute_s=compute_s,
        ndp_compute_s=ndp_s,
        total_bytes_moved=bytes_moved + prefill_bytes,
        cache_hit_rate=hits / lookups if lookups else 0.0,
        prefill_s=prefill_s,
        prefill_bytes=prefill_bytes,
        input_len=input_len,
        output_len=output_len,
    )


def sweep_report(trace, dims: ModelDims, plans: list[TransferPlan],
                 systems: list[SystemConfig], output_lens: list[int] | None = None,
                 input_len: int = 256, include_prefill: bool = True) -> list[SimReport]:
    """Simulate every (plan, system, output_len) cell; one report per cell."""
    lens = output_lens or [None]
    reports = []
    for sys_cfg in systems:
        for plan in plans:
            for out_len in lens:
                reports.append(
                    simulate(trace, plan, sys_cfg, dims, input_len=input_len,
                             output_len=out_len, include_prefill=include_prefill)
                )
    return reports
