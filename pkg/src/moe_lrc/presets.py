"""Packaged dimension and system presets.

The dimension presets carry only shapes (hidden/ffn/layers/experts/top-k);
no weights ship with the package.  ``router_skew`` values are calibrated so
the synthetic router's sorted-score means land where the corresponding model
family's do (mixtral-like: top-1 around 0.44, top-2 around 0.21).
"""

from __future__ import annotations

from .simulate import ModelDims, SystemConfig

DIM_PRESETS: dict[str, ModelDims] = {
    "mixtral-8x7b": ModelDims(hidden=4096, ffn=14336, num_layers=32,
                              num_experts=8, top_k=2, num_shared=0),
    "mixtral-8x22b": ModelDims(hidden=6144, ffn=16384, num_layers=56,
                               num_experts=8, top_k=2, num_shared=0),
    "deepseek-16b": ModelDims(hidden=2048, ffn=11008, num_layers=28,
                              num_experts=64, top_k=6, num_shared=2),
}

# Gate logit scale per family; larger concentrates scores on the top expert.
ROUTER_SKEW_PRESETS: dict[str, float] = {
    "mixtral-like": 1.4,
    "deepseek-like": 0.8,
    "uniform": 0.0,
}

DEFAULT_ROUTER_SKEW: dict[str, str] = {
    "mixtral-8x7b": "mixtral-like",
    "mixtral-8x22b": "mixtral-like",
    "deepseek-16b": "deepseek-like",
}

SYSTEM_PRESETS: dict[str, SystemConfig] = {
    # H100 PCIe with experts fetched on demand from host memory.
    "gpu-only": SystemConfig(name="gpu-only", pcie_bw=25e9, gpu_flops=989.4e12,
                             gpu_hbm_bw=3.35e12, gpu_mem_capacity=80e9,
                             ndp_enabled=False, overlap=False),
    # Same GPU plus a 512 GB/s, 512 GB near-data device holding the experts.
    "gpu-ndp": SystemConfig(name="gpu-ndp", pcie_bw=25e9, gpu_flops=989.4e12,
                            gpu_hbm_bw=3.35e12, gpu_mem_capacity=80e9,
                            ndp_enabled=True, ndp_bw=512e9, ndp_capacity=512e9,
                            ndp_flops=16e12, overlap=True),
}


def dims_preset(name: str) -> ModelDims:
    try:
        return DIM_PRESETS[name]
    except KeyError:
        raise KeyError(
            f"unknown dims preset {name!r}; available: {sorted(DIM_PRESETS)}"
        ) from None


def router_skew_preset(name: str) -> float:
    try:
        return ROUTER_SKEW_PRESETS[name]
    except KeyError:
        raise KeyError(
            f"unknown router preset {name!r}; available: {sorted(ROUTER_SKEW_PRESETS)}"
        ) from None
