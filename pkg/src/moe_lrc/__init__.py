"""Low-bit MoE expert compression with router-guided low-rank restoration.

The package covers the full desk-scale pipeline: groupwise low-bit
quantization of expert weights, per-expert low-rank residual compensators
with kurtosis-guided rank budgets, routed forward passes that restore
precision for the highest-scoring experts only, and an analytical transfer
cost simulator for GPU-only and GPU-NDP offloading.
"""

__version__ = "0.1.0"
