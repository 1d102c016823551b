"""Run configuration: one JSON document driving the whole pipeline.

Sections mirror the module parameters (model, quant, allocation, forward,
simulate).  Validation happens here with field-qualified messages so the CLI
and service can reject bad configs before any work starts (exit code 1 /
HTTP 400).
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .presets import DEFAULT_ROUTER_SKEW, DIM_PRESETS, ROUTER_SKEW_PRESETS, SYSTEM_PRESETS
from .ranks import DEFAULT_BUCKETS
from .simulate import PLAN_BITS, ModelDims, SystemConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


class ModelSection(BaseModel):
    hidden: int = 64
    ffn: int = 128
    num_layers: int = 2
    num_experts: int = 8
    top_k: int = 2
    num_shared: int = 0
    tail_dofs: Optional[list[Union[float, str]]] = None
    router_skew: Union[float, str] = "mixtral-like"

    @field_validator("hidden", "ffn", "num_layers", "num_experts")
    @classmethod
    def _positive(cls, v, info):
        if v <= 0:
            raise ValueError(f"{info.field_name} must be positive")
        return v

    @field_validator("num_shared")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("num_shared must be >= 0")
        return v

    def resolved_dofs(self) -> tuple[float, ...]:
        if self.tail_dofs is None:
            return (math.inf,)
        out = []
        for d in self.tail_dofs:
            val = math.inf if isinstance(d, str) and d.lower() in ("inf", "infinity") \
                else float(d)
            if not val > 2.0:
                raise ConfigError(f"model.tail_dofs: dof {d} must be > 2")
            out.append(val)
        return tuple(out)

    def resolved_skew(self) -> float:
        if isinstance(self.router_skew, str):
            if self.router_skew not in ROUTER_SKEW_PRESETS:
                raise ConfigError(
                    f"model.router_skew: unknown preset {self.router_skew!r}; "
                    f"available: {sorted(ROUTER_SKEW_PRESETS)}"
                )
            return ROUTER_SKEW_PRESETS[self.router_skew]
        if self.router_skew < 0:
            raise ConfigError("model.router_skew: must be >= 0")
        return float(self.router_skew)


class QuantSection(BaseModel):
    bits: int = 2
    group_size: int = 64
    hqq_iters: int = 20
    hqq_shrink_p: float = 0.7

    @field_validator("bits")
    @classmethod
    def _bits(cls, v):
        if v not in (2, 3, 4):
            raise ValueError("bits must be one of (2, 3, 4)")
        return v

    @field_validator("group_size")
    @classmethod
    def _gs(cls, v):
        if v < 1:
            raise ValueError("group_size must be >= 1")
        return v

    @field_validator("hqq_iters")
    @classmethod
    def _iters(cls, v):
        if v < 0:
            raise ValueError("hqq_iters must be >= 0")
        return v

    @field_validator("hqq_shrink_p")
    @classmethod
    def _p(cls, v):
        if not (0.0 < v <= 1.0):
            raise ValueError("hqq_shrink_p must be in (0, 1]")
        return v


class AllocationSection(BaseModel):
    avg_budget: int = 32
    buckets: list[int] = Field(default_factory=lambda: list(DEFAULT_BUCKETS))
    scope: Literal["global", "per_layer"] = "global"
    uniform_rank: Optional[int] = None

    @field_validator("avg_budget")
    @classmethod
    def _budget(cls, v):
        if v < 0:
            raise ValueError("avg_budget must be >= 0")
        return v

    @field_validator("buckets")
    @classmethod
    def _buckets(cls, v):
        if 0 not in v:
            raise ValueError("buckets must contain 0")
        if any(b < 0 for b in v):
            raise ValueError("buckets must be non-negative")
        return sorted(set(v))

    @field_validator("uniform_rank")
    @classmethod
    def _uniform(cls, v):
        if v is not None and v < 0:
            raise ValueError("uniform_rank must be >= 0")
        return v


class ForwardSection(BaseModel):
    top_n: int = 1
    top_k: Optional[int] = None  # defaults to the model's top_k
    renormalize_topk: bool = False
    compensate_shared: bool = True
    num_tokens: int = 64

    @field_validator("top_n")
    @classmethod
    def _topn(cls, v):
        if v < 0:
            raise ValueError("top_n must be >= 0")
        return v

    @field_validator("num_tokens")
    @classmethod
    def _tokens(cls, v):
        if v <= 0:
            raise ValueError("num_tokens must be positive")
        return v


class PlanSpec(BaseModel):
    name: str
    expert_bits: int = 16
    top_n: int = 0
    rank: int = 0
    factor_bits: int = 3
    cache_policy: Literal["none", "lru"] = "none"
    cache_budget_bytes: int = 0
    allocation_path: Optional[str] = None

    @field_validator("expert_bits")
    @classmethod
    def _bits(cls, v):
        if v not in PLAN_BITS:
            raise ValueError(f"expert_bits must be one of {PLAN_BITS}")
        return v

    @field_validator("top_n", "rank", "cache_budget_bytes")
    @classmethod
    def _non_negative(cls, v, info):
        if v < 0:
            raise ValueError(f"{info.field_name} must be >= 0")
        return v


class SystemSpec(BaseModel):
    preset: Optional[str] = None
    name: Optional[str] = None
    pcie_bw: Optional[float] = None
    gpu_flops: Optional[float] = None
    gpu_hbm_bw: Optional[float] = None
    gpu_mem_capacity: Optional[float] = None
    ndp_enabled: Optional[bool] = None
    ndp_bw: Optional[float] = None
    ndp_capacity: Optional[float] = None
    ndp_flops: Optional[float] = None
    overlap: Optional[bool] = None

    def resolve(self) -> SystemConfig:
        base = SystemConfig()
        if self.preset is not None:
            if self.preset not in SYSTEM_PRESETS:
                raise ConfigError(
                    f"simulate.systems.preset: unknown preset {self.preset!r}; "
                    f"available: {sorted(SYSTEM_PRESETS)}"
                )
            base = SYSTEM_PRESETS[self.preset]
        overrides = {
            k: v for k, v in self.model_dump().items()
            if k != "preset" and v is not None
        }
        cfg = SystemConfig(**{**base.__dict__, **overrides})
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(f"simulate.systems: {exc}") from exc
        return cfg


class DimsSpec(BaseModel):
    hidden: int
    ffn: int
    num_layers: int
    num_experts: int
    top_k: int
    num_shared: int = 0


class SimulateSection(BaseModel):
    dims_preset: Optional[str] = "mixtral-8x7b"
    dims: Optional[DimsSpec] = None
    systems: list[SystemSpec] = Field(default_factory=lambda: [SystemSpec(preset="gpu-only")])
    plans: list[PlanSpec] = Field(
        default_factory=lambda: [
            PlanSpec(name="fp16", expert_bits=16),
            PlanSpec(name="int2-top1-r32", expert_bits=2, top_n=1, rank=32),
        ]
    )
    input_len: int = 256
    output_lens: list[int] = Field(default_factory=lambda: [64])
    include_prefill: bool = True

    @field_validator("input_len")
    @classmethod
    def _input_len(cls, v):
        if v < 0:
            raise ValueError("input_len must be >= 0")
        return v

    @field_validator("output_lens")
    @classmethod
    def _output_lens(cls, v):
        if any(o <= 0 for o in v):
            raise ValueError("output_lens must be positive")
        return v

    @model_validator(mode="after")
    def _plan_names_unique(self):
        names = [p.name for p in self.plans]
        if len(names) != len(set(names)):
            raise ValueError("plans must have unique names")
        return self

    def resolved_dims(self) -> ModelDims:
        if self.dims is not None:
            d = ModelDims(**self.dims.model_dump())
        else:
            if self.dims_preset not in DIM_PRESETS:
                raise ConfigError(
                    f"simulate.dims_preset: unknown preset {self.dims_preset!r}; "
                    f"available: {sorted(DIM_PRESETS)}"
                )
            d = DIM_PRESETS[self.dims_preset]
        try:
            d.validate()
        except ValueError as exc:
            raise ConfigError(f"simulate.dims: {exc}") from exc
        return d


class RunConfig(BaseModel):
    seed: int = 0
    preset: Optional[str] = None
    model: ModelSection = Field(default_factory=ModelSection)
    quant: QuantSection = Field(default_factory=QuantSection)
    allocation: AllocationSection = Field(default_factory=AllocationSection)
    forward: ForwardSection = Field(default_factory=ForwardSection)
    simulate: SimulateSection = Field(default_factory=SimulateSection)

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.model.top_k > self.model.num_experts:
            raise ValueError(
                f"model.top_k ({self.model.top_k}) exceeds model.num_experts "
                f"({self.model.num_experts})"
            )
        top_k = self.forward.top_k if self.forward.top_k is not None else self.model.top_k
        if self.forward.top_n > top_k:
            raise ValueError(
                f"forward.top_n ({self.forward.top_n}) exceeds top_k ({top_k})"
            )
        for plan in self.simulate.plans:
            if plan.cache_policy == "lru" and plan.cache_budget_bytes <= 0:
                raise ValueError(
                    f"simulate.plans[{plan.name}].cache_budget_bytes must be positive "
                    "with cache_policy=lru"
                )
        return self

    def resolved_forward_top_k(self) -> int:
        return self.forward.top_k if self.forward.top_k is not None else self.model.top_k


def apply_preset(cfg: RunConfig, preset: str) -> RunConfig:
    """Shape the toy model after a packaged dims preset.

    Copies experts/top-k/shared/layer-count and the family's router skew onto
    the model section (toy hidden/ffn stay desk-scale) and points the
    simulator at the preset dims.
    """
    if preset not in DIM_PRESETS:
        raise ConfigError(
            f"preset: unknown preset {preset!r}; available: {sorted(DIM_PRESETS)}"
        )
    dims = DIM_PRESETS[preset]
    update = cfg.model_copy(deep=True)
    update.preset = preset
    update.model.num_experts = dims.num_experts
    update.model.top_k = dims.top_k
    update.model.num_shared = dims.num_shared
    update.model.num_layers = dims.num_layers
    update.model.router_skew = DEFAULT_ROUTER_SKEW[preset]
    update.simulate.dims_preset = preset
    update.simulate.dims = None
    return RunConfig.model_validate(update.model_dump())


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                preset: str | None = None, seed: int | None = None) -> RunConfig:
    """Build a validated RunConfig from a JSON file plus CLI-style overrides."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config: file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {p}: {exc}") from exc
    if overrides:
        data = _deep_merge(data, overrides)
    cfg = validate_config(data)
    if preset is None:
        preset = cfg.preset
    if preset is not None:
        cfg = apply_preset(cfg, preset)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    return cfg


def validate_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(x) for x in first["loc"]) or "config"
        raise ConfigError(f"{loc}: {first['msg']}") from exc


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out
