"""HTTP service exposing the pipeline stages.

Each endpoint takes a run config (inline JSON, same schema as the config
file), resolves presets and seed overrides server-side, runs the stage, and
returns a summary.  Paths in requests and responses are server-local; the
bundled CLI runs the app in-process by default, so they are simply local
paths.  Config problems come back as 400, runtime failures as 500.
"""

from __future__ import annotations

from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .config import ConfigError, RunConfig, apply_preset, validate_config
from .presets import DIM_PRESETS, ROUTER_SKEW_PRESETS, SYSTEM_PRESETS
from .pipeline import run_compress, run_gen, run_infer, run_report, run_simulate, run_stats

app = FastAPI(
    title="moe-lrc",
    version=__version__,
    description="Low-bit MoE compression, router-guided low-rank restoration, "
                "and offload transfer-cost simulation.",
)


def _build_config(data: dict, preset: Optional[str], seed: Optional[int]) -> RunConfig:
    cfg = validate_config(data)
    if preset is None:
        preset = cfg.preset
    if preset is not None:
        cfg = apply_preset(cfg, preset)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    return cfg


def _execute(stage, data: dict, preset: Optional[str], seed: Optional[int], **paths):
    try:
        cfg = _build_config(data, preset, seed)
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    try:
        return stage(cfg, **paths)
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    except Exception as exc:  # runtime failure -> 500 with the cause named
        raise HTTPException(status_code=500,
                            detail=f"{type(exc).__name__}: {exc}") from exc


class StageRequest(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    config: dict = Field(default_factory=dict)
    preset: Optional[str] = None
    seed: Optional[int] = None
    out: str


class GenRequest(StageRequest):
    pass


class GenResponse(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_path: str
    hidden: int
    ffn: int
    num_layers: int
    num_experts: int
    num_shared: int
    top_k: int
    seed: int


class StatsRequest(StageRequest):
    model_path: str


class StatsResponse(BaseModel):
    kurtosis_csv: str
    routing_csv: str
    trace_path: str
    spearman_kurtosis_error: Optional[float]
    spearman_degenerate: bool
    top1_mean_score: float
    top2_mean_score: Optional[float]
    num_tokens: int


class CompressRequest(StageRequest):
    model_path: str


class CompressResponse(BaseModel):
    artifact_path: str
    allocation_path: str
    num_records: int
    total_rank: int
    weight_bytes: int
    compensator_bytes: int


class InferRequest(StageRequest):
    model_path: str
    artifact_path: str
    mode: str = "compensated"


class InferResponse(BaseModel):
    fidelity_csv: str
    mode: str
    mean_rel_err: float
    mean_rel_err_quantized: float
    mean_rel_err_compensated: float
    win_rate: float
    num_tokens: int


class SimulateRequest(StageRequest):
    trace_path: str


class SimulateResponse(BaseModel):
    sim_csv: str
    rows: int
    speedups: dict[str, float]


class ReportRequest(BaseModel):
    out: str
    sim_csv: Optional[str] = None
    fidelity_csv: Optional[str] = None


class ReportResponse(BaseModel):
    report_csv: str
    rows: int


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.get("/presets")
def presets() -> dict:
    return {
        "dims": {name: d.__dict__ for name, d in DIM_PRESETS.items()},
        "systems": sorted(SYSTEM_PRESETS),
        "router_skew": ROUTER_SKEW_PRESETS,
    }


@app.post("/gen", response_model=GenResponse)
def gen(req: GenRequest) -> dict:
    return _execute(run_gen, req.config, req.preset, req.seed, out=req.out)


@app.post("/stats", response_model=StatsResponse)
def stats(req: StatsRequest) -> dict:
    return _execute(run_stats, req.config, req.preset, req.seed,
                    model_path=req.model_path, out=req.out)


@app.post("/compress", response_model=CompressResponse)
def compress(req: CompressRequest) -> dict:
    return _execute(run_compress, req.config, req.preset, req.seed,
                    model_path=req.model_path, out=req.out)


@app.post("/infer", response_model=InferResponse)
def infer(req: InferRequest) -> dict:
    return _execute(run_infer, req.config, req.preset, req.seed,
                    model_path=req.model_path, artifact_path=req.artifact_path,
                    out=req.out, mode=req.mode)


@app.post("/simulate", response_model=SimulateResponse)
def simulate(req: SimulateRequest) -> dict:
    return _execute(run_simulate, req.config, req.preset, req.seed,
                    trace_path=req.trace_path, out=req.out)


@app.post("/report", response_model=ReportResponse)
def report(req: ReportRequest) -> dict:
    try:
        return run_report(out=req.out, sim_csv=req.sim_csv,
                          fidelity_csv=req.fidelity_csv)
    except Exception as exc:
        raise HTTPException(status_code=500,
                            detail=f"{type(exc).__name__}: {exc}") from exc
