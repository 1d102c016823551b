"""Pipeline stages shared by the HTTP service and the CLI.

Each stage reads/writes files under caller-provided paths and returns a JSON
friendly summary dict.  Outputs are deterministic for a fixed config and
seed: binary artifacts byte-for-byte, CSV files with floats printed at nine
significant digits.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .artifact import (
    ArtifactHeader,
    CompressedModel,
    ProjRecord,
    artifact_packed_bytes,
    load_artifact,
    load_model,
    save_artifact,
    save_model,
)
from .config import ConfigError, RunConfig
from .lowrank import build_compensator
from .moe import (
    ForwardConfig,
    MoEModel,
    RoutingTrace,
    build_trace,
    evaluate_fidelity,
    gen_synthetic_model,
    gen_tokens,
    routing_stats,
)
from .quant import QuantConfig, quantize
from .ranks import (
    PROJECTIONS,
    KurtosisProfile,
    RankAllocation,
    allocate_ranks,
    kurtosis_error_report,
    kurtosis_profile,
)
from .simulate import TransferPlan, sweep_report

THREADS_ENV = "MOE_LRC_THREADS"

FLOAT_FMT = "%.9g"


class RunError(RuntimeError):
    """A pipeline stage failed at runtime (bad paths, inconsistent inputs)."""


def _fmt(value) -> str:
    if isinstance(value, float):
        return FLOAT_FMT % value
    return str(value)


def write_csv(path: str | Path, header: list[str], rows: list[dict]) -> None:
    """CSV with a fixed header row and 9-significant-digit floats."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in header])


def max_workers() -> int:
    cap = os.environ.get(THREADS_ENV)
    hw = os.cpu_count() or 1
    if cap:
        try:
            return max(1, min(int(cap), hw))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return min(8, hw)


def quant_config(cfg: RunConfig) -> QuantConfig:
    q = cfg.quant
    return QuantConfig(bits=q.bits, group_size=q.group_size, hqq_iters=q.hqq_iters,
                       hqq_shrink_p=q.hqq_shrink_p)


def forward_config(cfg: RunConfig) -> ForwardConfig:
    return ForwardConfig(top_k=cfg.resolved_forward_top_k(), top_n=cfg.forward.top_n,
                         renormalize_topk=cfg.forward.renormalize_topk,
                         compensate_shared=cfg.forward.compensate_shared)


def build_model(cfg: RunConfig) -> MoEModel:
    m = cfg.model
    return gen_synthetic_model(
        seed=cfg.seed,
        hidden=m.hidden,
        ffn=m.ffn,
        num_layers=m.num_layers,
        num_experts=m.num_experts,
        top_k=m.top_k,
        num_shared=m.num_shared,
        tail_dofs=m.resolved_dofs(),
        router_skew=m.resolved_skew(),
    )


def uniform_allocation(model_or_profile, rank: int) -> RankAllocation:
    """Every projection at the same rank (the uniform-assignment baseline)."""
    if isinstance(model_or_profile, KurtosisProfile):
        entries = model_or_profile.entries
    else:
        entries = kurtosis_profile(model_or_profile).entries
    buckets = tuple(sorted({0, rank}))
    ranks = {(e.layer_id, e.expert_id, e.projection_id): rank for e in entries}
    return RankAllocation(buckets=buckets, avg_budget=rank, ranks=ranks)


def compress_model(model: MoEModel, qcfg: QuantConfig, allocation: RankAllocation,
                   profile: KurtosisProfile, factor_bits: int = 3,
                   seed: int = 0, quantize_factors: bool = True) -> CompressedModel:
    """Quantize every projection and attach its allocated-rank compensator.

    Ranks are clamped to min(m, n) of each projection (bucket values can
    exceed small toy matrices).  Per-record seeds derive from the global seed
    so parallel workers are deterministic regardless of completion order.
    ``quantize_factors=False`` keeps real-valued factors (test hook; such
    artifacts cannot be persisted).
    """
    kappa = {(e.layer_id, e.expert_id, e.projection_id): e.kurtosis
             for e in profile.entries}
    header = ArtifactHeader(
        hidden=model.hidden,
        ffn=model.ffn,
        num_layers=model.num_layers,
        num_experts=model.num_experts,
        num_shared=model.num_shared,
        top_k=model.top_k,
        quant=qcfg,
        buckets=allocation.buckets,
        avg_budget=allocation.avg_budget,
        seed=seed,
    )
    cm = CompressedModel(header)
    jobs = list(model.iter_projections())

    def run_one(job):
        layer_id, expert_id, proj, w = job
        key = (layer_id, expert_id, proj)
        qm = quantize(w, qcfg)
        rank = min(allocation.ranks[key], min(w.shape))
        comp = None
        if rank > 0:
            rec_seed = int(np.random.SeedSequence(
                [seed, layer_id, expert_id, PROJECTIONS.index(proj)]
            ).generate_state(1)[0])
            comp = build_compensator(w, qm, rank, factor_bits=factor_bits,
                                     projection_id=proj, seed=rec_seed,
                                     quantize_factors=quantize_factors)
        return ProjRecord(layer=layer_id, expert=expert_id, projection=proj,
                          qm=qm, comp=comp, kurtosis=kappa[key], rank=rank)

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        for record in pool.map(run_one, jobs):
            cm.add(record)
    cm.validate()
    return cm


def save_allocation_json(allocation: RankAllocation, profile: KurtosisProfile,
                         path: str | Path) -> None:
    doc = {
        "buckets": list(allocation.buckets),
        "avg_budget": allocation.avg_budget,
        "entries": allocation.to_table(profile),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_allocation_json(path: str | Path) -> RankAllocation:
    p = Path(path)
    if not p.exists():
        raise RunError(f"allocation file not found: {p}")
    doc = json.loads(p.read_text())
    ranks = {
        (e["layer"], e["expert"], e["projection"]): int(e["rank"])
        for e in doc["entries"]
    }
    return RankAllocation(buckets=tuple(doc["buckets"]),
                          avg_budget=int(doc["avg_budget"]), ranks=ranks)


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise RunError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def run_gen(cfg: RunConfig, out: str | Path) -> dict:
    """Generate the synthetic model and persist it under ``out``/model."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    model_path = out / "model"
    save_model(model, model_path)
    return {
        "model_path": str(model_path),
        "hidden": model.hidden,
        "ffn": model.ffn,
        "num_layers": model.num_layers,
        "num_experts": model.num_experts,
        "num_shared": model.num_shared,
        "top_k": model.top_k,
        "seed": cfg.seed,
    }


def run_stats(cfg: RunConfig, model_path: str | Path, out: str | Path) -> dict:
    """Kurtosis/error report, routing-score stats, and the routing trace."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(_require(model_path, "model"))

    report = kurtosis_error_report(model, quant_config(cfg))
    kurt_rows = [
        {
            "layer": s.layer_id,
            "expert": s.expert_id,
            "projection": s.projection_id,
            "kurtosis": s.kurtosis,
            "rel_fro": s.rel_fro,
            "degenerate": int(s.degenerate),
        }
        for s in report.stats
    ]
    kurt_csv = out / "kurtosis.csv"
    write_csv(kurt_csv, ["layer", "expert", "projection", "kurtosis", "rel_fro",
                         "degenerate"], kurt_rows)

    fcfg = forward_config(cfg)
    trace = build_trace(model, fcfg, cfg.forward.num_tokens, seed=cfg.seed + 1)
    trace_path = out / "trace.jsonl"
    trace.to_jsonl(trace_path)

    stats = routing_stats(trace)
    stat_rows = []
    for position, mean in enumerate(stats.aggregate):
        stat_rows.append({"layer": -1, "position": position + 1, "mean_score": float(mean)})
    for layer_id, means in stats.per_layer.items():
        for position, mean in enumerate(means):
            stat_rows.append(
                {"layer": layer_id, "position": position + 1, "mean_score": float(mean)}
            )
    routing_csv = out / "routing_stats.csv"
    write_csv(routing_csv, ["layer", "position", "mean_score"], stat_rows)

    return {
        "kurtosis_csv": str(kurt_csv),
        "routing_csv": str(routing_csv),
        "trace_path": str(trace_path),
        "spearman_kurtosis_error": report.spearman,
        "spearman_degenerate": report.degenerate,
        "top1_mean_score": float(stats.aggregate[0]),
        "top2_mean_score": float(stats.aggregate[1]) if stats.aggregate.size > 1 else None,
        "num_tokens": stats.num_tokens,
    }


def run_compress(cfg: RunConfig, model_path: str | Path, out: str | Path) -> dict:
    """Quantize + allocate ranks + build compensators; write the artifact."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(_require(model_path, "model"))

    profile = kurtosis_profile(model)
    alloc_cfg = cfg.allocation
    if alloc_cfg.uniform_rank is not None:
        allocation = uniform_allocation(profile, alloc_cfg.uniform_rank)
    else:
        allocation = allocate_ranks(profile, alloc_cfg.avg_budget,
                                    buckets=tuple(alloc_cfg.buckets),
                                    per_layer=(alloc_cfg.scope == "per_layer"))
    cm = compress_model(model, quant_config(cfg), allocation, profile,
                        seed=cfg.seed)

    artifact_path = out / "artifact"
    save_artifact(cm, artifact_path)
    alloc_path = out / "allocation.json"
    save_allocation_json(allocation, profile, alloc_path)

    sizes = artifact_packed_bytes(cm)
    return {
        "artifact_path": str(artifact_path),
        "allocation_path": str(alloc_path),
        "num_records": len(cm.records),
        "total_rank": allocation.total(),
        "weight_bytes": sizes["weight_bytes"],
        "compensator_bytes": sizes["compensator_bytes"],
    }


def run_infer(cfg: RunConfig, model_path: str | Path, artifact_path: str | Path,
              out: str | Path, mode: str = "compensated") -> dict:
    """Fidelity of quantized/compensated forwards against the reference."""
    if mode not in ("reference", "quantized", "compensated"):
        raise ConfigError(f"mode: unknown mode {mode!r}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(_require(model_path, "model"))
    cm = load_artifact(_require(artifact_path, "artifact"))
    if (cm.header.hidden, cm.header.ffn) != (model.hidden, model.ffn):
        raise RunError(
            f"artifact dims ({cm.header.hidden}, {cm.header.ffn}) do not match "
            f"model ({model.hidden}, {model.ffn})"
        )

    tokens = gen_tokens(cfg.seed + 2, model.hidden, cfg.forward.num_tokens)
    report = evaluate_fidelity(model, cm, tokens, forward_config(cfg))

    rows = [
        {"mode": m, "mean_rel_err": report.mean_rel_err[m],
         "win_rate_vs_quantized": report.win_rate if m == "compensated" else "",
         "num_tokens": report.num_tokens}
        for m in ("reference", "quantized", "compensated")
    ]
    fidelity_csv = out / "fidelity.csv"
    write_csv(fidelity_csv, ["mode", "mean_rel_err", "win_rate_vs_quantized",
                             "num_tokens"], rows)
    return {
        "fidelity_csv": str(fidelity_csv),
        "mode": mode,
        "mean_rel_err": report.mean_rel_err[mode],
        "mean_rel_err_quantized": report.mean_rel_err["quantized"],
        "mean_rel_err_compensated": report.mean_rel_err["compensated"],
        "win_rate": report.win_rate,
        "num_tokens": report.num_tokens,
    }


SIM_CSV_HEADER = [
    "plan", "system", "input_len", "output_len", "expert_bits", "top_n", "rank",
    "tokens_per_s", "decode_s", "transfer_s", "compute_s", "ndp_compute_s",
    "total_bytes_moved", "cache_hit_rate", "prefill_s", "prefill_bytes",
]


def _plans_from_config(cfg: RunConfig) -> list[TransferPlan]:
    plans = []
    for spec in cfg.simulate.plans:
        allocation = None
        if spec.allocation_path is not None:
            allocation = load_allocation_json(spec.allocation_path)
        plans.append(
            TransferPlan(
                name=spec.name,
                expert_bits=spec.expert_bits,
                top_n=spec.top_n,
                rank=spec.rank,
                allocation=allocation,
                factor_bits=spec.factor_bits,
                cache_policy=spec.cache_policy,
                cache_budget_bytes=spec.cache_budget_bytes,
            )
        )
    return plans


def run_simulate(cfg: RunConfig, trace_path: str | Path, out: str | Path) -> dict:
    """Replay the trace through every (plan, system, output_len) cell."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trace = RoutingTrace.from_jsonl(_require(trace_path, "trace"))
    dims = cfg.simulate.resolved_dims()
    systems = [s.resolve() for s in cfg.simulate.systems]
    plans = _plans_from_config(cfg)

    reports = sweep_report(trace, dims, plans, systems,
                           output_lens=cfg.simulate.output_lens,
                           input_len=cfg.simulate.input_len,
                           include_prefill=cfg.simulate.include_prefill)
    plan_by_name = {p.name: p for p in plans}
    rows = []
    for r in reports:
        plan = plan_by_name[r.plan]
        row = r.as_row()
        row.update({"expert_bits": plan.expert_bits, "top_n": plan.top_n,
                    "rank": plan.rank})
        rows.append(row)
    sim_csv = out / "sim_report.csv"
    write_csv(sim_csv, SIM_CSV_HEADER, rows)

    speedups = {}
    for sys_name in {r.system for r in reports}:
        for out_len in cfg.simulate.output_lens:
            cell = [r for r in reports if r.system == sys_name and r.output_len == out_len]
            if len(cell) < 2:
                continue
            base = cell[0]
            for r in cell[1:]:
                speedups[f"{r.plan}_vs_{base.plan}@{sys_name}/{out_len}"] = (
                    r.tokens_per_s / base.tokens_per_s
                )
    return {"sim_csv": str(sim_csv), "rows": len(rows), "speedups": speedups}


REPORT_CSV_HEADER = [
    "plan", "system", "output_len", "expert_bits", "top_n", "rank", "tokens_per_s",
    "total_bytes_moved", "speedup_vs_first_plan", "fidelity_mode", "mean_rel_err",
]


def run_report(out: str | Path, sim_csv: str | Path | None = None,
               fidelity_csv: str | Path | None = None) -> dict:
    """Merge throughput rows with fidelity numbers into one trade-off table."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    fidelity = {}
    if fidelity_csv is not None:
        with open(_require(fidelity_csv, "fidelity csv")) as f:
            for row in csv.DictReader(f):
                fidelity[row["mode"]] = float(row["mean_rel_err"])

    rows = []
    if sim_csv is not None:
        with open(_require(sim_csv, "simulation csv")) as f:
            sim_rows = list(csv.DictReader(f))
        base_tps: dict[tuple, float] = {}
        for row in sim_rows:
            key = (row["system"], row["output_len"])
            base_tps.setdefault(key, float(row["tokens_per_s"]))
        for row in sim_rows:
            bits = int(row["expert_bits"])
            top_n = int(row["top_n"])
            if bits == 16:
                mode = "reference"
            elif top_n > 0:
                mode = "compensated"
            else:
                mode = "quantized"
            key = (row["system"], row["output_len"])
            rows.append(
                {
                    "plan": row["plan"],
                    "system": row["system"],
                    "output_len": int(row["output_len"]),
                    "expert_bits": bits,
                    "top_n": top_n,
                    "rank": int(row["rank"]),
                    "tokens_per_s": float(row["tokens_per_s"]),
                    "total_bytes_moved": int(row["total_bytes_moved"]),
                    "speedup_vs_first_plan": float(row["tokens_per_s"]) / base_tps[key],
                    "fidelity_mode": mode,
                    "mean_rel_err": fidelity.get(mode, ""),
                }
            )
    report_csv = out / "tradeoff.csv"
    write_csv(report_csv, REPORT_CSV_HEADER, rows)
    return {"report_csv": str(report_csv), "rows": len(rows)}
