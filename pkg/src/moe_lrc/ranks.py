"""Kurtosis statistics and budgeted compensator-rank allocation.

Heavier-tailed weight matrices quantize worse, so each projection's rank is
chosen from a small bucket set by a greedy pass over the matrices sorted by
kurtosis: every matrix gets the largest bucket that still fits under the
global ``N * avg_budget`` total.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lowrank import ResidualStats, residual
from .quant import QuantConfig, quantize

DEFAULT_BUCKETS = (0, 16, 32, 128, 256, 512, 1024)

PROJECTIONS = ("w1", "w2", "w3")


class AllocationError(ValueError):
    """Raised for invalid allocation inputs."""


def kurtosis(w: np.ndarray) -> float:
    """Population kurtosis over all elements (no excess-3 subtraction).

    Constant matrices have an undefined fourth standardized moment; they
    return 0.0 and are treated as degenerate by callers.
    """
    flat = np.asarray(w, dtype=np.float64).ravel()
    if flat.size == 0:
        raise AllocationError("kurtosis of an empty matrix")
    mu = flat.mean()
    dev = flat - mu
    var = np.mean(dev * dev)
    if var == 0.0:
        return 0.0
    return float(np.mean(dev**4) / (var * var))


def is_degenerate(w: np.ndarray) -> bool:
    """True when the matrix is constant (kurtosis undefined)."""
    flat = np.asarray(w).ravel()
    return flat.size == 0 or bool(np.all(flat == flat[0]))


@dataclass(frozen=True)
class KurtosisEntry:
    layer_id: int
    expert_id: int
    projection_id: str
    kurtosis: float


@dataclass
class KurtosisProfile:
    """Per-projection kurtosis values plus the common element count."""

    entries: list[KurtosisEntry]
    d: int = 0

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class RankAllocation:
    """Bucketed ranks per (layer, expert, projection) under an average budget."""

    buckets: tuple[int, ...]
    avg_budget: int
    ranks: dict[tuple[int, int, str], int] = field(default_factory=dict)

    def total(self) -> int:
        return sum(self.ranks.values())

    def rank_of(self, layer_id: int, expert_id: int, projection_id: str) -> int:
        return self.ranks[(layer_id, expert_id, projection_id)]

    def to_table(self, profile: KurtosisProfile | None = None) -> list[dict]:
        """Audit rows (layer, expert, projection, kurtosis, rank)."""
        kappa = {}
        if profile is not None:
            kappa = {
                (e.layer_id, e.expert_id, e.projection_id): e.kurtosis
                for e in profile.entries
            }
        rows = []
        for key in sorted(self.ranks):
            layer_id, expert_id, projection_id = key
            rows.append(
                {
                    "layer": layer_id,
                    "expert": expert_id,
                    "projection": projection_id,
                    "kurtosis": kappa.get(key, float("nan")),
                    "rank": self.ranks[key],
                }
            )
        return rows


def allocate_ranks(profile: KurtosisProfile, avg_budget: int,
                   buckets: tuple[int, ...] = DEFAULT_BUCKETS,
                   per_layer: bool = False) -> RankAllocation:
    """Greedy bucketed allocation under a total budget of ``N * avg_budget``.

    Entries are visited in descending kurtosis order (ties broken by
    (layer, expert, projection) ascending); each receives the largest bucket
    value that keeps the running total within budget.  With ``per_layer`` the
    budget is applied independently within each layer instead of globally.
    """
    if avg_budget < 0:
        raise AllocationError(f"avg_budget must be >= 0, got {avg_budget}")
    bucket_set = tuple(sorted(set(int(b) for b in buckets)))
    if not bucket_set or bucket_set[0] != 0:
        raise AllocationError("buckets must contain 0")
    if any(b < 0 for b in bucket_set):
        raise AllocationError("buckets must be non-negative")
    seen = set()
    for e in profile.entries:
        key = (e.layer_id, e.expert_id, e.projection_id)
        if key in seen:
            raise AllocationError(f"duplicate profile entry {key}")
        seen.add(key)

    allocation = RankAllocation(buckets=bucket_set, avg_budget=avg_budget)
    if per_layer:
        layers = sorted({e.layer_id for e in profile.entries})
        for layer_id in layers:
            subset = [e for e in profile.entries if e.layer_id == layer_id]
            _greedy_fill(subset, avg_budget, bucket_set, allocation.ranks)
    else:
        _greedy_fill(profile.entries, avg_budget, bucket_set, allocation.ranks)
    return allocation


def _greedy_fill(entries: list[KurtosisEntry], avg_budget: int,
                 buckets: tuple[int, ...], out: dict) -> None:
    budget = len(entries) * avg_budget
    order = sorted(
        entries,
        key=lambda e: (-e.kurtosis, e.layer_id, e.expert_id, e.projection_id),
    )
    remaining = budget
    for e in order:
        r = max(b for b in buckets if b <= remaining)
        out[(e.layer_id, e.expert_id, e.projection_id)] = r
        remaining -= r


def spearman(x: np.ndarray, y: np.ndarray) -> float | None:
    """Spearman rank correlation with average ranks for ties.

    Returns None when fewer than two pairs exist or either variable has no
    rank variance (degenerate).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise AllocationError("spearman expects two equal-length vectors")
    if x.size < 2:
        return None
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def kurtosis_profile(model) -> KurtosisProfile:
    """Kurtosis of every projection matrix of ``model`` (see iter_projections)."""
    entries = []
    d = 0
    for layer_id, expert_id, projection_id, w in model.iter_projections():
        entries.append(KurtosisEntry(layer_id, expert_id, projection_id, kurtosis(w)))
        d = w.size
    return KurtosisProfile(entries=entries, d=d)


@dataclass
class KurtosisErrorReport:
    """Kurtosis vs. relative quantization error, with their rank correlation."""

    stats: list[ResidualStats]
    spearman: float | None
    degenerate: bool


def kurtosis_error_report(model, quant_cfg: QuantConfig) -> KurtosisErrorReport:
    """Quantize every projection and relate kurtosis to relative residual size.

    The correlation is None (degenerate) with fewer than two projections or
    when either variable has no rank variance, e.g. identical experts.
    """
    stats = []
    for layer_id, expert_id, projection_id, w in model.iter_projections():
        qm = quantize(w, quant_cfg)
        w_norm = float(np.linalg.norm(w))
        rel = float(np.linalg.norm(residual(w, qm))) / w_norm if w_norm > 0 else 0.0
        stats.append(
            ResidualStats(
                rel_fro=rel,
                kurtosis=kurtosis(w),
                layer_id=layer_id,
                expert_id=expert_id,
                projection_id=projection_id,
                degenerate=is_degenerate(w),
            )
        )
    rho = spearman(
        np.array([s.kurtosis for s in stats]),
        np.array([s.rel_fro for s in stats]),
    ) if len(stats) >= 2 else None
    return KurtosisErrorReport(stats=stats, spearman=rho, degenerate=rho is None)
