"""Desk-scale MoE forward passes and synthetic model generation.

Layers are SiLU-gated MLP experts behind a softmax router.  Forward passes run
in three modes: full-precision reference, low-bit quantized, and compensated,
where only the top-n routed experts get their low-rank residual correction
while the rest stay in plain low-bit form.  Synthetic models draw expert
weights from unit-variance Student-t tails (heavier tails = higher kurtosis)
and a gate whose logit scale tunes how skewed the routing scores are.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lowrank import apply_compensation
from .quant import dequantize
from .ranks import PROJECTIONS

MODES = ("reference", "quantized", "compensated")


class MoEError(ValueError):
    """Raised for invalid model, config or trace inputs."""


class MissingArtifactError(KeyError):
    """A selected expert has no quantized weights in the artifact store."""


@dataclass
class Expert:
    """One gated-MLP expert: y = w2 @ (silu(w1 @ x) * (w3 @ x))."""

    w1: np.ndarray  # (ffn, hidden)
    w3: np.ndarray  # (ffn, hidden)
    w2: np.ndarray  # (hidden, ffn)


@dataclass
class MoELayer:
    gate: np.ndarray  # (hidden, num_experts), logits = gate.T @ x
    experts: list[Expert]
    shared_experts: list[Expert] = field(default_factory=list)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def num_shared(self) -> int:
        return len(self.shared_experts)


@dataclass
class MoEModel:
    hidden: int
    ffn: int
    layers: list[MoELayer]
    top_k: int
    seed: int = 0
    router_skew: float = 1.0
    tail_dofs: tuple[float, ...] = ()

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_experts(self) -> int:
        return self.layers[0].num_experts

    @property
    def num_shared(self) -> int:
        return self.layers[0].num_shared

    def iter_projections(self):
        """Yield (layer_id, expert_id, projection_id, matrix) for every expert
        projection; shared experts get ids >= num_experts."""
        for layer_id, layer in enumerate(self.layers):
            all_experts = list(layer.experts) + list(layer.shared_experts)
            for expert_id, expert in enumerate(all_experts):
                for proj in PROJECTIONS:
                    yield layer_id, expert_id, proj, getattr(expert, proj)


@dataclass(frozen=True)
class ForwardConfig:
    top_k: int
    top_n: int = 0
    renormalize_topk: bool = False
    compensate_shared: bool = True  # shared experts use compensators when present

    def __post_init__(self) -> None:
        if self.top_k < 0 or self.top_n < 0:
            raise MoEError("top_k and top_n must be >= 0")
        if self.top_n > self.top_k:
            raise MoEError(f"top_n ({self.top_n}) must be <= top_k ({self.top_k})")


@dataclass
class TraceRecord:
    token: int
    layer: int
    scores: np.ndarray
    selected: list[int]
    compensated: list[int]


@dataclass
class RoutingTrace:
    records: list[TraceRecord]

    def num_tokens(self) -> int:
        return len({r.token for r in self.records})

    def num_layers(self) -> int:
        return len({r.layer for r in self.records})

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(
                    json.dumps(
                        {
                            "token": r.token,
                            "layer": r.layer,
                            "scores": [float(s) for s in r.scores],
                            "selected": [int(i) for i in r.selected],
                            "compensated": [int(i) for i in r.compensated],
                        }
                    )
                    + "\n"
                )

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "RoutingTrace":
        records = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                records.append(
                    TraceRecord(
                        token=int(d["token"]),
                        layer=int(d["layer"]),
                        scores=np.asarray(d["scores"], dtype=np.float64),
                        selected=[int(i) for i in d["selected"]],
                        compensated=[int(i) for i in d["compensated"]],
                    )
                )
        return cls(records=records)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def expert_forward(expert_w1: np.ndarray, expert_w3: np.ndarray, expert_w2: np.ndarray,
                   x: np.ndarray) -> np.ndarray:
    return expert_w2 @ (silu(expert_w1 @ x) * (expert_w3 @ x))


@dataclass
class RouteResult:
    weights: np.ndarray      # softmax over all routed experts
    selected: list[int]      # top_k expert ids, score-descending
    compensated: list[int]   # first top_n of selected


def route(x: np.ndarray, layer: MoELayer, cfg: ForwardConfig) -> RouteResult:
    """Softmax routing with fixed lower-index tie-breaking."""
    if x.shape != (layer.gate.shape[0],):
        raise MoEError(f"token dim {x.shape} does not match gate {layer.gate.shape}")
    if cfg.top_k > layer.num_experts:
        raise MoEError(f"top_k {cfg.top_k} exceeds {layer.num_experts} experts")
    weights = softmax(layer.gate.T @ x)
    order = np.argsort(-weights, kind="stable")
    selected = [int(i) for i in order[: cfg.top_k]]
    compensated = selected[: cfg.top_n]
    return RouteResult(weights=weights, selected=selected, compensated=compensated)


def _resolve_weights(artifacts, layer_id: int, expert_id: int, compensate: bool):
    """Dequantized (optionally compensated) (w1, w3, w2) triple for one expert."""
    mats = {}
    for proj in PROJECTIONS:
        try:
            rec = artifacts.get(layer_id, expert_id, proj)
        except (KeyError, AttributeError) as exc:
            raise MissingArtifactError(
                f"no artifact for layer {layer_id}, expert {expert_id}, {proj}"
            ) from exc
        if rec is None:
            raise MissingArtifactError(
                f"no artifact for layer {layer_id}, expert {expert_id}, {proj}"
            )
        if compensate:
            mats[proj] = apply_compensation(rec.qm, rec.comp)
        else:
            mats[proj] = dequantize(rec.qm)
    return mats["w1"], mats["w3"], mats["w2"]


def forward(x: np.ndarray, layer: MoELayer, cfg: ForwardConfig, mode: str = "reference",
            artifacts=None, layer_id: int = 0) -> np.ndarray:
    """One MoE layer forward pass for a single token.

    ``reference`` uses the stored full-precision weights.  ``quantized``
    replaces every executed expert with its dequantized low-bit form.
    ``compensated`` additionally applies the low-rank correction to the top-n
    selected experts (and to shared experts when they have compensators).
    ``artifacts`` must provide ``get(layer_id, expert_id, projection_id)``
    returning an object with ``qm`` and ``comp`` attributes.
    """
    if mode not in MODES:
        raise MoEError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode != "reference" and artifacts is None:
        raise MissingArtifactError(f"mode {mode!r} requires artifacts")

    rr = route(x, layer, cfg)
    mix = rr.weights[rr.selected]
    if cfg.renormalize_topk and mix.sum() > 0:
        mix = mix / mix.sum()
    compensated_set = set(rr.compensated)

    y = np.zeros(layer.gate.shape[0])
    for weight, expert_id in zip(mix, rr.selected):
        if mode == "reference":
            e = layer.experts[expert_id]
            w1, w3, w2 = e.w1, e.w3, e.w2
        else:
            compensate = mode == "compensated" and expert_id in compensated_set
            w1, w3, w2 = _resolve_weights(artifacts, layer_id, expert_id, compensate)
        y += weight * expert_forward(w1, w3, w2, x)

    # Shared experts always execute with unit weight; in compensated mode they
    # use their compensators when present (unless compensate_shared is off).
    for j, e in enumerate(layer.shared_experts):
        shared_id = layer.num_experts + j
        if mode == "reference":
            w1, w3, w2 = e.w1, e.w3, e.w2
        else:
            comp_shared = mode == "compensated" and cfg.compensate_shared
            w1, w3, w2 = _resolve_weights(artifacts, layer_id, shared_id, comp_shared)
        y += expert_forward(w1, w3, w2, x)
    return y


def _draw_tail(rng: np.random.Generator, dof: float, size) -> np.ndarray:
    """Unit-variance sample: Student-t for finite dof, Gaussian for dof=inf."""
    if math.isinf(dof):
        return rng.standard_normal(size)
    return rng.standard_t(dof, size) / math.sqrt(dof / (dof - 2.0))


def gen_synthetic_model(seed: int, hidden: int, ffn: int, num_layers: int,
                        num_experts: int, top_k: int = 2, num_shared: int = 0,
                        tail_dofs: tuple[float, ...] | None = None,
                        router_skew: float = 1.0) -> MoEModel:
    """Deterministic synthetic MoE model.

    ``tail_dofs`` cycles over experts; each expert's projections are drawn
    from a unit-variance Student-t with that dof, so lower dof means heavier
    tails and higher kurtosis.  Gate columns are unit-normalized and scaled by
    ``router_skew``: larger values concentrate routing scores on the top
    expert.  All draws come from one seeded generator in a fixed order.
    """
    if hidden <= 0 or ffn <= 0 or num_layers <= 0 or num_experts <= 0:
        raise MoEError("hidden, ffn, num_layers and num_experts must be positive")
    if not 0 <= top_k <= num_experts:
        raise MoEError(f"top_k {top_k} outside [0, {num_experts}]")
    if num_shared < 0:
        raise MoEError("num_shared must be >= 0")
    if router_skew < 0:
        raise MoEError("router_skew must be >= 0")
    dofs = tuple(float(d) for d in (tail_dofs or (math.inf,)))
    for d in dofs:
        if not d > 2.0:
            raise MoEError(f"tail dof must be > 2 (got {d}); variance is undefined below")

    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(num_layers):
        gate = rng.standard_normal((hidden, num_experts))
        gate = gate / np.linalg.norm(gate, axis=0, keepdims=True) * router_skew
        experts = []
        for e in range(num_experts + num_shared):
            dof = dofs[e % len(dofs)]
            experts.append(
                Expert(
                    w1=_draw_tail(rng, dof, (ffn, hidden)),
                    w3=_draw_tail(rng, dof, (ffn, hidden)),
                    w2=_draw_tail(rng, dof, (hidden, ffn)),
                )
            )
        layers.append(
            MoELayer(gate=gate, experts=experts[:num_experts],
                     shared_experts=experts[num_experts:])
        )
    return MoEModel(hidden=hidden, ffn=ffn, layers=layers, top_k=top_k, seed=seed,
                    router_skew=router_skew, tail_dofs=dofs)


def gen_tokens(seed: int, hidden: int, count: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((count, hidden))


def build_trace(model: MoEModel, cfg: ForwardConfig, num_tokens: int,
                seed: int) -> RoutingTrace:
    """Route ``num_tokens`` random tokens through every layer."""
    tokens = gen_tokens(seed, model.hidden, num_tokens)
    records = []
    for t in range(num_tokens):
        for layer_id, layer in enumerate(model.layers):
            rr = route(tokens[t], layer, cfg)
            records.append(
                TraceRecord(token=t, layer=layer_id, scores=rr.weights,
                            selected=rr.selected, compensated=rr.compensated)
            )
    return RoutingTrace(records=records)


@dataclass
class RoutingStatsReport:
    """Mean of the i-th largest routing score, per layer and aggregate."""

    aggregate: np.ndarray
    per_layer: dict[int, np.ndarray]
    num_tokens: int


def routing_stats(trace: RoutingTrace) -> RoutingStatsReport:
    if not trace.records:
        raise MoEError("empty trace")
    by_layer: dict[int, list[np.ndarray]] = {}
    for r in trace.records:
        by_layer.setdefault(r.layer, []).append(np.sort(r.scores)[::-1])
    per_layer = {lid: np.mean(np.stack(rows), axis=0) for lid, rows in sorted(by_layer.items())}
    aggregate = np.mean(
        np.stack([np.sort(r.scores)[::-1] for r in trace.records]), axis=0
    )
    return RoutingStatsReport(aggregate=aggregate, per_layer=per_layer,
                              num_tokens=trace.num_tokens())


class _WeightMemo:
    """Caches dequantized / compensated projection triples across tokens."""

    def __init__(self, artifacts):
        self.artifacts = artifacts
        self._memo: dict[tuple[int, int, bool], list[np.ndarray]] = {}

    def get(self, layer_id: int, expert_id: int, compensate: bool):
        key = (layer_id, expert_id, compensate)
        if key not in self._memo:
            self._memo[key] = _resolve_weights(self.artifacts, layer_id, expert_id,
                                               compensate)
        return self._memo[key]


@dataclass
class FidelityReport:
    mean_rel_err: dict[str, float]
    win_rate: float
    per_token: dict[str, np.ndarray]
    num_tokens: int


def evaluate_fidelity(model: MoEModel, artifacts, tokens: np.ndarray,
                      cfg: ForwardConfig) -> FidelityReport:
    """Relative output error of quantized and compensated modes vs reference.

    Errors ||y_mode - y_ref|| / ||y_ref|| are averaged over tokens and layers;
    the win rate is the fraction of tokens whose layer-averaged compensated
    error is strictly below the quantized one.
    """
    if tokens.size == 0:
        raise MoEError("tokens must be non-empty")
    memo = _WeightMemo(artifacts)
    per_token: dict[str, list[float]] = {"quantized": [], "compensated": []}

    for x in tokens:
        errs = {"quantized": [], "compensated": []}
        for layer_id, layer in enumerate(model.layers):
            rr = route(x, layer, cfg)
            mix = rr.weights[rr.selected]
            if cfg.renormalize_topk and mix.sum() > 0:
                mix = mix / mix.sum()
            comp_set = set(rr.compensated)

            y = {m: np.zeros(model.hidden) for m in MODES}
            for weight, expert_id in zip(mix, rr.selected):
                e = layer.experts[expert_id]
                y["reference"] += weight * expert_forward(e.w1, e.w3, e.w2, x)
                wq = memo.get(layer_id, expert_id, False)
                y["quantized"] += weight * expert_forward(*wq, x)
                wc = memo.get(layer_id, expert_id, expert_id in comp_set)
                y["compensated"] += weight * expert_forward(*wc, x)
            for j, e in enumerate(layer.shared_experts):
                shared_id = layer.num_experts + j
                y["reference"] += expert_forward(e.w1, e.w3, e.w2, x)
                y["quantized"] += expert_forward(*memo.get(layer_id, shared_id, False), x)
                y["compensated"] += expert_forward(
                    *memo.get(layer_id, shared_id, cfg.compensate_shared), x
                )

            ref_norm = float(np.linalg.norm(y["reference"]))
            for m in ("quantized", "compensated"):
                err = float(np.linalg.norm(y[m] - y["reference"]))
                errs[m].append(err / ref_norm if ref_norm > 0 else 0.0)
        for m in ("quantized", "compensated"):
            per_token[m].append(float(np.mean(errs[m])))

    pt = {m: np.asarray(v) for m, v in per_token.items()}
    wins = float(np.mean(pt["compensated"] < pt["quantized"]))
    mean_rel = {m: float(v.mean()) for m, v in pt.items()}
    mean_rel["reference"] = 0.0
    return FidelityReport(mean_rel_err=mean_rel, win_rate=wins, per_token=pt,
                          num_tokens=len(tokens))
