"""Low-rank residual compensators for quantized weight matrices.

A compensator approximates the quantization residual ``W - deq(Q(W))`` with a
rank-r factor pair built from a truncated SVD.  The singular values are folded
symmetrically into both factors (``U * sqrt(S)`` / ``sqrt(S) * V``) and the
factors themselves are stored at 3 bits through the same groupwise quantizer,
so the whole artifact stays byte-cheap to move.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .quant import QuantConfig, QuantizedMatrix, dequantize, quantize

SVD_OVERSAMPLE = 8
SVD_MIN_ITERS = 8
SVD_MAX_ITERS = 600
# Subspace iteration stops once the captured top-r energy stalls relative to
# the total energy on two consecutive passes.
SVD_STALL_REL = 1e-14

Factor = Union[QuantizedMatrix, np.ndarray]


class CompensatorError(ValueError):
    """Raised for shape or rank violations in compensator operations."""


@dataclass
class Compensator:
    """Rank-r factor pair correcting one projection's quantization residual.

    Factors are quantized matrices in the shipped artifact; raw ndarrays are
    accepted as a test hook for exact-compensation checks.  ``rank == 0``
    means no correction (both factors None).
    """

    rank: int
    u: Factor | None
    v: Factor | None
    projection_id: str = ""
    factor_bits: int = 3

    def factors_quantized(self) -> bool:
        return isinstance(self.u, QuantizedMatrix)


@dataclass
class ResidualStats:
    """Relative residual size and kurtosis for one projection matrix."""

    rel_fro: float
    kurtosis: float
    layer_id: int
    expert_id: int
    projection_id: str
    degenerate: bool = False


def residual(w: np.ndarray, qm: QuantizedMatrix) -> np.ndarray:
    """Quantization error ``W - deq(Q(W))``, elementwise exact."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (qm.rows, qm.cols):
        raise CompensatorError(f"shape mismatch: {w.shape} vs {(qm.rows, qm.cols)}")
    return w - dequantize(qm)


def truncated_svd(e: np.ndarray, r: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rank-r SVD of a dense matrix by randomized subspace iteration.

    Sketches ``r + 8`` directions and runs power passes until the captured
    top-r energy stalls (at least 8, at most 600 passes), then solves the
    small projected problem.  Deterministic for a fixed ``seed``.  Returns
    ``(U, S, Vt)`` with U ``(m, r)``, S ``(r,)`` non-increasing, Vt ``(r, n)``.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2:
        raise CompensatorError(f"expected a 2-D matrix, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise CompensatorError("matrix contains non-finite values")
    m, n = e.shape
    if r < 0 or r > min(m, n):
        raise CompensatorError(f"rank {r} outside [0, {min(m, n)}] for shape {e.shape}")
    if r == 0:
        return np.zeros((m, 0)), np.zeros(0), np.zeros((0, n))

    p = min(r + SVD_OVERSAMPLE, min(m, n))
    rng = np.random.default_rng(seed)
    q_basis, _ = np.linalg.qr(e @ rng.standard_normal((n, p)))

    total_energy = float(np.sum(e * e))
    exact = p == min(m, n)  # sketch spans the full row/column space
    if not exact and total_energy > 0.0:
        captured_prev = -1.0
        stalled = 0
        for it in range(SVD_MAX_ITERS):
            q_basis, _ = np.linalg.qr(e @ (e.T @ q_basis))
            b = q_basis.T @ e
            captured = float(np.sum(np.linalg.svd(b, compute_uv=False)[:r] ** 2))
            if it + 1 >= SVD_MIN_ITERS:
                if abs(captured - captured_prev) <= SVD_STALL_REL * total_energy:
                    stalled += 1
                    if stalled >= 2:
                        break
                else:
                    stalled = 0
            captured_prev = captured

    b = q_basis.T @ e
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    return q_basis @ ub[:, :r], s[:r], vt[:r]


def default_factor_config(row_length: int, factor_bits: int = 3) -> QuantConfig:
    """Groupwise config used for compensator factors (one quantizer codepath)."""
    return QuantConfig(bits=factor_bits, group_size=min(64, max(1, row_length)))


def build_compensator(w: np.ndarray, qm: QuantizedMatrix, r: int, factor_bits: int = 3,
                      projection_id: str = "", quantize_factors: bool = True,
                      seed: int = 0) -> Compensator:
    """Factor the quantization residual of ``w`` at rank ``r``.

    Singular values are split as sqrt(S) into both factors before the factors
    are quantized at ``factor_bits``.  ``quantize_factors=False`` keeps the
    real-valued factors (test hook for exact-compensation checks).
    """
    if r == 0:
        return Compensator(rank=0, u=None, v=None, projection_id=projection_id,
                           factor_bits=factor_bits)
    e = residual(w, qm)
    u, s, vt = truncated_svd(e, r, seed=seed)
    root_s = np.sqrt(s)
    u_w = u * root_s[None, :]
    v_w = root_s[:, None] * vt
    if quantize_factors:
        u_q = quantize(u_w, default_factor_config(u_w.shape[1], factor_bits))
        v_q = quantize(v_w, default_factor_config(v_w.shape[1], factor_bits))
        return Compensator(rank=r, u=u_q, v=v_q, projection_id=projection_id,
                           factor_bits=factor_bits)
    return Compensator(rank=r, u=u_w, v=v_w, projection_id=projection_id,
                       factor_bits=factor_bits)


def _factor_matrix(f: Factor) -> np.ndarray:
    return dequantize(f) if isinstance(f, QuantizedMatrix) else f


def apply_compensation(qm: QuantizedMatrix, comp: Compensator | None) -> np.ndarray:
    """Reconstruct weights on the fly: ``deq(Q(W)) + U V``."""
    deq = dequantize(qm)
    if comp is None or comp.rank == 0:
        return deq
    u = _factor_matrix(comp.u)
    v = _factor_matrix(comp.v)
    if u.shape != (qm.rows, comp.rank) or v.shape != (comp.rank, qm.cols):
        raise CompensatorError(
            f"factor shapes {u.shape}/{v.shape} incompatible with "
            f"({qm.rows}, {qm.cols}) at rank {comp.rank}"
        )
    return deq + u @ v


def compensator_size_bytes(m: int, n_cols: int, r: int, factor_bits: int = 3) -> int:
    """Bytes to store one projection's rank-r factor pair at ``factor_bits``."""
    if m < 0 or n_cols < 0 or r < 0 or factor_bits < 0:
        raise CompensatorError("sizes must be non-negative")
    return ((m + n_cols) * r * factor_bits + 7) // 8
