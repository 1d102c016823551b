"""Groupwise asymmetric low-bit weight quantization.

Weights are quantized per group with an affine grid: ``w ~ code * scale + zero``
where ``code`` is an unsigned integer in ``[0, 2**bits - 1]``.  Groups are
contiguous chunks of each row (the input dimension), with a ragged final group
when the row length is not a multiple of ``group_size``.  Affine parameters are
initialized from the per-group min/max and can optionally be refined with a
half-quadratic proximal loop that trades a sparse outlier error against the
grid fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUPPORTED_BITS = (2, 3, 4)

# Proximal refinement schedule. The penalty weight starts at HQQ_BETA and is
# multiplied by HQQ_KAPPA every iteration.
HQQ_BETA = 10.0
HQQ_KAPPA = 1.01


class QuantizationError(ValueError):
    """Raised for invalid quantization inputs or configs."""


@dataclass(frozen=True)
class QuantConfig:
    """Parameters of the groupwise affine quantizer.

    bits: code width, one of 2/3/4.
    group_size: elements per group along each row; the last group of a row
        may be shorter.
    hqq_iters: proximal refinement rounds; 0 keeps the plain min-max fit.
    hqq_shrink_p: exponent of the sparsity-promoting shrink, in (0, 1].
    """

    bits: int = 2
    group_size: int = 64
    hqq_iters: int = 20
    hqq_shrink_p: float = 0.7

    def __post_init__(self) -> None:
        if self.bits not in SUPPORTED_BITS:
            raise QuantizationError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise QuantizationError(f"group_size must be >= 1, got {self.group_size}")
        if self.hqq_iters < 0:
            raise QuantizationError(f"hqq_iters must be >= 0, got {self.hqq_iters}")
        if not (0.0 < self.hqq_shrink_p <= 1.0):
            raise QuantizationError(
                f"hqq_shrink_p must be in (0, 1], got {self.hqq_shrink_p}"
            )


@dataclass
class QuantizedMatrix:
    """Low-bit codes plus per-group affine parameters for one weight matrix.

    ``codes`` holds one unsigned integer per element, row-major, shape
    ``(rows, cols)``.  ``scales`` / ``zero_points`` are shaped
    ``(rows, groups_per_row)`` where ``groups_per_row = ceil(cols / group_size)``.
    """

    rows: int
    cols: int
    bits: int
    group_size: int
    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray

    @property
    def groups_per_row(self) -> int:
        return -(-self.cols // self.group_size)

    @property
    def num_groups(self) -> int:
        return self.rows * self.groups_per_row

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def validate(self) -> None:
        if self.bits not in SUPPORTED_BITS:
            raise QuantizationError(f"unsupported bit width {self.bits}")
        if self.codes.shape != (self.rows, self.cols):
            raise QuantizationError(
                f"codes shape {self.codes.shape} != ({self.rows}, {self.cols})"
            )
        if self.scales.shape != (self.rows, self.groups_per_row):
            raise QuantizationError(
                f"scales shape {self.scales.shape} != ({self.rows}, {self.groups_per_row})"
            )
        if self.zero_points.shape != self.scales.shape:
            raise QuantizationError("zero_points shape differs from scales")
        if self.codes.size and int(self.codes.max()) >= (1 << self.bits):
            raise QuantizationError(f"code out of range for {self.bits} bits")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero (platform independent)."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _shrink_lp(x: np.ndarray, beta: float, p: float) -> np.ndarray:
    """Generalized soft-thresholding toward an l_p-sparse tensor (p <= 1)."""
    ax = np.abs(x)
    if p == 1.0:
        thresh = 1.0 / beta
    else:
        with np.errstate(divide="ignore"):
            thresh = (1.0 / beta) * np.power(ax, p - 1.0)
    return np.sign(x) * np.maximum(ax - thresh, 0.0)


def _to_groups(w: np.ndarray, group_size: int) -> np.ndarray:
    """Reshape (rows, cols) into (rows, groups, group_size), NaN-padding the
    ragged tail of each row."""
    rows, cols = w.shape
    gpr = -(-cols // group_size)
    padded = np.full((rows, gpr * group_size), np.nan)
    padded[:, :cols] = w
    return padded.reshape(rows, gpr, group_size)


def _group_codes(wg: np.ndarray, scales: np.ndarray, zeros: np.ndarray, qmax: int) -> np.ndarray:
    """Quantize grouped values against broadcast (rows, groups, 1) params."""
    with np.errstate(invalid="ignore"):
        codes = round_half_away((wg - zeros) / scales)
        return np.clip(codes, 0.0, float(qmax))


def _group_objective(wg: np.ndarray, codes: np.ndarray, scales: np.ndarray,
                     zeros: np.ndarray, p: float) -> np.ndarray:
    """Mean |residual|^p per group, ignoring padding (shape (rows, groups))."""
    resid = wg - (codes * scales + zeros)
    with np.errstate(invalid="ignore"):
        return np.nanmean(np.abs(resid) ** p, axis=2)


def quantize(w: np.ndarray, cfg: QuantConfig) -> QuantizedMatrix:
    """Quantize a 2-D weight matrix groupwise.

    Per group the affine parameters come from a min-max fit; when
    ``cfg.hqq_iters > 0`` the zero point is refined by alternating a shrink of
    the residual toward an l_p-sparse error with a closed-form zero update,
    keeping the best parameters seen under the l_p objective.  Degenerate
    (constant) groups use scale 1 with the constant as zero, so all codes are 0.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise QuantizationError(f"expected a non-empty 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise QuantizationError("matrix contains non-finite values")

    qmax = (1 << cfg.bits) - 1
    rows, cols = w.shape
    wg = _to_groups(w, cfg.group_size)

    mins = np.nanmin(wg, axis=2, keepdims=True)
    maxs = np.nanmax(wg, axis=2, keepdims=True)
    degenerate = maxs == mins
    scales = np.where(degenerate, 1.0, (maxs - mins) / qmax)
    zeros = mins.copy()

    if cfg.hqq_iters > 0:
        zeros = _refine_zero_points(wg, scales, zeros, qmax, cfg)

    codes = _group_codes(wg, scales, zeros, qmax)
    codes2d = codes.reshape(rows, -1)[:, :cols].astype(np.uint8)

    return QuantizedMatrix(
        rows=rows,
        cols=cols,
        bits=cfg.bits,
        group_size=cfg.group_size,
        codes=codes2d,
        scales=scales[:, :, 0].copy(),
        zero_points=zeros[:, :, 0].copy(),
    )


def _refine_zero_points(wg: np.ndarray, scales: np.ndarray, zeros: np.ndarray,
                        qmax: int, cfg: QuantConfig) -> np.ndarray:
    """Half-quadratic zero-point refinement; scale stays at the min-max fit.

    Runs exactly ``cfg.hqq_iters`` rounds and returns, per group, the zero
    point with the lowest l_p objective observed (including the initializer),
    so refinement can never regress below the min-max fit.
    """
    p = cfg.hqq_shrink_p
    codes = _group_codes(wg, scales, zeros, qmax)
    best_obj = _group_objective(wg, codes, scales, zeros, p)
    best_zeros = zeros.copy()

    beta = HQQ_BETA
    for _ in range(cfg.hqq_iters):
        deq = codes * scales + zeros
        err = _shrink_lp(np.nan_to_num(wg - deq), beta, p)
        zeros = np.nanmean(wg - err - codes * scales, axis=2, keepdims=True)
        codes = _group_codes(wg, scales, zeros, qmax)
        obj = _group_objective(wg, codes, scales, zeros, p)
        better = obj < best_obj
        best_obj = np.where(better, obj, best_obj)
        best_zeros = np.where(better[:, :, None], zeros, best_zeros)
        beta *= HQQ_KAPPA

    return best_zeros


def dequantize(qm: QuantizedMatrix) -> np.ndarray:
    """Reconstruct the real-valued matrix: ``code * scale + zero`` per group."""
    qm.validate()
    gpr = qm.groups_per_row
    padded = np.zeros((qm.rows, gpr * qm.group_size))
    padded[:, : qm.cols] = qm.codes.astype(np.float64)
    grouped = padded.reshape(qm.rows, gpr, qm.group_size)
    deq = grouped * qm.scales[:, :, None] + qm.zero_points[:, :, None]
    return deq.reshape(qm.rows, -1)[:, : qm.cols]


def packed_size_bytes(rows: int, cols: int, bits: int, include_metadata: bool = False,
                      group_size: int = 64) -> int:
    """Bytes needed to store the codes of a ``rows x cols`` matrix at ``bits``.

    Codes are bit-packed and rounded up to whole bytes.  With
    ``include_metadata`` the per-group scale and zero point are added at
    2 bytes each.
    """
    if rows <= 0 or cols <= 0 or bits <= 0 or group_size <= 0:
        raise QuantizationError("rows, cols, bits and group_size must be positive")
    total = (rows * cols * bits + 7) // 8
    if include_metadata:
        total += rows * (-(-cols // group_size)) * 4
    return total


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Bit-pack codes into a little-endian bitstream (LSB-first per code)."""
    flat = np.ascontiguousarray(codes, dtype=np.uint8).reshape(-1)
    if flat.size == 0:
        return b""
    bit_planes = ((flat[:, None] >> np.arange(bits, dtype=np.uint8)) & 1).astype(np.uint8)
    return np.packbits(bit_planes.reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf: bytes, count: int, bits: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns ``count`` uint8 codes."""
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    expected = (count * bits + 7) // 8
    if len(buf) < expected:
        raise QuantizationError(f"packed buffer too short: {len(buf)} < {expected}")
    raw = np.frombuffer(buf, dtype=np.uint8)
    bit_planes = np.unpackbits(raw, bitorder="little")[: count * bits]
    weights = (1 << np.arange(bits)).astype(np.uint8)
    return (bit_planes.reshape(count, bits) * weights).sum(axis=1).astype(np.uint8)
