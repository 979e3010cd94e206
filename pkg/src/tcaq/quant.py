"""Uniform and log2 fake-quantization primitives and scale search."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, forward, register_op

SCALE_FLOOR = 1e-8
KINDS = ("uniform", "log2")
GRANULARITIES = ("per_tensor", "per_channel")
SUMMARY_THRESHOLD = 4096
SUMMARY_BINS = 2048


@dataclass(eq=False)
class QuantParams:
    kind: str
    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    granularity: str = "per_tensor"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown quantizer kind {self.kind!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not 2 <= int(self.bits) <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        self.bits = int(self.bits)
        # float32-representable so archives round-trip exactly
        self.scale = np.asarray(self.scale, dtype=np.float32).astype(np.float64)
        self.zero_point = np.asarray(self.zero_point, dtype=np.int64)
        if not np.all(self.scale > 0) or not np.all(np.isfinite(self.scale)):
            raise ValueError("quantization scale must be positive")
        if self.kind == "uniform" and (np.any(self.zero_point < 0) or np.any(self.zero_point > self.qmax)):
            raise ValueError(f"zero point outside [0, {self.qmax}]")
        if self.kind == "log2" and np.any(self.zero_point != 0):
            raise ValueError("log2 quantizer has no zero point")

    @property
    def qmax(self) -> int:
        """Largest code; for log2 this is the deepest level L."""
        return 2 ** self.bits - 1

    def same_as(self, other: "QuantParams") -> bool:
        return (self.kind == other.kind and self.bits == other.bits and self.granularity == other.granularity
                and np.array_equal(self.scale, other.scale) and np.array_equal(self.zero_point, other.zero_point))


def _expand(p: np.ndarray, ndim: int, per_channel: bool) -> np.ndarray:
    if per_channel and p.ndim == 1:
        return p.reshape((-1,) + (1,) * (ndim - 1))
    return p


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def quantize_uniform(x, qp: QuantParams) -> np.ndarray:
    if qp.kind != "uniform":
        raise ValueError("quantize_uniform needs a uniform QuantParams")
    x = _data(x)
    pc = qp.granularity == "per_channel"
    s = _expand(qp.scale, x.ndim, pc)
    z = _expand(qp.zero_point, x.ndim, pc)
    return np.clip(np.rint(x / s) + z, 0, qp.qmax).astype(np.int64)


def dequantize_uniform(codes, qp: QuantParams) -> np.ndarray:
    codes = np.asarray(codes)
    pc = qp.granularity == "per_channel"
    s = _expand(qp.scale, codes.ndim, pc)
    z = _expand(qp.zero_point, codes.ndim, pc)
    return (s * (codes - z)).astype(np.float32)


def quantize_log2(x, qp: QuantParams) -> np.ndarray:
    """Codes ``round(-log2(x/s))`` clipped to [0, L]; zeros land on L."""
    if qp.kind != "log2":
        raise ValueError("quantize_log2 needs a log2 QuantParams")
    x = _data(x)
    if np.any(x < 0):
        raise ValueError("log2 quantizer is defined for non-negative (post-Softmax) inputs only")
    s = _expand(qp.scale, x.ndim, qp.granularity == "per_channel")
    with np.errstate(divide="ignore"):
        c = np.rint(-np.log2(x / s))
    return np.clip(c, 0, qp.qmax).astype(np.int64)


def dequantize_log2(codes, qp: QuantParams) -> np.ndarray:
    codes = np.asarray(codes)
    s = _expand(qp.scale, codes.ndim, qp.granularity == "per_channel")
    return (s * np.exp2(-codes.astype(np.float64))).astype(np.float32)


# ---------------------------------------------------------------------------
# straight-through fake-quant op; scale/zero/log2 mask may be broadcast arrays
# so that one batch can mix per-sample (per-timestep) parameters.


def _fq_uniform(x, s, z, qmax):
    q = x / s + z
    return (s * (np.clip(np.rint(q), 0, qmax) - z)), (q >= 0) & (q <= qmax)


def _fq_log2(x, s, qmax):
    xs = np.maximum(x, 0) / s
    with np.errstate(divide="ignore"):
        e = -np.log2(xs)
    c = np.clip(np.rint(e), 0, qmax)
    return s * np.exp2(-c), (e >= 0) & (e <= qmax)


def _fake_quant_fwd(xs, attrs):
    x = xs[0]
    qmax = 2 ** attrs["bits"] - 1
    s, z, mask = attrs["scale"], attrs["zero"], attrs.get("log2")
    if mask is None or not np.any(mask):
        out, inside = _fq_uniform(x, s, z, qmax)
    elif np.all(mask):
        out, inside = _fq_log2(x, s, qmax)
    else:
        ou, iu = _fq_uniform(x, s, z, qmax)
        ol, il = _fq_log2(x, s, qmax)
        out, inside = np.where(mask, ol, ou), np.where(mask, il, iu)
    return out.astype(x.dtype), inside


def _fake_quant_bwd(g, xs, out, inside, attrs):
    return [g * inside]


register_op("fake_quant", _fake_quant_fwd, _fake_quant_bwd)


def fake_quant(x, qp: QuantParams) -> Tensor:
    """quantize -> dequantize, differentiable by the straight-through estimator."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if qp.kind == "log2" and np.any(x.data < 0):
        raise ValueError("log2 quantizer is defined for non-negative (post-Softmax) inputs only")
    pc = qp.granularity == "per_channel"
    s = _expand(qp.scale, x.ndim, pc).astype(x.data.dtype)
    z = _expand(qp.zero_point, x.ndim, pc).astype(x.data.dtype)
    return forward("fake_quant", x, bits=qp.bits, scale=s, zero=z, log2=qp.kind == "log2")


def fake_quant_array(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    return fake_quant(Tensor(x), qp).data


# ---------------------------------------------------------------------------
# parameter search


def _rows(samples, per_channel: bool) -> np.ndarray:
    a = np.asarray(_data(samples), dtype=np.float64)
    return a.reshape(a.shape[0], -1) if per_channel else a.reshape(1, -1)


def _minmax_rows(rows: np.ndarray, bits: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
    qmax = 2 ** bits - 1
    if kind == "log2":
        s = np.maximum(rows.max(axis=1), SCALE_FLOOR)
        return s, np.zeros_like(s, dtype=np.int64)
    lo, hi = rows.min(axis=1), rows.max(axis=1)
    s = np.maximum((hi - lo) / qmax, SCALE_FLOOR)
    z = np.clip(np.rint(-lo / s), 0, qmax).astype(np.int64)
    return s, z


def _pack(kind, bits, s, z, per_channel) -> QuantParams:
    if per_channel:
        return QuantParams(kind, bits, s, z, "per_channel")
    return QuantParams(kind, bits, s[0], z[0], "per_tensor")


def search_params_minmax(samples, bits: int, kind: str = "uniform", granularity: str = "per_tensor") -> QuantParams:
    rows = _rows(samples, granularity == "per_channel")
    if rows.size == 0:
        raise ValueError("search_params_minmax needs at least one sample")
    s, z = _minmax_rows(rows, bits, kind)
    return _pack(kind, bits, s, z, granularity == "per_channel")


def _row_errors(rows, s, z, bits, kind, weights=None) -> np.ndarray:
    """Mean squared fake-quant error per row; ``s`` and ``z`` may carry leading candidate axes."""
    qmax = 2 ** bits - 1
    s, z = s[..., None], z[..., None]
    if kind == "uniform":
        fq = s * (np.clip(np.rint(rows / s) + z, 0, qmax) - z)
    else:
        with np.errstate(divide="ignore"):
            fq = s * np.exp2(-np.clip(np.rint(-np.log2(rows / s)), 0, qmax))
    sq = (fq - rows) ** 2
    if weights is None:
        return sq.mean(axis=-1)
    return (sq * weights).sum(axis=-1) / weights.sum()


def _summarize(row: np.ndarray, bins: int):
    """Bin centroids and counts; the scan runs on these instead of every value."""
    idx = np.minimum(((row - row.min()) / max(np.ptp(row), 1e-30) * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=row, minlength=bins)
    keep = counts > 0
    return (sums[keep] / counts[keep])[None, :], counts[keep][None, :]


def search_params_mse(samples, bits: int, kind: str = "uniform", granularity: str = "per_tensor",
                      grid: int = 100) -> QuantParams:
    """Scan ``beta * s_minmax`` for beta on a uniform grid over [0.2, 1.2].

    beta = 1 (the min-max scale) is always a candidate and wins ties, so the
    result is never worse than min-max on these samples.  Large per-tensor sets
    are scanned on a binned summary and the winner is re-checked exactly.
    """
    if grid < 2:
        raise ValueError(f"grid must be >= 2, got {grid}")
    per_channel = granularity == "per_channel"
    rows = _rows(samples, per_channel)
    if rows.size == 0:
        raise ValueError("search_params_mse needs at least one sample")
    if kind == "log2" and np.any(rows < 0):
        raise ValueError("log2 quantizer is defined for non-negative (post-Softmax) inputs only")
    s0, z0 = _minmax_rows(rows, bits, kind)
    scan, weights = rows, None
    if rows.shape[0] == 1 and rows.shape[1] > SUMMARY_THRESHOLD:
        scan, weights = _summarize(rows[0], SUMMARY_BINS)
    betas = np.concatenate([[1.0], np.linspace(0.2, 1.2, grid)])  # first index wins ties
    cand = np.maximum(betas[:, None] * s0[None, :], SCALE_FLOOR)
    err = _row_errors(scan, cand, np.broadcast_to(z0, cand.shape), bits, kind, weights)
    best_s = cand[np.argmin(err, axis=0), np.arange(len(s0))]
    if weights is not None and _row_errors(rows, best_s, z0, bits, kind)[0] >= _row_errors(rows, s0, z0, bits, kind)[0]:
        best_s = s0
    return _pack(kind, bits, best_s, z0, per_channel)


def quant_mse(samples, qp: QuantParams) -> float:
    x = np.asarray(_data(samples), dtype=np.float64)
    return float(np.mean((fake_quant_array(x, qp).astype(np.float64) - x) ** 2))
