"""Channel scaling vectors and per-timestep activation quantizer tables."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calibration import CalibrationSet
from .quant import QuantParams, quant_mse, search_params_mse
from .tensor import ShapeError

FLOOR = 1e-8


@dataclass
class ChannelStats:
    """``maxima[i, d]`` is max |X| of channel d at ``timesteps[i]``."""

    layer_id: str
    timesteps: list[int]
    maxima: np.ndarray

    @property
    def D(self) -> int:
        return self.maxima.shape[1]

    def row(self, t: int) -> np.ndarray:
        return self.maxima[self.timesteps.index(t)]


@dataclass
class ScalingVector:
    layer_id: str
    r_s: np.ndarray
    r_t: np.ndarray = field(repr=False)
    s_tar: np.ndarray = field(repr=False)
    clamp_range: Optional[float] = None

    def __post_init__(self):
        self.r_s = np.asarray(self.r_s, dtype=np.float64)
        if not np.all(self.r_s > 0):
            raise ValueError(f"{self.layer_id}: scaling vector must be positive")


def _channel_axis(arr: np.ndarray) -> int:
    # conv inputs are NCHW; linear inputs keep features last
    return 1 if arr.ndim == 4 else -1


def channel_maxima(arr: np.ndarray) -> np.ndarray:
    a = np.abs(np.moveaxis(arr, _channel_axis(arr), -1))
    return a.reshape(-1, a.shape[-1]).max(axis=0).astype(np.float64)


def collect_channel_maxima(calib: CalibrationSet, layer_id: str) -> ChannelStats:
    calib._check_layer(layer_id)
    rows = []
    for t in calib.timesteps:
        cell = calib.captured[t][layer_id]
        if cell.size == 0:
            raise ValueError(f"empty calibration cell ({layer_id}, t={t})")
        rows.append(channel_maxima(cell))
    return ChannelStats(layer_id, calib.timesteps, np.stack(rows))


def compute_target_range(stats: ChannelStats, t: int) -> float:
    return max(float(stats.row(t).min()), FLOOR)


def compute_scaling_vector(stats: ChannelStats) -> ScalingVector:
    M = stats.maxima
    s_tar = np.maximum(M.min(axis=1), FLOOR)
    r_t = M / s_tar[:, None]
    weight = M.sum(axis=0)
    # a channel that is dead at every timestep keeps unit scale
    r_s = np.where(weight > 0, (r_t * M).sum(axis=0) / np.maximum(weight, FLOOR), 1.0)
    r_s = np.maximum(r_s, FLOOR)
    return ScalingVector(stats.layer_id, r_s, r_t, s_tar)


def clamp_scaling(sv: ScalingVector, R_tru: Optional[float]) -> ScalingVector:
    if R_tru is None or math.isinf(R_tru):
        return sv
    if R_tru < 1:
        raise ValueError(f"R_tru must be >= 1, got {R_tru}")
    return ScalingVector(sv.layer_id, np.clip(sv.r_s, 1.0 / R_tru, R_tru), sv.r_t, sv.s_tar, float(R_tru))


def reparam_weight(w: np.ndarray, r_s: np.ndarray) -> np.ndarray:
    """W ⊙ r broadcast over input channels (axis 1 for both conv and linear weights)."""
    if w.shape[1] != len(r_s):
        raise ShapeError(f"scaling vector has {len(r_s)} entries, layer has {w.shape[1]} input channels")
    shape = (1, -1) + (1,) * (w.ndim - 2)
    return (w * r_s.reshape(shape)).astype(w.dtype)


def scale_input(x: np.ndarray, r_s: np.ndarray) -> np.ndarray:
    ax = _channel_axis(x)
    if x.shape[ax] != len(r_s):
        raise ShapeError(f"scaling vector has {len(r_s)} entries, input has {x.shape[ax]} channels")
    shape = [1] * x.ndim
    shape[ax] = -1
    return (x / r_s.reshape(shape)).astype(x.dtype)


def apply_reparam(w: np.ndarray, x: Optional[np.ndarray], sv: ScalingVector):
    """Rewritten weight and (if given) the matching transformed input."""
    w2 = reparam_weight(w, sv.r_s)
    return w2, (None if x is None else scale_input(x, sv.r_s))


def spread(stats_maxima: np.ndarray) -> float:
    """Mean over timesteps of max_d M / min_d M."""
    M = np.maximum(stats_maxima, FLOOR)
    return float(np.mean(M.max(axis=1) / M.min(axis=1)))


# ---------------------------------------------------------------------------
# timestep-grouped activation quantizers


@dataclass
class TimestepQuantTable:
    layer_id: str
    timesteps: list[int]
    group_of: dict[int, int]
    params: list[QuantParams]

    @property
    def G(self) -> int:
        return len(self.params)

    def lookup(self, t: int) -> QuantParams:
        try:
            return self.params[self.group_of[int(t)]]
        except KeyError:
            raise KeyError(f"{self.layer_id}: timestep {t} not in table {self.timesteps}") from None

    def arrays(self, t: np.ndarray):
        """Per-sample (scale, zero_point, log2-mask) for a batch of timesteps."""
        t = np.asarray(t)
        uniq, inv = np.unique(t, return_inverse=True)
        qps = [self.lookup(u) for u in uniq]
        s = np.array([float(q.scale) for q in qps])[inv]
        z = np.array([float(q.zero_point) for q in qps])[inv]
        m = np.array([q.kind == "log2" for q in qps])[inv]
        return s, z, m

    @property
    def bits(self) -> int:
        return self.params[0].bits


def group_timesteps(timesteps: list[int], G: int) -> dict[int, int]:
    """Split ascending timesteps into G contiguous runs whose sizes differ by at most one."""
    if not 1 <= G <= len(timesteps):
        raise ValueError(f"group count must be in [1, {len(timesteps)}], got {G}")
    ordered = sorted(timesteps)
    return {int(t): g for g, run in enumerate(np.array_split(np.array(ordered), G)) for t in run}


def build_table(cells: dict[int, np.ndarray], layer_id: str, bits: int, G: int,
                kinds: Optional[dict[int, str]] = None, transform=None) -> TimestepQuantTable:
    """Search one QuantParams per group. ``kinds`` fixes the quantizer per timestep (G must then be T)."""
    ts = sorted(cells)
    group_of = group_timesteps(ts, G)
    params = []
    for g in range(G):
        members = [t for t in ts if group_of[t] == g]
        data = [cells[t] if transform is None else transform(cells[t]) for t in members]
        flat = np.concatenate([d.ravel() for d in data])
        if flat.size == 0:
            raise ValueError(f"empty timestep group {g} for {layer_id}")
        kind = "uniform"
        if kinds is not None:
            ks = {kinds[t] for t in members}
            if len(ks) > 1:
                raise ValueError(f"group {g} of {layer_id} mixes quantizer kinds {sorted(ks)}")
            kind = ks.pop()
        params.append(search_params_mse(flat, bits, kind))
    return TimestepQuantTable(layer_id, ts, group_of, params)


def build_timestep_table(calib: CalibrationSet, layer_id: str, bits: int, G: int,
                         sv: Optional[ScalingVector] = None) -> TimestepQuantTable:
    cells = {t: calib.cell(layer_id, t) for t in calib.timesteps}
    transform = None if sv is None else (lambda a: scale_input(a, sv.r_s))
    return build_table(cells, layer_id, bits, G, transform=transform)


def table_mse(calib: CalibrationSet, table: TimestepQuantTable, sv: Optional[ScalingVector] = None) -> float:
    errs, n = 0.0, 0
    for t in calib.timesteps:
        x = calib.cell(table.layer_id, t)
        if sv is not None:
            x = scale_input(x, sv.r_s)
        errs += quant_mse(x, table.lookup(t)) * x.size
        n += x.size
    return errs / n
