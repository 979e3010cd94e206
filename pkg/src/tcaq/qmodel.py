"""A quantized view of a ToyUNet: the plan (all fitted parameters) and the runtime that applies it."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calibration import CalibrationSet
from .daq import DaqDecision, PowerLawFit, run_daq_offline
from .diffusion import NoiseSchedule, Runtime, ToyUNet, sample
from .quant import QuantParams, search_params_mse
from .tcr import (ScalingVector, TimestepQuantTable, build_table, build_timestep_table, clamp_scaling,
                  collect_channel_maxima, compute_scaling_vector, reparam_weight)
from .tensor import Tensor, forward, load_archive, save_archive

log = logging.getLogger(__name__)

FULL = 32


@dataclass
class QuantPlan:
    bits_w: int
    bits_a: int
    bits_s: int
    weight_qp: dict[str, QuantParams] = field(default_factory=dict)
    scaling: dict[str, ScalingVector] = field(default_factory=dict)
    act_tables: dict[str, TimestepQuantTable] = field(default_factory=dict)
    softmax_tables: dict[str, TimestepQuantTable] = field(default_factory=dict)
    decisions: dict[tuple[str, int], DaqDecision] = field(default_factory=dict)
    rounding: dict[str, np.ndarray] = field(default_factory=dict)  # 1 = round up, 0 = down
    soft_v: dict[str, np.ndarray] = field(default_factory=dict)


class QuantModel:
    def __init__(self, model: ToyUNet, plan: QuantPlan):
        self.model = model
        self.plan = plan
        self._wcache: dict[str, np.ndarray] = {}

    # -- weights
    def w_tilde(self, lid: str) -> np.ndarray:
        w = self.model.params[lid + ".weight"].data
        sv = self.plan.scaling.get(lid)
        return w if sv is None else reparam_weight(w, sv.r_s)

    def _grid(self, lid: str):
        qp = self.plan.weight_qp[lid]
        shape = (-1,) + (1,) * (self.model.params[lid + ".weight"].ndim - 1)
        return qp, qp.scale.astype(np.float32).reshape(shape), qp.zero_point.astype(np.float32).reshape(shape)

    def weight_codes(self, lid: str, rounding: Optional[np.ndarray] = None) -> np.ndarray:
        """Integer codes for the rewritten weight, by nearest rounding or a learned up/down mask."""
        qp, s, z = self._grid(lid)
        w = self.w_tilde(lid)
        rounding = self.plan.rounding.get(lid) if rounding is None else rounding
        base = np.rint(w / s) if rounding is None else np.floor(w / s) + rounding
        return np.clip(base + z, 0, qp.qmax)

    def qweight(self, lid: str) -> np.ndarray:
        if lid not in self._wcache:
            if lid in self.plan.weight_qp:
                _, s, z = self._grid(lid)
                self._wcache[lid] = (s * (self.weight_codes(lid) - z)).astype(np.float32)
            else:
                self._wcache[lid] = self.w_tilde(lid)
        return self._wcache[lid]

    def rtn_weight(self, lid: str) -> np.ndarray:
        _, s, z = self._grid(lid)
        codes = np.clip(np.rint(self.w_tilde(lid) / s) + z, 0, self.plan.weight_qp[lid].qmax)
        return (s * (codes - z)).astype(np.float32)

    def set_rounding(self, lid: str, rounding: Optional[np.ndarray], v: Optional[np.ndarray] = None) -> None:
        if rounding is None:
            self.plan.rounding.pop(lid, None)
        else:
            self.plan.rounding[lid] = rounding.astype(np.float32)
        if v is not None:
            self.plan.soft_v[lid] = v.astype(np.float32)
        self._wcache.pop(lid, None)

    # -- execution
    def runtime(self, quantize_acts: bool = True, soft: Optional[dict[str, Tensor]] = None) -> "QuantRuntime":
        return QuantRuntime(self, quantize_acts, soft or {})

    def __call__(self, x, t, **kw) -> Tensor:
        return self.model(x, t, runtime=self.runtime(), **kw)

    def sample(self, n: int, inference_steps: int = 20, seed: int = 0, sched: Optional[NoiseSchedule] = None,
               **kw) -> np.ndarray:
        return sample(self.model, n, inference_steps, seed=seed, sched=sched, runtime=self.runtime(), **kw)

    # -- persistence
    def records(self) -> dict[str, np.ndarray]:
        rec = dict(self.model.state_records())
        rec.update(plan_records(self.plan))
        return rec

    def save(self, path) -> None:
        save_archive(path, self.records())

    @classmethod
    def load(cls, path) -> "QuantModel":
        rec = load_archive(path)
        return cls(ToyUNet.from_records(rec), plan_from_records(rec))


class QuantRuntime(Runtime):
    """Applies the plan during a forward pass; per-sample timesteps pick each sample's quantizer."""

    def __init__(self, qm: QuantModel, quantize_acts: bool, soft: dict[str, Tensor]):
        self.qm = qm
        self.quantize_acts = quantize_acts
        self.soft = soft
        self._t = None
        self._cache: dict[tuple[str, int], tuple] = {}

    def prepare(self, t: np.ndarray) -> None:
        self._t = np.asarray(t)
        self._cache = {}

    def _table_attrs(self, table: TimestepQuantTable, ndim: int, dtype):
        key = (table.layer_id, ndim)
        if key not in self._cache:
            s, z, m = table.arrays(self._t)
            shape = (-1,) + (1,) * (ndim - 1)
            self._cache[key] = (s.astype(dtype).reshape(shape), z.astype(dtype).reshape(shape),
                                m.reshape(shape) if m.any() else False)
        return self._cache[key]

    def _fq(self, table: TimestepQuantTable, x: Tensor) -> Tensor:
        s, z, m = self._table_attrs(table, x.ndim, x.data.dtype)
        return forward("fake_quant", x, bits=table.bits, scale=s, zero=z, log2=m)

    def layer_input(self, lid: str, x: Tensor) -> Tensor:
        plan = self.qm.plan
        sv = plan.scaling.get(lid)
        if sv is not None:
            inv = (1.0 / sv.r_s).astype(x.data.dtype)
            shape = [1] * x.ndim
            shape[1 if x.ndim == 4 else -1] = -1
            x = forward("mul", x, Tensor(inv.reshape(shape)))
        table = plan.act_tables.get(lid)
        if table is not None and self.quantize_acts:
            x = self._fq(table, x)
        return x

    def weight(self, lid: str, w: Tensor) -> Tensor:
        if lid in self.soft:
            return self.soft[lid]
        if lid in self.qm.plan.weight_qp or lid in self.qm.plan.scaling:
            return Tensor(self.qm.qweight(lid))
        return w

    def post_softmax(self, lid: str, p: Tensor) -> Tensor:
        table = self.qm.plan.softmax_tables.get(lid)
        if table is None or not self.quantize_acts:
            return p
        return self._fq(table, p)


# ---------------------------------------------------------------------------
# initialization stage


@dataclass
class InitOptions:
    bits_w: int = 4
    bits_a: int = 8
    bits_s: int = 8
    tcr: bool = True
    daq: bool = True
    groups: Optional[int] = None  # None: one group per inference timestep when TCR is on
    clamp: Optional[float] = None  # R_tru; None: automatic (5 at <= 4-bit weights)
    softmax_kind: str = "uniform"  # quantizer for every post-Softmax cell when DAQ is off

    def resolved_clamp(self) -> Optional[float]:
        if self.clamp is not None:
            return None if math.isinf(self.clamp) else self.clamp
        return 5.0 if self.bits_w <= 4 else None


def initialize(model: ToyUNet, calib: CalibrationSet, opts: InitOptions) -> QuantModel:
    """Fit scaling vectors, weight and activation quantizers and DAQ decisions; no reconstruction."""
    plan = QuantPlan(opts.bits_w, opts.bits_a, opts.bits_s)
    T = len(calib.timesteps)
    G = (opts.groups or T) if opts.tcr else 1
    clamp = opts.resolved_clamp()
    for lid in model.layer_ids(quantized_only=True):
        if model.layers[lid].kind == "post_softmax":
            continue
        sv = None
        if opts.tcr and model.layers[lid].reparam:
            sv = compute_scaling_vector(collect_channel_maxima(calib, lid))
            sv = clamp_scaling(sv, clamp)
            plan.scaling[lid] = sv
        if opts.bits_w < FULL:
            w = model.params[lid + ".weight"].data
            w = w if sv is None else reparam_weight(w, sv.r_s)
            plan.weight_qp[lid] = search_params_mse(w, opts.bits_w, "uniform", "per_channel")
        if opts.bits_a < FULL:
            plan.act_tables[lid] = build_timestep_table(calib, lid, opts.bits_a, G, sv)
    softmax = model.layer_ids("post_softmax")
    if opts.daq:
        plan.decisions = run_daq_offline(calib, softmax, opts.bits_s)
    if opts.bits_s < FULL:
        for lid in softmax:
            cells = {t: calib.cell(lid, t) for t in calib.timesteps}
            if opts.daq:
                kinds = {t: plan.decisions[(lid, t)].chosen for t in calib.timesteps}
                plan.softmax_tables[lid] = build_table(cells, lid, opts.bits_s, T, kinds)
            else:
                kinds = {t: opts.softmax_kind for t in calib.timesteps}
                plan.softmax_tables[lid] = build_table(cells, lid, opts.bits_s, G, kinds)
    return QuantModel(model, plan)


# ---------------------------------------------------------------------------
# archive records


def _qp_records(prefix: str, qp: QuantParams) -> dict[str, np.ndarray]:
    return {f"{prefix}/kind": np.array(float(qp.kind == "log2")), f"{prefix}/bits": np.array(float(qp.bits)),
            f"{prefix}/scale": np.asarray(qp.scale), f"{prefix}/zero_point": np.asarray(qp.zero_point),
            f"{prefix}/granularity": np.array(float(qp.granularity == "per_channel"))}


def _qp_from(rec, prefix: str) -> QuantParams:
    pc = bool(rec[f"{prefix}/granularity"])
    scale, zp = rec[f"{prefix}/scale"], rec[f"{prefix}/zero_point"]
    return QuantParams("log2" if rec[f"{prefix}/kind"] else "uniform", int(rec[f"{prefix}/bits"]),
                       scale if pc else float(scale), np.rint(zp).astype(np.int64) if pc else int(round(float(zp))),
                       "per_channel" if pc else "per_tensor")


def _table_records(table: TimestepQuantTable) -> dict[str, np.ndarray]:
    lid = table.layer_id
    rec = {f"tcr/{lid}/table/timesteps": np.array(table.timesteps, dtype=np.float32),
           f"tcr/{lid}/table/groups": np.array([table.group_of[t] for t in table.timesteps], dtype=np.float32)}
    for g, qp in enumerate(table.params):
        rec.update(_qp_records(f"qp/{lid}/act/{g}", qp))
    return rec


def _table_from(rec, lid: str) -> TimestepQuantTable:
    ts = [int(t) for t in rec[f"tcr/{lid}/table/timesteps"]]
    groups = [int(g) for g in rec[f"tcr/{lid}/table/groups"]]
    G = max(groups) + 1
    return TimestepQuantTable(lid, ts, dict(zip(ts, groups)), [_qp_from(rec, f"qp/{lid}/act/{g}") for g in range(G)])


def plan_records(plan: QuantPlan) -> dict[str, np.ndarray]:
    rec = {"plan/bits": np.array([plan.bits_w, plan.bits_a, plan.bits_s], dtype=np.float32)}
    for lid, qp in plan.weight_qp.items():
        rec.update(_qp_records(f"qp/{lid}/weight", qp))
    for lid, sv in plan.scaling.items():
        rec[f"tcr/{lid}/r_s"] = sv.r_s
        rec[f"tcr/{lid}/r_t"] = sv.r_t
        rec[f"tcr/{lid}/s_tar"] = sv.s_tar
        rec[f"tcr/{lid}/clamp"] = np.array(np.inf if sv.clamp_range is None else sv.clamp_range)
    for table in list(plan.act_tables.values()) + list(plan.softmax_tables.values()):
        rec.update(_table_records(table))
    for (lid, t), d in plan.decisions.items():
        rec[f"daq/{lid}/{t}"] = np.array([float(d.chosen == "log2"), d.R_g,
                                          d.fit.alpha if d.fit else np.nan, d.fit.x_min if d.fit else np.nan,
                                          d.fit.n_tail if d.fit else 0])
    for lid, r in plan.rounding.items():
        rec[f"round/{lid}/h"] = r
    for lid, v in plan.soft_v.items():
        rec[f"round/{lid}/v"] = v
    return rec


def plan_from_records(rec: dict[str, np.ndarray]) -> QuantPlan:
    bw, ba, bs = (int(b) for b in rec["plan/bits"])
    plan = QuantPlan(bw, ba, bs)
    for name in rec:
        parts = name.split("/")
        if parts[0] == "qp" and parts[2] == "weight" and parts[-1] == "kind":
            plan.weight_qp[parts[1]] = _qp_from(rec, f"qp/{parts[1]}/weight")
        elif parts[0] == "tcr" and parts[-1] == "r_s":
            lid = parts[1]
            clamp = float(rec[f"tcr/{lid}/clamp"])
            plan.scaling[lid] = ScalingVector(lid, rec[name].astype(np.float64), rec[f"tcr/{lid}/r_t"],
                                              rec[f"tcr/{lid}/s_tar"], None if math.isinf(clamp) else clamp)
        elif parts[0] == "tcr" and parts[-1] == "timesteps":
            table = _table_from(rec, parts[1])
            target = plan.softmax_tables if _is_softmax(rec, parts[1]) else plan.act_tables
            target[parts[1]] = table
        elif parts[0] == "daq":
            lid, t = "/".join(parts[1:-1]), int(parts[-1])
            chosen, r, alpha, x_min, n_tail = rec[name].astype(np.float64)
            fit = None if math.isnan(alpha) else PowerLawFit(alpha, x_min, math.nan, int(n_tail))
            plan.decisions[(lid, t)] = DaqDecision(lid, t, r, "log2" if chosen else "uniform", fit)
        elif parts[0] == "round":
            (plan.rounding if parts[-1] == "h" else plan.soft_v)[parts[1]] = rec[name]
    return plan


def _is_softmax(rec, lid: str) -> bool:
    return f"model/{lid}.q.weight" in rec
