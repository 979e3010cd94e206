"""Block-wise learned rounding and the progressive recalibration loop around it."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .calibration import CalibrationSet, resample_calibration_quant
from .diffusion import BLOCKS, NoiseSchedule, ToyUNet
from .qmodel import InitOptions, QuantModel, initialize
from .tensor import Adam, NonFiniteError, Tape, Tensor, backward, forward, register_op

log = logging.getLogger(__name__)

ZETA, GAMMA = 1.1, -0.1
EVAL_CHUNK = 128
EMA_DECAY = 0.95
EMA_BURN_IN = 20  # one EMA time constant


@dataclass
class ReconConfig:
    init_iters: int = 2000
    par_iters: int = 1000
    rounds: int = 2
    batch: int = 16
    lr: float = 1e-2
    reg_weight: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2
    quantize_activations_during_recon: bool = True
    patience: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.par_iters > self.init_iters:
            raise ValueError(f"par_iters ({self.par_iters}) must not exceed init_iters ({self.init_iters})")
        if self.rounds < 0 or self.batch < 1:
            raise ValueError("rounds must be >= 0 and batch >= 1")

    @classmethod
    def paper_scale(cls, **kw) -> "ReconConfig":
        return cls(init_iters=20000, par_iters=10000, **kw)

    def beta_at(self, i: int, iters: int) -> Optional[float]:
        """Regularizer exponent at iteration ``i``; None during warmup (regularizer off)."""
        start = int(self.warmup * iters)
        if i < start:
            return None
        frac = (i - start) / max(iters - start, 1)
        return self.beta_end + (self.beta_start - self.beta_end) * max(0.0, 1.0 - frac)


# ---------------------------------------------------------------------------
# rounding variables


def rect_sigmoid(v: np.ndarray) -> np.ndarray:
    return np.clip(1.0 / (1.0 + np.exp(-v)) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def init_v(rest: np.ndarray) -> np.ndarray:
    """Inverse of the rectified sigmoid at the fractional part, so h(v) starts at ``rest``."""
    r = np.clip(rest, 1e-6, 1 - 1e-6)
    return -np.log((ZETA - GAMMA) / (r - GAMMA) - 1.0)


def _rsig_fwd(xs, attrs):
    sig = 1.0 / (1.0 + np.exp(-xs[0]))
    pre = sig * (ZETA - GAMMA) + GAMMA
    return np.clip(pre, 0.0, 1.0).astype(xs[0].dtype), (sig, pre)


def _rsig_bwd(g, xs, out, saved, attrs):
    sig, pre = saved
    return [g * (ZETA - GAMMA) * sig * (1 - sig) * ((pre > 0) & (pre < 1))]


def _round_reg_fwd(xs, attrs):
    a = np.abs(2 * xs[0] - 1)
    return np.asarray(np.sum(1 - a ** attrs["beta"]), dtype=xs[0].dtype), a


def _round_reg_bwd(g, xs, out, a, attrs):
    b = attrs["beta"]
    return [g * (-b * a ** (b - 1) * np.sign(2 * xs[0] - 1) * 2)]


register_op("rect_sigmoid", _rsig_fwd, _rsig_bwd)
register_op("round_reg", _round_reg_fwd, _round_reg_bwd)


@dataclass
class RoundingVars:
    layer_id: str
    v: np.ndarray

    @property
    def h(self) -> np.ndarray:
        return rect_sigmoid(self.v)

    def hard(self) -> np.ndarray:
        return (self.h >= 0.5).astype(np.float32)


# ---------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class Block:
    name: str
    layer_ids: tuple[str, ...]
    input_boundary: tuple[str, ...]
    output_boundary: str


HEAD = "conv_out"


def partition_blocks(model: ToyUNet) -> list[Block]:
    """One block per UNet stage. The last block is reconstructed through the full-precision
    output head, so its target is the network output rather than its raw feature map."""
    return [Block(b, tuple(model.block_layers(b)), tuple(model.BLOCK_INPUTS[b]),
                  HEAD if b == BLOCKS[-1] else b) for b in BLOCKS]


def _weighted_layers(model: ToyUNet, block: Block) -> list[str]:
    return [l for l in block.layer_ids if model.layers[l].kind in ("conv", "linear")]


@dataclass
class BlockData:
    """Block inputs from the quantized model and block outputs of the FP model, per calibration sample."""
    inputs: list[np.ndarray]
    t: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


class _Stop(Exception):
    pass


def _block_io(model: ToyUNet, x: np.ndarray, t: np.ndarray, runtime, block: Block):
    got = {}

    def hook(b, ins, out):
        if b == block.name:
            got["ins"] = [i.data for i in ins]
            got["out"] = out.data
            if block.output_boundary == b:
                raise _Stop

    try:
        y = model(x, t, runtime=runtime, block_hook=hook)
        got["out"] = y.data  # block read through the output head
    except _Stop:
        pass
    return got["ins"], got["out"]


def block_data(qm: QuantModel, calib: CalibrationSet, block: Block, cfg: ReconConfig,
               fp_targets: Optional[np.ndarray] = None) -> BlockData:
    xs, ts = calib.stacked()
    rt = qm.runtime(quantize_acts=cfg.quantize_activations_during_recon)
    ins, outs = [], []
    for s in range(0, len(xs), EVAL_CHUNK):
        i, _ = _block_io(qm.model, xs[s:s + EVAL_CHUNK], ts[s:s + EVAL_CHUNK], rt, block)
        ins.append(i)
        if fp_targets is None:
            _, o = _block_io(qm.model, xs[s:s + EVAL_CHUNK], ts[s:s + EVAL_CHUNK], None, block)
            outs.append(o)
    inputs = [np.concatenate([c[k] for c in ins]) for k in range(len(ins[0]))]
    return BlockData(inputs, ts, np.concatenate(outs) if fp_targets is None else fp_targets)


def _run_block(qm: QuantModel, block: Block, inputs: list[np.ndarray], t: np.ndarray, runtime) -> Tensor:
    m = qm.model
    ctx = m.make_ctx(t, runtime)
    out = m.run_block(block.name, [Tensor(i) for i in inputs], m.embed(t), ctx)
    return m.head(out, ctx) if block.output_boundary == HEAD else out


def block_mse(qm: QuantModel, block: Block, data: BlockData, cfg: ReconConfig) -> float:
    rt = qm.runtime(quantize_acts=cfg.quantize_activations_during_recon)
    total = 0.0
    for s in range(0, len(data), EVAL_CHUNK):
        sl = slice(s, s + EVAL_CHUNK)
        out = _run_block(qm, block, [i[sl] for i in data.inputs], data.t[sl], rt).data
        total += float(np.sum((out.astype(np.float64) - data.target[sl]) ** 2))
    return total / data.target.size


@dataclass
class BlockResult:
    block: str
    start_mse: float
    end_mse: float
    rtn_mse: float
    iters_run: int
    seconds: float
    kept: bool


def _soft_weight(qm: QuantModel, lid: str, v: Tensor) -> Tensor:
    qp, s, z = qm._grid(lid)
    base = np.floor(qm.w_tilde(lid) / s)
    h = forward("rect_sigmoid", v)
    codes = forward("clamp", forward("add", Tensor(base + z), h), lo=0.0, hi=float(qp.qmax))
    return forward("add", forward("mul", codes, Tensor(s)), Tensor(-s * z))


def adaround_block(block: Block, qm: QuantModel, data: BlockData, cfg: ReconConfig, iters: int,
                   warm_start: bool = False, rng: Optional[np.random.Generator] = None) -> BlockResult:
    """Learn up/down rounding for every weight in ``block``; keeps the result only if block MSE does not rise."""
    t0 = time.perf_counter()
    layers = [l for l in _weighted_layers(qm.model, block) if l in qm.plan.weight_qp]
    if not layers:
        mse = block_mse(qm, block, data, cfg)
        return BlockResult(block.name, mse, mse, mse, 0, time.perf_counter() - t0, False)
    prev = {l: qm.plan.rounding.get(l) for l in layers}
    prev_v = {l: qm.plan.soft_v.get(l) for l in layers}
    start = block_mse(qm, block, data, cfg)
    if all(p is None for p in prev.values()):
        rtn = start
    else:
        for l in layers:
            qm.set_rounding(l, None)
        rtn = block_mse(qm, block, data, cfg)
        for l in layers:
            qm.set_rounding(l, prev[l])

    vs = {}
    for l in layers:
        _, s, _ = qm._grid(l)
        w = qm.w_tilde(l) / s
        v0 = prev_v[l] if warm_start and prev_v[l] is not None else init_v(w - np.floor(w))
        vs[l] = Tensor(v0.astype(np.float32), requires_grad=True, name=l + ".v")
    opt = Adam(list(vs.values()), lr=cfg.lr)
    rng = rng or np.random.default_rng(cfg.seed)
    scale = float(np.prod(data.target.shape[1:]))
    ema, k, best, stale, phase, it = 0.0, 0, np.inf, 0, None, 0
    for it in range(iters):
        idx = rng.integers(0, len(data), size=cfg.batch)
        beta = cfg.beta_at(it, iters)
        if (beta is None) != (phase is None):
            # the objective changes when the regularizer switches on
            ema, k, best, stale, phase = 0.0, 0, np.inf, 0, beta
        opt.zero_grad()
        with Tape() as tape:
            soft = {l: _soft_weight(qm, l, v) for l, v in vs.items()}
            rt = qm.runtime(quantize_acts=cfg.quantize_activations_during_recon, soft=soft)
            out = _run_block(qm, block, [i[idx] for i in data.inputs], data.t[idx], rt)
            loss = forward("mul", forward("mse_loss", out, Tensor(data.target[idx])), scale)
            if beta is not None and cfg.reg_weight > 0:
                reg = sum((forward("round_reg", forward("rect_sigmoid", v), beta=beta) for v in vs.values()),
                          start=Tensor(np.float32(0)))
                loss = forward("add", loss, forward("mul", reg, cfg.reg_weight))
        val = loss.item()
        if not np.isfinite(val):
            raise NonFiniteError(f"{block.name}: non-finite reconstruction loss at iteration {it}")
        backward(tape, loss)
        opt.step()
        # bias-corrected EMA; a burn-in keeps one lucky early batch from becoming the best value
        ema, k = EMA_DECAY * ema + (1 - EMA_DECAY) * val, k + 1
        smooth = ema / (1 - EMA_DECAY ** k)
        if k <= EMA_BURN_IN:
            continue
        if smooth < best:
            best, stale = smooth, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("%s: early stop at iteration %d", block.name, it)
                break
    iters_run = it + 1 if iters else 0

    for l, v in vs.items():
        qm.set_rounding(l, RoundingVars(l, v.data).hard(), v.data)
    end = block_mse(qm, block, data, cfg)
    kept = end <= start
    if not kept:
        for l in layers:
            qm.set_rounding(l, prev[l])
            if prev_v[l] is not None:
                qm.plan.soft_v[l] = prev_v[l]
        end = start
    return BlockResult(block.name, start, end, rtn, iters_run, time.perf_counter() - t0, kept)


# ---------------------------------------------------------------------------
# whole-model passes


@dataclass
class RoundLog:
    round: int
    source: str
    blocks: list[BlockResult] = field(default_factory=list)
    seconds: float = 0.0

    def to_json(self) -> dict:
        return {"round": self.round, "source": self.source, "seconds": self.seconds,
                "blocks": [asdict(b) for b in self.blocks]}


def reconstruct(qm: QuantModel, calib: CalibrationSet, cfg: ReconConfig, iters: Optional[int] = None,
                round: int = 0, warm_start: bool = False) -> RoundLog:
    """Blocks in order; each block's inputs come from the model with all earlier blocks already finalized."""
    iters = cfg.init_iters if iters is None else iters
    t0 = time.perf_counter()
    out = RoundLog(round, calib.source)
    for k, block in enumerate(partition_blocks(qm.model)):
        if iters == 0:
            continue
        data = block_data(qm, calib, block, cfg)
        rng = np.random.default_rng([cfg.seed, round, k])
        res = adaround_block(block, qm, data, cfg, iters, warm_start=warm_start, rng=rng)
        log.info("round %d %s: mse %.3g -> %.3g (rtn %.3g)", round, block.name, res.start_mse, res.end_mse,
                 res.rtn_mse)
        out.blocks.append(res)
    out.seconds = time.perf_counter() - t0
    return out


def par(fp_model: ToyUNet, calib: CalibrationSet, opts: InitOptions, cfg: ReconConfig,
        inference_steps: int = 20, sched: Optional[NoiseSchedule] = None) -> tuple[QuantModel, list[RoundLog]]:
    """FP calibration for initialization and the first reconstruction, then ``cfg.rounds`` passes on
    calibration resampled from the current quantized model."""
    qm = initialize(fp_model, calib, opts)
    logs = [reconstruct(qm, calib, cfg, cfg.init_iters, round=0)]
    for n in range(cfg.rounds):
        cal = resample_calibration_quant(qm, calib.n_chains, inference_steps, seed=calib.seed, round=n, sched=sched,
                                         layers=calib.layer_ids)
        logs.append(reconstruct(qm, cal, cfg, cfg.par_iters, round=n + 1, warm_start=True))
    return qm, logs
