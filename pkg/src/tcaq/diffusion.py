"""Toy DDPM/DDIM testbed: 8x8 procedural dataset, a small UNet, training and sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tensor import Adam, NonFiniteError, Tape, Tensor, backward, forward, load_archive, save_archive

log = logging.getLogger(__name__)

IMAGE_SHAPE = (1, 8, 8)
MODES = ("hbar", "vbar", "blob", "checker")
BLOCKS = ("down.0", "down.1", "mid", "up.0", "up.1")


# ---------------------------------------------------------------------------
# schedule and data


@dataclass
class NoiseSchedule:
    """Linear betas.  Unset endpoints default to 1e-4 and 0.02 scaled by 1000/T, so
    a short schedule still ends close to pure noise."""

    T: int = 100
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    betas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        scale = 1000.0 / self.T
        if self.beta_start is None:
            self.beta_start = min(1e-4 * scale, 0.999)
        if self.beta_end is None:
            self.beta_end = min(0.02 * scale, 0.999)
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t, with t = -1 standing for the clean image (ᾱ = 1)."""
        return 1.0 if t < 0 else float(self.alpha_bars[t])

    def timesteps(self, inference_steps: int) -> list[int]:
        if not 1 <= inference_steps <= self.T:
            raise ValueError(f"inference_steps must be in [1, {self.T}], got {inference_steps}")
        stride = self.T // inference_steps
        return list(range(0, stride * inference_steps, stride))


@dataclass
class ToyDataset:
    images: np.ndarray
    labels: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return len(self.images)


def generate_dataset(seed: int, n: int) -> ToyDataset:
    if n < 1:
        raise ValueError("dataset needs n >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(MODES), size=n)
    yy, xx = np.mgrid[0:8, 0:8]
    images = np.empty((n,) + IMAGE_SHAPE, dtype=np.float32)
    for i, mode in enumerate(labels):
        amp = rng.uniform(0.6, 1.0)
        if mode == 0:
            r = rng.integers(0, 7)
            img = np.where((yy == r) | (yy == r + 1), amp, -1.0)
        elif mode == 1:
            c = rng.integers(0, 7)
            img = np.where((xx == c) | (xx == c + 1), amp, -1.0)
        elif mode == 2:
            cy, cx = 3.5 + rng.uniform(-1, 1, size=2)
            sig = rng.uniform(1.0, 1.6)
            img = -1.0 + (amp + 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
        else:
            phase = rng.integers(0, 2)
            img = np.where(((yy // 2 + xx // 2 + phase) % 2) == 0, amp, -amp)
        images[i, 0] = np.clip(img, -1.0, 1.0)
    return ToyDataset(images, labels, seed)


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0)
    if np.shape(eps) != x0.shape:
        raise ValueError(f"eps shape {np.shape(eps)} differs from x0 shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T})")
    ab = sched.alpha_bars[t].reshape((-1,) + (1,) * (x0.ndim - 1)) if t.ndim else sched.alpha_bars[int(t)]
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class LayerInfo:
    lid: str
    kind: str  # conv | linear | post_softmax
    block: Optional[str]
    is_boundary: bool = False
    reparam: bool = True  # eligible for channel rescaling (inputs that vary across samples)

    @property
    def channel_axis(self) -> int:
        return 1 if self.kind == "conv" else -1


class Runtime:
    """Full-precision execution policy; quantized runtimes override these hooks."""

    def prepare(self, t: np.ndarray) -> None:
        pass

    def layer_input(self, lid: str, x: Tensor) -> Tensor:
        return x

    def weight(self, lid: str, w: Tensor) -> Tensor:
        return w

    def post_softmax(self, lid: str, p: Tensor) -> Tensor:
        return p


FP = Runtime()


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class _Ctx:
    def __init__(self, model: "ToyUNet", runtime: Runtime, hook, t: np.ndarray):
        self.m, self.rt, self.hook, self.t = model, runtime, hook, t

    def _in(self, lid, x):
        if self.hook is not None:
            self.hook(lid, x.data, self.t)
        return self.rt.layer_input(lid, x)

    def conv(self, lid, x):
        p = self.m.params
        return forward("conv2d", self._in(lid, x), self.rt.weight(lid, p[lid + ".weight"]), p[lid + ".bias"])

    def linear(self, lid, x):
        p = self.m.params
        return forward("linear", self._in(lid, x), self.rt.weight(lid, p[lid + ".weight"]), p[lid + ".bias"])

    def norm(self, name, x):
        p = self.m.params
        return forward("group_norm", x, p[name + ".weight"], p[name + ".bias"], groups=self.m.groups)

    def post_softmax(self, lid, probs):
        if self.hook is not None:
            self.hook(lid, probs.data, self.t)
        return self.rt.post_softmax(lid, probs)


class ToyUNet:
    """Two-resolution UNet (8x8 and 4x4); every block but down.0 ends in self-attention.

    Blocks and their inputs::

        conv_in -> down.0 -> pool -> down.1 -> mid -> up.0(mid, down.1)
                -> upsample -> up.1(up.0, down.0) -> out.norm -> conv_out
    """

    def __init__(self, channels=(16, 32), temb_dim: int = 32, groups: int = 8, seed: int = 0):
        self.channels = tuple(channels)
        self.temb_dim = temb_dim
        self.groups = groups
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.layers: dict[str, LayerInfo] = {}
        self._rng = np.random.default_rng(seed)
        c0, c1 = self.channels
        self._conv("conv_in", 1, c0, 3, None, boundary=True)
        self._resblock("down.0", c0, c0)
        self._resblock("down.1", c0, c1)
        self._attn("down.1.attn.0", "down.1", c1)
        self._resblock("mid", c1, c1)
        self._attn("mid.attn", "mid", c1)
        self._resblock("up.0", 2 * c1, c1)
        self._attn("up.0.attn.0", "up.0", c1)
        self._resblock("up.1", c1 + c0, c0)
        self._attn("up.1.attn.0", "up.1", c0)
        self._norm("out.norm", c0)
        self._conv("conv_out", c0, 1, 3, None, boundary=True, zero=True)
        del self._rng

    # -- construction helpers
    def _param(self, name, arr):
        self.params[name] = Tensor(arr.astype(np.float32), name=name)

    def _conv(self, lid, cin, cout, k, block, boundary=False, zero=False):
        std = 0.0 if zero else 1.0 / math.sqrt(cin * k * k)
        self._param(lid + ".weight", self._rng.normal(0, std, (cout, cin, k, k)) if std else np.zeros((cout, cin, k, k)))
        self._param(lid + ".bias", np.zeros(cout))
        self.layers[lid] = LayerInfo(lid, "conv", block, boundary)

    def _linear(self, lid, fin, fout, block, reparam=True):
        self._param(lid + ".weight", self._rng.normal(0, 1.0 / math.sqrt(fin), (fout, fin)))
        self._param(lid + ".bias", np.zeros(fout))
        self.layers[lid] = LayerInfo(lid, "linear", block, reparam=reparam)

    def _norm(self, name, c):
        self._param(name + ".weight", np.ones(c))
        self._param(name + ".bias", np.zeros(c))

    def _resblock(self, name, cin, cout):
        self._norm(name + ".norm1", cin)
        self._conv(name + ".conv1", cin, cout, 3, name)
        # the embedding depends on t alone (sine channels are exactly 0 at t=0)
        self._linear(name + ".temb", self.temb_dim, cout, name, reparam=False)
        self._norm(name + ".norm2", cout)
        self._conv(name + ".conv2", cout, cout, 3, name)
        if cin != cout:
            self._conv(name + ".skip", cin, cout, 1, name)

    def _attn(self, lid, block, c):
        self._norm(lid + ".norm", c)
        for part in ("q", "k", "v", "proj"):
            self._linear(f"{lid}.{part}", c, c, block)
        self.layers[lid] = LayerInfo(lid, "post_softmax", block)

    # -- registry
    def layer_ids(self, kind: Optional[str] = None, quantized_only: bool = False) -> list[str]:
        return [l.lid for l in self.layers.values()
                if (kind is None or l.kind == kind) and not (quantized_only and l.is_boundary)]

    def block_layers(self, block: str) -> list[str]:
        return [l.lid for l in self.layers.values() if l.block == block]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "ToyUNet":
        new = object.__new__(ToyUNet)
        new.__dict__.update({k: v for k, v in self.__dict__.items() if k != "params"})
        new.params = {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()}
        return new

    # -- forward
    def _resblock_fwd(self, ctx, name, x, temb):
        h = forward("silu", ctx.norm(name + ".norm1", x))
        h = ctx.conv(name + ".conv1", h)
        h = forward("scale_embed_add", h, ctx.linear(name + ".temb", temb))
        h = forward("silu", ctx.norm(name + ".norm2", h))
        h = ctx.conv(name + ".conv2", h)
        skip = ctx.conv(name + ".skip", x) if name + ".skip" in self.layers else x
        return forward("add", h, skip)

    def _attn_fwd(self, ctx, lid, x):
        n, c, hh, ww = x.shape
        h = ctx.norm(lid + ".norm", x)
        tok = forward("transpose", forward("reshape", h, shape=(n, c, hh * ww)), axes=(0, 2, 1))
        q = ctx.linear(lid + ".q", tok)
        k = ctx.linear(lid + ".k", tok)
        v = ctx.linear(lid + ".v", tok)
        scores = forward("mul", forward("matmul", q, forward("transpose", k, axes=(0, 2, 1))), 1.0 / math.sqrt(c))
        probs = ctx.post_softmax(lid, forward("softmax", scores))
        o = ctx.linear(lid + ".proj", forward("matmul", probs, v))
        o = forward("reshape", forward("transpose", o, axes=(0, 2, 1)), shape=(n, c, hh, ww))
        return forward("add", x, o)

    def run_block(self, block: str, inputs: list[Tensor], temb: Tensor, ctx: _Ctx) -> Tensor:
        if block == "down.0":
            x = inputs[0]
        elif block == "down.1":
            x = forward("avg_pool2", inputs[0])
        elif block == "mid":
            x = inputs[0]
        elif block == "up.0":
            x = forward("concat", inputs[0], inputs[1], axis=1)
        elif block == "up.1":
            x = forward("concat", forward("upsample2", inputs[0]), inputs[1], axis=1)
        else:
            raise KeyError(f"unknown block {block!r}")
        h = self._resblock_fwd(ctx, block, x, temb)
        for lid in self.block_layers(block):
            if self.layers[lid].kind == "post_softmax":
                h = self._attn_fwd(ctx, lid, h)
        return h

    BLOCK_INPUTS = {"down.0": ("stem",), "down.1": ("down.0",), "mid": ("down.1",),
                    "up.0": ("mid", "down.1"), "up.1": ("up.0", "down.0")}

    def head(self, h: Tensor, ctx: _Ctx) -> Tensor:
        """Output head after the last block; its conv is a full-precision boundary layer."""
        return ctx.conv("conv_out", forward("silu", ctx.norm("out.norm", h)))

    def make_ctx(self, t: np.ndarray, runtime: Optional[Runtime] = None, hook=None) -> _Ctx:
        runtime = runtime or FP
        runtime.prepare(np.asarray(t))
        return _Ctx(self, runtime, hook, np.asarray(t))

    def embed(self, t: np.ndarray) -> Tensor:
        return forward("silu", Tensor(timestep_embedding(t, self.temb_dim)))

    def forward(self, x, t, runtime: Optional[Runtime] = None, hook: Optional[Callable] = None,
                block_hook: Optional[Callable] = None) -> Tensor:
        """Predict noise for images ``x`` (N,1,8,8) at integer timesteps ``t`` (N,).

        ``hook(layer_id, input_array, t)`` observes every quantizable layer input;
        ``block_hook(block, inputs, output)`` observes block boundaries.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
        ctx = self.make_ctx(t, runtime, hook)
        temb = self.embed(t)
        feats = {"stem": ctx.conv("conv_in", x)}
        for b in BLOCKS:
            ins = [feats[k] for k in self.BLOCK_INPUTS[b]]
            feats[b] = self.run_block(b, ins, temb, ctx)
            if block_hook is not None:
                block_hook(b, ins, feats[b])
        return self.head(feats["up.1"], ctx)

    __call__ = forward

    # -- persistence
    def state_records(self) -> dict[str, np.ndarray]:
        rec = {f"model/{k}": v.data for k, v in self.params.items()}
        rec["model/__config__"] = np.array([*self.channels, self.temb_dim, self.groups, self.seed], dtype=np.float32)
        return rec

    @classmethod
    def from_records(cls, rec: dict[str, np.ndarray]) -> "ToyUNet":
        cfg = rec["model/__config__"].astype(int)
        m = cls(channels=(cfg[0], cfg[1]), temb_dim=int(cfg[2]), groups=int(cfg[3]), seed=int(cfg[4]))
        for k in m.params:
            m.params[k] = Tensor(rec[f"model/{k}"], name=k)
        return m

    def save(self, path) -> None:
        save_archive(path, self.state_records())

    @classmethod
    def load(cls, path) -> "ToyUNet":
        return cls.from_records(load_archive(path))


# ---------------------------------------------------------------------------
# training and sampling


def train_toy(dataset: ToyDataset, sched: NoiseSchedule, steps: int = 3000, lr: float = 1e-3, seed: int = 0,
              batch: int = 32, model: Optional[ToyUNet] = None) -> ToyUNet:
    """Fit the epsilon-prediction MSE objective; per-step losses land in ``model.history``."""
    if steps < 1:
        raise ValueError("train_toy needs steps >= 1")
    rng = np.random.default_rng(seed)
    model = model or ToyUNet(seed=seed)
    opt = Adam(model.parameters(), lr=lr)
    for p in model.parameters():
        p.requires_grad = True
    history = []
    try:
        for step in range(steps):
            idx = rng.integers(0, dataset.n, size=batch)
            t = rng.integers(0, sched.T, size=batch)
            eps = rng.standard_normal((batch,) + IMAGE_SHAPE).astype(np.float32)
            xt = forward_diffuse(dataset.images[idx], t, eps, sched)
            opt.zero_grad()
            with Tape() as tape:
                loss = forward("mse_loss", model(xt, t), Tensor(eps))
            val = loss.item()
            if not np.isfinite(val):
                raise NonFiniteError(f"training diverged at step {step}: loss={val}")
            backward(tape, loss)
            opt.step()
            history.append(val)
    except NonFiniteError as e:
        if "training diverged" in str(e):
            raise
        raise NonFiniteError(f"training diverged at step {step}: {e}") from e
    finally:
        for p in model.parameters():
            p.requires_grad = False
            p.grad = None
    model.history = history
    return model


def ddim_step(model: ToyUNet, x_t: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule, eta: float = 0.0,
              runtime: Optional[Runtime] = None, hook: Optional[Callable] = None,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One DDIM update from t to t_prev (t_prev = -1 means the clean image)."""
    if not t > t_prev >= -1:
        raise ValueError(f"ddim_step needs t > t_prev >= -1, got t={t}, t_prev={t_prev}")
    eps = model(x_t, np.full(len(x_t), t), runtime=runtime, hook=hook).data.astype(np.float64)
    ab, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    x0 = (x_t - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
    sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)) if eta else 0.0
    out = math.sqrt(ab_prev) * x0 + math.sqrt(max(1 - ab_prev - sigma ** 2, 0.0)) * eps
    if sigma:
        out = out + sigma * (rng or np.random.default_rng()).standard_normal(x_t.shape)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite DDIM state at t={t}")
    return out.astype(np.float32)


def sample(model: ToyUNet, n: int, inference_steps: int = 20, seed: int = 0, sched: Optional[NoiseSchedule] = None,
           runtime: Optional[Runtime] = None, hook: Optional[Callable] = None, chunk: int = 256,
           trajectory: Optional[Callable] = None) -> np.ndarray:
    """Deterministic (eta=0) DDIM sampling; ``trajectory(t, x_t, chunk_start)`` sees each state."""
    sched = sched or NoiseSchedule()
    if n == 0:
        return np.zeros((0,) + IMAGE_SHAPE, dtype=np.float32)
    ts = sched.timesteps(inference_steps)
    x_T = np.random.default_rng(seed).standard_normal((n,) + IMAGE_SHAPE).astype(np.float32)
    outs = []
    for start in range(0, n, chunk):
        x = x_T[start:start + chunk]
        for i in range(len(ts) - 1, -1, -1):
            t = ts[i]
            if trajectory is not None:
                trajectory(t, x, start)
            x = ddim_step(model, x, t, ts[i - 1] if i else -1, sched, runtime=runtime, hook=hook)
        outs.append(x)
    return np.clip(np.concatenate(outs), -1.5, 1.5)
