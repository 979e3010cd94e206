"""Dense float tensors with a recording tape for reverse-mode differentiation.

Ops are registered by name in ``OPS``; each entry pairs a forward kernel with
its vector-Jacobian product. Recording only happens inside an active
:class:`Tape`, so inference code pays nothing for autodiff.
"""
from __future__ import annotations

import contextvars
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "OpDef", "OPS", "register_op", "forward", "backward",
    "finite_difference_check", "Adam", "ShapeError", "NonFiniteError",
    "save_archive", "load_archive", "ArchiveError",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = np.float64 if arr.dtype == np.float64 else np.float32
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return forward("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return forward("add", self, forward("mul", other, -1.0))

    def __mul__(self, other):
        return forward("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal constant")
        return forward("mul", self, 1.0 / np.asarray(other))

    def __matmul__(self, other):
        return forward("matmul", self, other)


@dataclass
class OpDef:
    forward: Callable[[list, dict], tuple]
    backward: Callable[[np.ndarray, list, np.ndarray, Any, dict], list]


@dataclass
class Node:
    op: str
    inputs: list
    output: Tensor
    saved: Any
    attrs: dict


OPS: dict[str, OpDef] = {}

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("tcaq_tape", default=None)


class Tape:
    """Ordered record of differentiable ops executed while the tape is active."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward kernel from the leaf values."""
        values: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            arrays = [values.get(id(t), t.data) for t in node.inputs]
            out, _ = OPS[node.op].forward(arrays, node.attrs)
            values[id(node.output)] = out
            outs.append(out)
        return outs


def register_op(name: str, fwd, bwd) -> None:
    OPS[name] = OpDef(fwd, bwd)


def _as_tensor(x, like_dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like_dtype))


def forward(op_kind: str, *inputs, **attrs) -> Tensor:
    """Apply a registered op; appends a node to the active tape when tracking."""
    try:
        op = OPS[op_kind]
    except KeyError:
        raise KeyError(f"unknown op {op_kind!r}; known: {sorted(OPS)}") from None
    dtype = next((t.data.dtype for t in inputs if isinstance(t, Tensor)), np.float32)
    tensors = [_as_tensor(x, dtype) for x in inputs]
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op_kind}: non-finite input of shape {t.shape}")
    out, saved = op.forward([t.data for t in tensors], attrs)
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(t.requires_grad for t in tensors)
    res = Tensor(out, requires_grad=track, dtype=out.dtype)
    if track:
        tape.nodes.append(Node(op_kind, tensors, res, saved, attrs))
    return res


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf recorded on ``tape``.

    Leaves that are recorded but not reachable from ``loss`` receive a zero
    gradient rather than an error.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.output) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        arrays = [t.data for t in node.inputs]
        in_grads = OPS[node.op].backward(g, arrays, node.output.data, node.saved, node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.astype(leaf.data.dtype, copy=False) if leaf.grad is None else leaf.grad + g


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    Runs in float64; in float32 the difference quotient itself carries
    ~1e-4 roundoff at h=1e-3, which would swamp the error being measured.
    """
    if not 0 < h <= 0.1:
        raise ValueError(f"h must be in (0, 0.1], got {h}")
    base = np.asarray(x.data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    backward(tape, out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


# ---------------------------------------------------------------------------
# kernels


def _pair_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    # Only equal shapes, scalars, or same-rank keepdims forms like (1,C,1,1).
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim == b.ndim:
        if all(x == y or y == 1 for x, y in zip(a.shape, b.shape)):
            return
        if all(x == y or x == 1 for x, y in zip(a.shape, b.shape)):
            return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _add_fwd(xs, attrs):
    a, b = xs
    _pair_shapes("add", a, b)
    return a + b, None


def _add_bwd(g, xs, out, saved, attrs):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


def _mul_fwd(xs, attrs):
    a, b = xs
    _pair_shapes("mul", a, b)
    return a * b, None


def _mul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _matmul_fwd(xs, attrs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, None


def _matmul_bwd(g, xs, out, saved, attrs):
    a, b = xs
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return [ga, gb]


def _linear_fwd(xs, attrs):
    x, w = xs[0], xs[1]
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x @ w.T
    if len(xs) > 2:
        if xs[2].shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {xs[2].shape} does not match weight {w.shape}")
        out = out + xs[2]
    return out, None


def _linear_bwd(g, xs, out, saved, attrs):
    x, w = xs[0], xs[1]
    g2 = g.reshape(-1, g.shape[-1])
    grads = [g @ w, g2.T @ x.reshape(-1, x.shape[-1])]
    if len(xs) > 2:
        grads.append(g2.sum(axis=0))
    return grads


def _conv_core(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Same-padded stride-1 conv as one matmul over NHWC patches ordered (kh, kw, C)."""
    n, c, h, wd = x.shape
    o, k = w.shape[0], w.shape[2]
    if k == 1:
        cols = x.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    else:
        p = k // 2
        xp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=x.dtype)
        xp[:, p:p + h, p:p + wd, :] = x.transpose(0, 2, 3, 1)
        cols = np.empty((n, h, wd, k * k, c), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i * k + j, :] = xp[:, i:i + h, j:j + wd, :]
        cols = cols.reshape(n * h * wd, k * k * c)
    wm = w.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wm.T).reshape(n, h, wd, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv2d_fwd(xs, attrs):
    x, w = xs[0], xs[1]
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape} (NCHW / OIHW, odd square kernel)")
    out, cols = _conv_core(x, w)
    if len(xs) > 2:
        if xs[2].shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {xs[2].shape} does not match kernel {w.shape}")
        out = out + xs[2][None, :, None, None]
    return out, cols


def _conv2d_bwd(g, xs, out, cols, attrs):
    x, w = xs[0], xs[1]
    o = w.shape[0]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    k = w.shape[2]
    gw = np.ascontiguousarray((g2.T @ cols).reshape(o, k, k, w.shape[1]).transpose(0, 3, 1, 2))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx, _ = _conv_core(g, wf)
    grads = [gx, gw]
    if len(xs) > 2:
        grads.append(g2.sum(axis=0))
    return grads


def _concat_fwd(xs, attrs):
    axis = attrs.get("axis", 1)
    ref = xs[0].shape
    for a in xs[1:]:
        if a.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(a.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}")
    return np.concatenate(xs, axis=axis), None


def _concat_bwd(g, xs, out, saved, attrs):
    axis = attrs.get("axis", 1)
    cuts = np.cumsum([a.shape[axis] for a in xs])[:-1]
    return list(np.split(g, cuts, axis=axis))


def _reshape_fwd(xs, attrs):
    x = xs[0]
    shape = tuple(attrs["shape"])
    try:
        return x.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None


def _reshape_bwd(g, xs, out, saved, attrs):
    return [g.reshape(xs[0].shape)]


def _transpose_fwd(xs, attrs):
    axes = attrs.get("axes")
    if axes is None:
        axes = tuple(range(xs[0].ndim - 2)) + (xs[0].ndim - 1, xs[0].ndim - 2)
    if sorted(axes) != list(range(xs[0].ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {xs[0].shape}")
    return np.ascontiguousarray(xs[0].transpose(axes)), tuple(axes)


def _transpose_bwd(g, xs, out, axes, attrs):
    return [g.transpose(np.argsort(axes))]


def _softmax_fwd(xs, attrs):
    x = xs[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, xs, p, saved, attrs):
    return [p * (g - (g * p).sum(axis=-1, keepdims=True))]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_fwd(xs, attrs):
    s = _sigmoid(xs[0])
    return xs[0] * s, s


def _silu_bwd(g, xs, out, s, attrs):
    return [g * (s + xs[0] * s * (1 - s))]


def _sigmoid_fwd(xs, attrs):
    return _sigmoid(xs[0]), None


def _sigmoid_bwd(g, xs, s, saved, attrs):
    return [g * s * (1 - s)]


def _group_norm_fwd(xs, attrs):
    x, gamma, beta = xs
    groups = attrs["groups"]
    eps = attrs.get("eps", 1e-5)
    n, c = x.shape[:2]
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: {c} channels, {groups} groups, affine {gamma.shape}/{beta.shape}")
    xg = x.reshape(n, groups, -1)
    d = xg - xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt((d * d).mean(axis=2, keepdims=True) + eps)
    xhat = (d * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape), (xhat, inv)


def _group_norm_bwd(g, xs, out, saved, attrs):
    x, gamma, _ = xs
    xhat, inv = saved
    groups = attrs["groups"]
    n, c = x.shape[:2]
    bshape = (1, c) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    ggamma = (g * xhat).sum(axis=red)
    gbeta = g.sum(axis=red)
    dxh = (g * gamma.reshape(bshape)).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    dx = inv * (dxh - dxh.mean(axis=2, keepdims=True) - xh * (dxh * xh).mean(axis=2, keepdims=True))
    return [dx.reshape(x.shape), ggamma, gbeta]


def _reduce_count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[a] for a in axes]))


def _mean_fwd(xs, attrs):
    axis = attrs.get("axis")
    axis = tuple(axis) if isinstance(axis, list) else axis
    return np.asarray(xs[0].mean(axis=axis, keepdims=attrs.get("keepdims", False))), None


def _sum_fwd(xs, attrs):
    axis = attrs.get("axis")
    axis = tuple(axis) if isinstance(axis, list) else axis
    return np.asarray(xs[0].sum(axis=axis, keepdims=attrs.get("keepdims", False))), None


def _expand_grad(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _mean_bwd(g, xs, out, saved, attrs):
    axis = attrs.get("axis")
    n = _reduce_count(xs[0].shape, tuple(axis) if isinstance(axis, list) else axis)
    return [np.ascontiguousarray(_expand_grad(g, xs[0].shape, axis, attrs.get("keepdims", False))) / n]


def _sum_bwd(g, xs, out, saved, attrs):
    return [np.ascontiguousarray(_expand_grad(g, xs[0].shape, attrs.get("axis"), attrs.get("keepdims", False)))]


def _mse_fwd(xs, attrs):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return np.asarray(np.mean(d * d)), d


def _mse_bwd(g, xs, out, d, attrs):
    ga = g * 2.0 * d / d.size
    return [ga, -ga]


def _clamp_fwd(xs, attrs):
    x = xs[0]
    return np.clip(x, attrs.get("lo", -np.inf), attrs.get("hi", np.inf)).astype(x.dtype, copy=False), None


def _clamp_bwd(g, xs, out, saved, attrs):
    x = xs[0]
    inside = (x >= attrs.get("lo", -np.inf)) & (x <= attrs.get("hi", np.inf))
    return [g * inside]


def _scale_embed_add_fwd(xs, attrs):
    x, e = xs
    if x.ndim != 4 or e.shape != x.shape[:2]:
        raise ShapeError(f"scale_embed_add: feature map {x.shape} vs embedding {e.shape}")
    return x + e[:, :, None, None], None


def _scale_embed_add_bwd(g, xs, out, saved, attrs):
    return [g, g.sum(axis=(2, 3))]


def _avg_pool2_fwd(xs, attrs):
    x = xs[0]
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: odd spatial shape {x.shape}")
    return (x[:, :, 0::2, 0::2] + x[:, :, 1::2, 0::2] + x[:, :, 0::2, 1::2] + x[:, :, 1::2, 1::2]) * 0.25, None


def _avg_pool2_bwd(g, xs, out, saved, attrs):
    return [np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25]


def _upsample2_fwd(xs, attrs):
    if xs[0].ndim != 4:
        raise ShapeError(f"upsample2: expected NCHW, got {xs[0].shape}")
    return np.repeat(np.repeat(xs[0], 2, axis=2), 2, axis=3), None


def _upsample2_bwd(g, xs, out, saved, attrs):
    n, c, h, w = g.shape
    return [g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))]


for _name, _f, _b in [
    ("add", _add_fwd, _add_bwd),
    ("mul", _mul_fwd, _mul_bwd),
    ("matmul", _matmul_fwd, _matmul_bwd),
    ("linear", _linear_fwd, _linear_bwd),
    ("conv2d", _conv2d_fwd, _conv2d_bwd),
    ("concat", _concat_fwd, _concat_bwd),
    ("reshape", _reshape_fwd, _reshape_bwd),
    ("transpose", _transpose_fwd, _transpose_bwd),
    ("softmax", _softmax_fwd, _softmax_bwd),
    ("silu", _silu_fwd, _silu_bwd),
    ("sigmoid", _sigmoid_fwd, _sigmoid_bwd),
    ("group_norm", _group_norm_fwd, _group_norm_bwd),
    ("mean", _mean_fwd, _mean_bwd),
    ("sum", _sum_fwd, _sum_bwd),
    ("mse_loss", _mse_fwd, _mse_bwd),
    ("clamp", _clamp_fwd, _clamp_bwd),
    ("scale_embed_add", _scale_embed_add_fwd, _scale_embed_add_bwd),
    ("avg_pool2", _avg_pool2_fwd, _avg_pool2_bwd),
    ("upsample2", _upsample2_fwd, _upsample2_bwd),
]:
    register_op(_name, _f, _b)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            step = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# archive format: magic, version byte, u32 record count, then records of
# (u32 name length, utf-8 name, u32 ndim, u32 dims..., little-endian f32 data)

MAGIC = b"TCAQTNSR"
VERSION = 1


class ArchiveError(IOError):
    pass


def save_archive(path, records: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(records))]
    for name, arr in records.items():
        a = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        chunks.append(a.tobytes(order="C"))
    path.write_bytes(b"".join(chunks))


def load_archive(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive (bad magic)")
    version, count = struct.unpack_from("<BI", buf, 8)
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    off = 13
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    return out
