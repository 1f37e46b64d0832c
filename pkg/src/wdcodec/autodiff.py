"""Minimal reverse-mode differentiation over a fixed operator set.

A ``Graph`` is built once from placeholder leaves (named inputs and
parameters) and operator nodes, then evaluated many times with fresh
leaf values: ``forward_eval`` runs the nodes in topological (insertion)
order, ``backward_grad`` additionally walks the tape in reverse and
returns exact gradients of the scalar output for every parameter.

Conventions: node values share the graph dtype (float32 by default),
except reductions, which accumulate and store float64. Elementwise
binary operators follow numpy broadcasting; gradients are summed back
over broadcast axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .imgsig import bilinear_resize_array, conv2d_array, downsample2x_array

__all__ = [
    "Graph",
    "Node",
    "ParamSet",
    "AdamState",
    "GraphError",
    "forward_eval",
    "backward_grad",
    "soft_quantize",
    "adam_step",
    "CONTEXT_OFFSETS",
    "RATE_FLOOR",
    "laplace_bits",
]

#: Causal neighborhood read by the context gather: two rows above (width 3)
#: plus the left neighbor, in raster order. All offsets strictly precede
#: the current element.
CONTEXT_OFFSETS = ((-2, -1), (-2, 0), (-2, 1), (-1, -1), (-1, 0), (-1, 1), (0, -1))

#: Probability floor shared with the integer coding tables (1 / 2^16).
RATE_FLOOR = 2.0 ** -16

_LN2 = math.log(2.0)


class GraphError(Exception):
    """Raised for malformed graphs or mismatched evaluation values."""


@dataclass(frozen=True)
class Node:
    graph: "Graph"
    idx: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph.shapes[self.idx]


@dataclass
class ParamSet:
    """Named parameter tensors with optional per-tensor learning-rate scale."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    lr_scale: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, lr_scale: float = 1.0) -> None:
        if name in self.tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        self.tensors[name] = np.array(value, dtype=np.float64)
        self.lr_scale[name] = float(lr_scale)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()}, dict(self.lr_scale))


class Graph:
    """Recorded computation over placeholder leaves."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.ops: list[tuple] = []  # (kind, input idxs, attrs)
        self.shapes: list[tuple[int, ...]] = []
        self.inputs: dict[str, int] = {}
        self.params: dict[str, int] = {}
        self.constants: dict[int, np.ndarray] = {}
        self.output_idx: int | None = None
        self.fetches: dict[str, int] = {}

    # -- leaves ------------------------------------------------------------

    def _new(self, kind: str, in_idxs: tuple[int, ...], shape: tuple[int, ...], **attrs) -> Node:
        for i in in_idxs:
            if not (0 <= i < len(self.ops)):
                raise GraphError(f"op {kind}: input id {i} out of range")
        self.ops.append((kind, in_idxs, attrs))
        self.shapes.append(tuple(int(s) for s in shape))
        return Node(self, len(self.ops) - 1)

    def input(self, name: str, shape: tuple[int, ...]) -> Node:
        if name in self.inputs or name in self.params:
            raise GraphError(f"duplicate leaf name {name!r}")
        n = self._new("input", (), shape, name=name)
        self.inputs[name] = n.idx
        return n

    def param(self, name: str, shape: tuple[int, ...]) -> Node:
        if name in self.inputs or name in self.params:
            raise GraphError(f"duplicate leaf name {name!r}")
        n = self._new("param", (), shape, name=name)
        self.params[name] = n.idx
        return n

    def constant(self, value: np.ndarray) -> Node:
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        n = self._new("const", (), arr.shape)
        self.constants[n.idx] = arr
        return n

    # -- elementwise -------------------------------------------------------

    def _binary(self, kind: str, a: Node, b: Node) -> Node:
        shape = np.broadcast_shapes(a.shape, b.shape)
        return self._new(kind, (a.idx, b.idx), shape)

    def add(self, a: Node, b: Node) -> Node:
        return self._binary("add", a, b)

    def sub(self, a: Node, b: Node) -> Node:
        return self._binary("sub", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        return self._binary("mul", a, b)

    def maximum(self, a: Node, b: Node) -> Node:
        return self._binary("max", a, b)

    def minimum(self, a: Node, b: Node) -> Node:
        # min(a, b) = -max(-a, -b); kept primitive for clarity
        return self._binary("min", a, b)

    def square(self, a: Node) -> Node:
        return self._new("square", (a.idx,), a.shape)

    def sqrt_clamped(self, a: Node, floor: float = 0.0) -> Node:
        return self._new("sqrt_clamped", (a.idx,), a.shape, floor=float(floor))

    def abs(self, a: Node) -> Node:
        return self._new("abs", (a.idx,), a.shape)

    def exp(self, a: Node) -> Node:
        return self._new("exp", (a.idx,), a.shape)

    def log(self, a: Node) -> Node:
        return self._new("log", (a.idx,), a.shape)

    def scale(self, a: Node, c: float) -> Node:
        return self._new("scale", (a.idx,), a.shape, c=float(c))

    def shift(self, a: Node, c: float) -> Node:
        return self._new("shift", (a.idx,), a.shape, c=float(c))

    # -- reductions ---------------------------------------------------------

    def sum(self, a: Node) -> Node:
        return self._new("sum", (a.idx,), ())

    def mean(self, a: Node) -> Node:
        return self._new("mean", (a.idx,), ())

    # -- structure ----------------------------------------------------------

    def concat(self, parts: list[Node]) -> Node:
        if not parts:
            raise GraphError("concat of zero tensors")
        base = parts[0].shape
        for p in parts:
            if len(p.shape) != 3 or p.shape[1:] != base[1:]:
                raise GraphError(f"concat shape mismatch: {p.shape} vs {base}")
        c = sum(p.shape[0] for p in parts)
        return self._new("concat", tuple(p.idx for p in parts), (c,) + base[1:],
                         splits=tuple(p.shape[0] for p in parts))

    def slice_channels(self, a: Node, start: int, stop: int) -> Node:
        if len(a.shape) != 3 or not (0 <= start < stop <= a.shape[0]):
            raise GraphError(f"bad channel slice [{start}:{stop}] of {a.shape}")
        return self._new("slice", (a.idx,), (stop - start,) + a.shape[1:], start=start, stop=stop)

    # -- spatial ------------------------------------------------------------

    def conv2d(self, x: Node, w: Node, b: Node | None = None,
               stride: int = 1, padding: str = "same") -> Node:
        if len(x.shape) != 3 or len(w.shape) != 4:
            raise GraphError(f"conv2d expects (ci,h,w) and (co,ci,kh,kw), got {x.shape}, {w.shape}")
        co, ci, kh, kw = w.shape
        if x.shape[0] != ci:
            raise GraphError(f"conv2d channel mismatch: input {x.shape[0]} vs kernels {ci}")
        if b is not None and b.shape != (co,):
            raise GraphError(f"conv2d bias shape {b.shape} != ({co},)")
        h, wid = x.shape[1:]
        if padding == "valid":
            ho, wo = (h - kh) // stride + 1, (wid - kw) // stride + 1
        elif padding in ("same", "same_reflect"):
            ho, wo = -(-h // stride), -(-wid // stride)
        else:
            raise GraphError(f"unknown padding {padding!r}")
        ins = (x.idx, w.idx) if b is None else (x.idx, w.idx, b.idx)
        return self._new("conv2d", ins, (co, ho, wo), stride=stride, padding=padding)

    def downsample2x(self, x: Node) -> Node:
        if len(x.shape) != 3:
            raise GraphError(f"downsample2x expects (c,h,w), got {x.shape}")
        c, h, w = x.shape
        return self._new("down2x", (x.idx,), (c, -(-h // 2), -(-w // 2)))

    def bilinear_resize(self, x: Node, h2: int, w2: int) -> Node:
        if len(x.shape) != 3:
            raise GraphError(f"bilinear_resize expects (c,h,w), got {x.shape}")
        return self._new("bilinear", (x.idx,), (x.shape[0], h2, w2), h2=int(h2), w2=int(w2))

    def causal_context(self, x: Node) -> Node:
        if len(x.shape) != 3 or x.shape[0] != 1:
            raise GraphError(f"causal_context expects (1,h,w), got {x.shape}")
        return self._new("context", (x.idx,), (len(CONTEXT_OFFSETS),) + x.shape[1:])

    # -- quantization and rate ------------------------------------------------

    def soft_quantize(self, x: Node, mode: str, temperature: float = 1.0,
                      noise: Node | None = None) -> Node:
        if mode == "ste":
            return self._new("soft_quantize", (x.idx,), x.shape, mode="ste")
        if mode == "noise":
            if temperature <= 0:
                raise GraphError("noise quantization requires temperature > 0")
            if noise is None or noise.shape != x.shape:
                raise GraphError("noise quantization requires a noise leaf of matching shape")
            return self._new("soft_quantize", (x.idx, noise.idx), x.shape,
                             mode="noise", temperature=float(temperature))
        raise GraphError(f"unknown quantization mode {mode!r}")

    def laplace_rate(self, z: Node, mu: Node, b: Node) -> Node:
        if not (z.shape == mu.shape == b.shape):
            raise GraphError(f"laplace_rate shape mismatch: {z.shape}, {mu.shape}, {b.shape}")
        return self._new("laplace_rate", (z.idx, mu.idx, b.idx), z.shape)

    # -- wiring --------------------------------------------------------------

    def set_output(self, node: Node) -> None:
        self.output_idx = node.idx

    def mark(self, name: str, node: Node) -> None:
        self.fetches[name] = node.idx


# ---------------------------------------------------------------------------
# Shared numeric kernels
# ---------------------------------------------------------------------------


def laplace_bits(z, mu, b):
    """Bits to code integer-quantized z under Laplace(mu, b), floored.

    Uses the closed-form mass of the unit interval around z:
    exp(-|t|) * sinh(h) outside the center, 1 - exp(-h) * cosh(t) inside,
    with t = (z - mu)/b and h = 1/(2b).
    """
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = (z - mu) / b
    h = 1.0 / (2.0 * b)
    inside = np.abs(t) < h
    p_out = np.exp(-np.abs(t)) * np.sinh(h)
    p_in = -np.expm1(-h + np.log(np.cosh(np.minimum(np.abs(t), h))))
    p = np.where(inside, p_in, p_out)
    return -np.log2(np.maximum(p, RATE_FLOOR)), p


def _laplace_bits_grads(z, mu, b, g):
    """Gradients of sum(g * bits) w.r.t. z, mu, b."""
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = (z - mu) / b
    h = 1.0 / (2.0 * b)
    inside = np.abs(t) < h
    p_out = np.exp(-np.abs(t)) * np.sinh(h)
    p_in = -np.expm1(-h + np.log(np.cosh(np.minimum(np.abs(t), h))))
    p = np.where(inside, p_in, p_out)
    floored = p <= RATE_FLOOR
    dldp = np.where(floored, 0.0, -1.0 / (np.maximum(p, RATE_FLOOR) * _LN2))
    dpdt = np.where(inside, -np.exp(-h) * np.sinh(t), -np.sign(t) * p_out)
    dpdh = np.where(inside, np.exp(-h) * np.cosh(np.minimum(np.abs(t), h)), np.exp(-np.abs(t)) * np.cosh(h))
    gz = g * dldp * dpdt / b
    gmu = -gz
    gb = g * dldp * (dpdt * (-t / b) + dpdh * (-1.0 / (2.0 * b * b)))
    return gz, gmu, gb


def soft_quantize(x: np.ndarray, mode: str, temperature: float = 1.0,
                  noise: np.ndarray | None = None) -> np.ndarray:
    """Quantization surrogate: additive bounded noise, or hard rounding
    (whose training-time gradient is passed through unchanged)."""
    if mode == "ste":
        return np.rint(x)
    if mode == "noise":
        if temperature <= 0:
            raise ValueError("noise quantization requires temperature > 0")
        if noise is None:
            raise ValueError("noise quantization requires a noise array")
        return x + temperature * noise
    raise ValueError(f"unknown quantization mode {mode!r}")


@lru_cache(maxsize=256)
def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Dense (dst, src) matrix of half-pixel-center bilinear weights."""
    m = np.zeros((dst, src))
    x = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    x = np.clip(x, 0.0, src - 1.0)
    i0 = np.minimum(np.floor(x).astype(int), src - 1)
    f = x - i0
    i1 = np.minimum(i0 + 1, src - 1)
    np.add.at(m, (np.arange(dst), i0), 1.0 - f)
    np.add.at(m, (np.arange(dst), i1), f)
    m.setflags(write=False)
    return m


def _pad_index(n: int, before: int, after: int) -> np.ndarray:
    """Source index for each padded position (mirrors _pad_2d's mode choice)."""
    mode = "edge" if n == 1 else "reflect"
    return np.pad(np.arange(n), (before, after), mode=mode)


def _fold_pad_axis(gp: np.ndarray, axis: int, before: int, after: int, n: int) -> np.ndarray:
    """Adjoint of mirror/edge padding along one axis: scatter-add back."""
    if before == 0 and after == 0:
        return gp
    idx = _pad_index(n, before, after)
    moved = np.moveaxis(gp, axis, 0)
    out = np.zeros((n,) + moved.shape[1:], dtype=gp.dtype)
    np.add.at(out, idx, moved)
    return np.moveaxis(out, 0, axis)


def _down2x_adjoint(g: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of the separable binomial stride-2 downsampler."""
    c, h, w = in_shape

    def up_axis(gax: np.ndarray, axis: int, n: int) -> np.ndarray:
        if n == 1:
            return gax
        n2 = (n + 1) // 2
        shape = list(gax.shape)
        shape[axis] = n + 2
        gp = np.zeros(shape, dtype=gax.dtype)

        def isl(start):
            idx = [slice(None)] * gax.ndim
            idx[axis] = slice(start, start + 2 * n2 - 1, 2)
            return tuple(idx)

        gp[isl(0)] += 0.25 * gax
        gp[isl(1)] += 0.5 * gax
        gp[isl(2)] += 0.25 * gax
        return _fold_pad_axis(gp, axis, 1, 1, n)

    return up_axis(up_axis(g, 2, w), 1, h)


def _conv2d_backward(g, x, w, stride, padding, want_bias):
    co, ci, kh, kw = w.shape
    h, wid = x.shape[1:]
    if padding == "valid":
        pads = (0, 0, 0, 0)
        xp = x
    else:
        def sp(n, k):
            out = -(-n // stride)
            total = max((out - 1) * stride + k - n, 0)
            return total // 2, total - total // 2

        (ph0, ph1), (pw0, pw1) = sp(h, kh), sp(wid, kw)
        pads = (ph0, ph1, pw0, pw1)
        if padding == "same":
            xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1)))
        else:
            ridx = _pad_index(h, ph0, ph1)
            cidx = _pad_index(wid, pw0, pw1)
            xp = x[:, ridx][:, :, cidx]
    ho, wo = g.shape[1:]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(kh):
        for bcol in range(kw):
            xs = xp[:, a:a + stride * ho:stride, bcol:bcol + stride * wo:stride]
            gw[:, :, a, bcol] = np.tensordot(g, xs, axes=([1, 2], [1, 2]))
            gxp[:, a:a + stride * ho:stride, bcol:bcol + stride * wo:stride] += (
                np.tensordot(w[:, :, a, bcol], g, axes=(0, 0))
            )
    ph0, ph1, pw0, pw1 = pads
    if padding == "same":
        gx = gxp[:, ph0:ph0 + h, pw0:pw0 + wid]
    elif padding == "same_reflect":
        gx = _fold_pad_axis(_fold_pad_axis(gxp, 1, ph0, ph1, h), 2, pw0, pw1, wid)
    else:
        gx = gxp
    gb = g.sum(axis=(1, 2)) if want_bias else None
    return gx, gw, gb


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _leaf_value(kind, attrs, params, inputs, shape, dtype, constants, idx):
    if kind == "const":
        return constants[idx]
    name = attrs["name"]
    table = params if kind == "param" else inputs
    if name not in table:
        raise GraphError(f"missing {kind} value {name!r}")
    v = np.asarray(table[name], dtype=dtype)
    if v.shape != shape:
        raise GraphError(f"{kind} {name!r}: expected shape {shape}, got {v.shape}")
    return v


def _eval_nodes(g: Graph, params, inputs) -> list:
    vals: list = [None] * len(g.ops)
    for idx, (kind, ins, attrs) in enumerate(g.ops):
        if kind in ("input", "param", "const"):
            vals[idx] = _leaf_value(kind, attrs, params, inputs, g.shapes[idx], g.dtype, g.constants, idx)
            continue
        a = vals[ins[0]] if ins else None
        if kind == "add":
            vals[idx] = a + vals[ins[1]]
        elif kind == "sub":
            vals[idx] = a - vals[ins[1]]
        elif kind == "mul":
            vals[idx] = a * vals[ins[1]]
        elif kind == "max":
            vals[idx] = np.maximum(a, vals[ins[1]])
        elif kind == "min":
            vals[idx] = np.minimum(a, vals[ins[1]])
        elif kind == "square":
            vals[idx] = a * a
        elif kind == "sqrt_clamped":
            vals[idx] = np.sqrt(np.maximum(a, attrs["floor"]))
        elif kind == "abs":
            vals[idx] = np.abs(a)
        elif kind == "exp":
            vals[idx] = np.exp(a)
        elif kind == "log":
            vals[idx] = np.log(a)
        elif kind == "scale":
            vals[idx] = a * g.dtype.type(attrs["c"])
        elif kind == "shift":
            vals[idx] = a + g.dtype.type(attrs["c"])
        elif kind == "sum":
            vals[idx] = np.float64(np.sum(a, dtype=np.float64))
        elif kind == "mean":
            vals[idx] = np.float64(np.mean(a, dtype=np.float64))
        elif kind == "concat":
            vals[idx] = np.concatenate([vals[i] for i in ins], axis=0)
        elif kind == "slice":
            vals[idx] = a[attrs["start"]:attrs["stop"]]
        elif kind == "conv2d":
            w = vals[ins[1]]
            b = vals[ins[2]] if len(ins) == 3 else None
            vals[idx] = conv2d_array(a, w, b, attrs["stride"], attrs["padding"]).astype(g.dtype, copy=False)
        elif kind == "down2x":
            vals[idx] = downsample2x_array(a)
        elif kind == "bilinear":
            vals[idx] = bilinear_resize_array(a, attrs["h2"], attrs["w2"])
        elif kind == "context":
            vals[idx] = _context_forward(a)
        elif kind == "soft_quantize":
            if attrs["mode"] == "ste":
                vals[idx] = np.rint(a)
            else:
                vals[idx] = a + g.dtype.type(attrs["temperature"]) * vals[ins[1]]
        elif kind == "laplace_rate":
            bits, _ = laplace_bits(a, vals[ins[1]], vals[ins[2]])
            vals[idx] = bits.astype(g.dtype, copy=False)
        else:
            raise GraphError(f"unsupported operator {kind!r}")
    return vals


def _context_forward(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[1:]
    out = np.zeros((len(CONTEXT_OFFSETS), h, w), dtype=x.dtype)
    for t, (di, dj) in enumerate(CONTEXT_OFFSETS):
        i0, i1 = max(0, -di), min(h, h - di)
        j0, j1 = max(0, -dj), min(w, w - dj)
        if i0 < i1 and j0 < j1:
            out[t, i0:i1, j0:j1] = x[0, i0 + di:i1 + di, j0 + dj:j1 + dj]
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def forward_eval(g: Graph, params: dict, inputs: dict | None = None):
    """Evaluate the graph; returns (output value, fetched aux values)."""
    if g.output_idx is None:
        raise GraphError("graph has no output")
    vals = _eval_nodes(g, params, inputs or {})
    aux = {name: vals[i] for name, i in g.fetches.items()}
    return vals[g.output_idx], aux


def backward_grad(g: Graph, params: dict, inputs: dict | None = None):
    """Gradients of the scalar output for every parameter leaf.

    Returns (output value, {param name: gradient}, fetched aux values).
    """
    if g.output_idx is None:
        raise GraphError("graph has no output")
    if g.shapes[g.output_idx] != ():
        raise GraphError(f"output must be scalar, got shape {g.shapes[g.output_idx]}")
    vals = _eval_nodes(g, params, inputs or {})
    grads: list = [None] * len(g.ops)
    grads[g.output_idx] = np.float64(1.0)

    def acc(i, v):
        if grads[i] is None:
            grads[i] = v
        else:
            grads[i] = grads[i] + v

    for idx in range(len(g.ops) - 1, -1, -1):
        gout = grads[idx]
        if gout is None:
            continue
        kind, ins, attrs = g.ops[idx]
        if kind in ("input", "param", "const"):
            continue
        a = vals[ins[0]]
        if kind == "add":
            acc(ins[0], _unbroadcast(np.asarray(gout), a.shape))
            acc(ins[1], _unbroadcast(np.asarray(gout), vals[ins[1]].shape))
        elif kind == "sub":
            acc(ins[0], _unbroadcast(np.asarray(gout), a.shape))
            acc(ins[1], _unbroadcast(-np.asarray(gout), vals[ins[1]].shape))
        elif kind == "mul":
            b = vals[ins[1]]
            acc(ins[0], _unbroadcast(gout * b, a.shape))
            acc(ins[1], _unbroadcast(gout * a, b.shape))
        elif kind in ("max", "min"):
            b = vals[ins[1]]
            pick_a = (a >= b) if kind == "max" else (a <= b)
            acc(ins[0], _unbroadcast(gout * pick_a, a.shape))
            acc(ins[1], _unbroadcast(gout * (~pick_a), b.shape))
        elif kind == "square":
            acc(ins[0], gout * 2.0 * a)
        elif kind == "sqrt_clamped":
            floor = attrs["floor"]
            y = vals[idx]
            live = a > floor
            acc(ins[0], np.where(live, gout * 0.5 / np.maximum(y, 1e-30), 0.0).astype(a.dtype))
        elif kind == "abs":
            acc(ins[0], gout * np.sign(a))
        elif kind == "exp":
            acc(ins[0], gout * vals[idx])
        elif kind == "log":
            acc(ins[0], gout / a)
        elif kind == "scale":
            acc(ins[0], gout * attrs["c"])
        elif kind == "shift":
            acc(ins[0], np.asarray(gout))
        elif kind == "sum":
            acc(ins[0], np.full(a.shape, float(gout), dtype=a.dtype))
        elif kind == "mean":
            acc(ins[0], np.full(a.shape, float(gout) / max(a.size, 1), dtype=a.dtype))
        elif kind == "concat":
            ofs = 0
            for i, c in zip(ins, attrs["splits"]):
                acc(i, gout[ofs:ofs + c])
                ofs += c
        elif kind == "slice":
            gfull = np.zeros(a.shape, dtype=a.dtype)
            gfull[attrs["start"]:attrs["stop"]] = gout
            acc(ins[0], gfull)
        elif kind == "conv2d":
            w = vals[ins[1]]
            gx, gw, gb = _conv2d_backward(np.asarray(gout, dtype=a.dtype), a, w,
                                          attrs["stride"], attrs["padding"], len(ins) == 3)
            acc(ins[0], gx)
            acc(ins[1], gw)
            if gb is not None:
                acc(ins[2], gb)
        elif kind == "down2x":
            acc(ins[0], _down2x_adjoint(np.asarray(gout, dtype=a.dtype), a.shape))
        elif kind == "bilinear":
            rh = _resize_matrix(a.shape[1], attrs["h2"]).astype(a.dtype)
            rw = _resize_matrix(a.shape[2], attrs["w2"]).astype(a.dtype)
            acc(ins[0], np.einsum("ij,cjk,kl->cil", rh.T, np.asarray(gout, dtype=a.dtype), rw))
        elif kind == "context":
            gx = np.zeros(a.shape, dtype=a.dtype)
            h, wid = a.shape[1:]
            for t, (di, dj) in enumerate(CONTEXT_OFFSETS):
                i0, i1 = max(0, -di), min(h, h - di)
                j0, j1 = max(0, -dj), min(wid, wid - dj)
                if i0 < i1 and j0 < j1:
                    gx[0, i0 + di:i1 + di, j0 + dj:j1 + dj] += gout[t, i0:i1, j0:j1]
            acc(ins[0], gx)
        elif kind == "soft_quantize":
            acc(ins[0], np.asarray(gout))  # straight-through in both modes
        elif kind == "laplace_rate":
            gz, gmu, gb = _laplace_bits_grads(a, vals[ins[1]], vals[ins[2]], np.asarray(gout, dtype=np.float64))
            acc(ins[0], gz.astype(a.dtype))
            acc(ins[1], gmu.astype(a.dtype))
            acc(ins[2], gb.astype(a.dtype))
        else:
            raise GraphError(f"unsupported operator {kind!r}")

    out_grads = {}
    for name, i in g.params.items():
        gp = grads[i]
        out_grads[name] = np.zeros(g.shapes[i], dtype=g.dtype) if gp is None else np.asarray(gp)
    aux = {name: vals[i] for name, i in g.fetches.items()}
    return vals[g.output_idx], out_grads, aux


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParamSet,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One adaptive-moment update, in place. Deterministic."""
    state.t += 1
    t = state.t
    for name, p in params.tensors.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p -= (lr * params.lr_scale.get(name, 1.0)) * mhat / (np.sqrt(vhat) + eps)
