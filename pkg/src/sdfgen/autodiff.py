"""Dense float64 tensors with a reverse-mode tape.

Everything trainable in this project (3D/2D conv nets, attention blocks,
the quantizer straight-through path) runs on the primitives registered
here. Arrays are numpy float64 throughout; a Tape records primitive
applications and `backward` replays them in reverse. No GPU path.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes invalid for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


_tensor_ids = itertools.count()


class Tensor:
    """A dense multi-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_tensor_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar over apply_primitive; model code stays readable.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict


@dataclass
class Tape:
    """Topologically ordered record of primitive applications.

    A tape is confined to one thread; independent tapes may run
    concurrently. Use as a context manager around a forward pass.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.entries)


_tape_stack: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _tape_stack[-1] if _tape_stack else None


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

# forward: (*arrays, **attrs) -> (out_array, ctx)
# backward: (ctx, grad_out) -> tuple of per-input grads (None = no gradient)
_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def _register(name: str):
    def deco(fns):
        _PRIMITIVES[name] = fns()
        return fns
    return deco


def primitive_names() -> list[str]:
    return sorted(_PRIMITIVES)


def apply_primitive(op: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Run a registered primitive, validating output finiteness and recording on the active tape."""
    if op not in _PRIMITIVES:
        raise ShapeError(f"unknown primitive {op!r}")
    attrs = attrs or {}
    fwd, _ = _PRIMITIVES[op]
    out_data, ctx = fwd(*(t.data for t in inputs), **attrs)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"primitive {op!r} produced non-finite values")
    requires = op != "stop_gradient" and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if requires and tape is not None:
        tape.entries.append(TapeEntry(op, tuple(inputs), out, ctx))
    return out


class Gradients:
    """Gradient map produced by `backward`; zero for tracked tensors off the loss path."""

    def __init__(self, grads: dict[int, np.ndarray], tracked: dict[int, Tensor]):
        self._grads = grads
        self._tracked = tracked

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(t.id)
        if g is not None:
            return g
        if t.id in self._tracked or t.requires_grad:
            return np.zeros_like(t.data)
        raise KeyError(f"tensor {t.id} was not tracked on the tape")

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self._grads


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse the tape from a scalar loss, accumulating gradients once per entry."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    produced = {e.output.id for e in tape.entries}
    if loss.id not in produced:
        raise ShapeError("loss is not reachable from parameters on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    tracked: dict[int, Tensor] = {}
    for entry in tape.entries:
        for t in entry.inputs:
            if t.requires_grad:
                tracked[t.id] = t
    for entry in reversed(tape.entries):
        gout = grads.pop(entry.output.id, None)
        if gout is None:
            continue
        _, bwd = _PRIMITIVES[entry.op]
        gins = bwd(entry.ctx, gout)
        for t, gi in zip(entry.inputs, gins):
            if gi is None or not t.requires_grad:
                continue
            acc = grads.get(t.id)
            grads[t.id] = gi if acc is None else acc + gi
    return Gradients(grads, tracked)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central finite differences.

    `f` must be scalar-valued in `x`; error is |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x.requires_grad = True
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    analytic = backward(tape, y)[x].ravel()
    flat = x.data.ravel()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x).item()
        flat[i] = orig - step
        lo = f(x).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * step)
    return float(np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))))


# ---------------------------------------------------------------------------
# Elementwise / linear-algebra primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@_register("add")
def _add():
    def fwd(a, b):
        try:
            out = a + b
        except ValueError:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
        return out, {"sa": a.shape, "sb": b.shape}

    def bwd(ctx, g):
        return _unbroadcast(g, ctx["sa"]), _unbroadcast(g, ctx["sb"])

    return fwd, bwd


@_register("mul")
def _mul():
    def fwd(a, b):
        try:
            out = a * b
        except ValueError:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
        return out, {"a": a, "b": b}

    def bwd(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, bwd


@_register("scale")
def _scale():
    def fwd(a, c):
        return a * c, {"c": c}

    def bwd(ctx, g):
        return (g * ctx["c"],)

    return fwd, bwd


@_register("matmul")
def _matmul():
    def fwd(a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul requires rank >= 2, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} do not match")
        return np.matmul(a, b), {"a": a, "b": b}

    def bwd(ctx, g):
        a, b = ctx["a"], ctx["b"]
        ga = _unbroadcast(np.matmul(g, b.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return fwd, bwd


@_register("reshape")
def _reshape():
    def fwd(a, newshape):
        newshape = tuple(newshape)
        if newshape.count(-1) > 1:
            raise ShapeError(f"reshape: more than one -1 in {newshape}")
        if -1 in newshape:
            rest = int(np.prod([n for n in newshape if n != -1]))
            if rest == 0 or a.size % rest:
                raise ShapeError(f"reshape: cannot view {a.shape} as {newshape}")
            newshape = tuple(a.size // rest if n == -1 else n for n in newshape)
        if int(np.prod(newshape)) != a.size:
            raise ShapeError(f"reshape: cannot view {a.shape} as {newshape}")
        return a.reshape(newshape), {"s": a.shape}

    def bwd(ctx, g):
        return (g.reshape(ctx["s"]),)

    return fwd, bwd


@_register("transpose")
def _transpose():
    def fwd(a, axes):
        return np.ascontiguousarray(a.transpose(axes)), {"axes": axes}

    def bwd(ctx, g):
        return (g.transpose(np.argsort(ctx["axes"])),)

    return fwd, bwd


@_register("concat")
def _concat():
    def fwd(*arrays, axis):
        base = arrays[0].shape
        for a in arrays[1:]:
            if len(a.shape) != len(base) or any(
                i != axis and a.shape[i] != base[i] for i in range(len(base))
            ):
                raise ShapeError(f"concat: incompatible shapes {[a.shape for a in arrays]}")
        splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis), {"axis": axis, "splits": splits}

    def bwd(ctx, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, ctx["splits"], axis=ctx["axis"]))

    return fwd, bwd


@_register("sum")
def _sum():
    def fwd(a, axis=None, keepdims=False):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims)), {
            "shape": a.shape, "axis": axis, "keepdims": keepdims,
        }

    def bwd(ctx, g):
        axis, shape = ctx["axis"], ctx["shape"]
        if axis is not None and not ctx["keepdims"]:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return fwd, bwd


@_register("silu")
def _silu():
    def fwd(a):
        sig = 1.0 / (1.0 + np.exp(-a))
        return a * sig, {"a": a, "sig": sig}

    def bwd(ctx, g):
        a, sig = ctx["a"], ctx["sig"]
        return (g * sig * (1.0 + a * (1.0 - sig)),)

    return fwd, bwd


@_register("tanh")
def _tanh():
    def fwd(a):
        y = np.tanh(a)
        return y, {"y": y}

    def bwd(ctx, g):
        return (g * (1.0 - ctx["y"] ** 2),)

    return fwd, bwd


@_register("softmax")
def _softmax():
    def fwd(a, axis=-1):
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        return y, {"y": y, "axis": axis}

    def bwd(ctx, g):
        y, axis = ctx["y"], ctx["axis"]
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return fwd, bwd


@_register("stop_gradient")
def _stop_gradient():
    def fwd(a):
        return a.copy(), {}

    def bwd(ctx, g):  # pragma: no cover - never recorded
        return (None,)

    return fwd, bwd


@_register("straight_through")
def _straight_through():
    # Value of the second input, gradient routed to the first: the exact-arithmetic
    # equivalent of add(a, stop_gradient(b - a)) without float re-rounding of b.
    def fwd(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"straight_through: shapes {a.shape} and {b.shape} differ")
        return b.copy(), {}

    def bwd(ctx, g):
        return g, None

    return fwd, bwd


@_register("embedding_lookup")
def _embedding_lookup():
    def fwd(table, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(
                f"embedding_lookup: id out of range for table of {table.shape[0]} rows"
            )
        return table[ids], {"ids": ids, "k": table.shape}

    def bwd(ctx, g):
        dt = np.zeros(ctx["k"])
        np.add.at(dt, ctx["ids"], g)
        return (dt,)

    return fwd, bwd


@_register("mse")
def _mse():
    def fwd(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
        d = a - b
        return np.asarray(np.mean(d * d)), {"d": d}

    def bwd(ctx, g):
        d = ctx["d"]
        gd = g * 2.0 * d / d.size
        return gd, -gd

    return fwd, bwd


@_register("l1")
def _l1():
    def fwd(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"l1: shapes {a.shape} and {b.shape} differ")
        d = a - b
        return np.asarray(np.mean(np.abs(d))), {"d": d}

    def bwd(ctx, g):
        d = ctx["d"]
        gd = g * np.sign(d) / d.size
        return gd, -gd

    return fwd, bwd


# ---------------------------------------------------------------------------
# Convolutions (shared N-d core; 2D and 3D are thin wrappers)
# ---------------------------------------------------------------------------

def _conv_windows(xp: np.ndarray, kshape: tuple[int, ...], stride: int) -> np.ndarray:
    r = len(kshape)
    v = np.lib.stride_tricks.sliding_window_view(xp, kshape, axis=tuple(range(2, 2 + r)))
    if stride > 1:
        v = v[(slice(None), slice(None)) + tuple(slice(None, None, stride) for _ in range(r))]
    return v


def _im2col(x: np.ndarray, kshape: tuple[int, ...], stride: int, pad: int) -> np.ndarray:
    """(N, Ci, *S) -> column matrix (N * prod(O), Ci * prod(K)) plus the output extents."""
    r = x.ndim - 2
    if pad:
        x = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * r)
    win = _conv_windows(x, kshape, stride)  # (N, Ci, *O, *K)
    out_sp = win.shape[2:2 + r]
    perm = (0,) + tuple(range(2, 2 + r)) + (1,) + tuple(range(2 + r, 2 + 2 * r))
    ksize = x.shape[1] * int(np.prod(kshape))
    return np.ascontiguousarray(win.transpose(perm)).reshape(-1, ksize), out_sp


def _conv_core(x: np.ndarray, w: np.ndarray, stride: int, pad: int,
               want_cols: bool = False):
    """Cross-correlation of (N, Ci, *S) with (Co, Ci, *K) -> (N, Co, *O).

    Optionally also returns the im2col matrix for reuse by the weight gradient
    (the column build dominates runtime on this memory-bound target).
    """
    cols, out_sp = _im2col(x, w.shape[2:], stride, pad)
    y = cols @ w.reshape(w.shape[0], -1).T
    y = y.reshape((x.shape[0],) + tuple(out_sp) + (w.shape[0],))
    y = np.ascontiguousarray(np.moveaxis(y, -1, 1))
    return (y, cols) if want_cols else y


def _conv_weight_grad_cols(cols: np.ndarray, g: np.ndarray,
                           ci: int, kshape: tuple[int, ...]) -> np.ndarray:
    gmat = np.moveaxis(g, 1, -1).reshape(-1, g.shape[1])
    dw = gmat.T @ cols
    return dw.reshape((g.shape[1], ci) + kshape)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, stride: int, pad: int,
                      kshape: tuple[int, ...]) -> np.ndarray:
    cols, _ = _im2col(x, kshape, stride, pad)
    return _conv_weight_grad_cols(cols, g, x.shape[1], kshape)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
                     in_spatial: tuple[int, ...]) -> np.ndarray:
    """Adjoint of _conv_core in its input: (N, Co, *O) x (Co, Ci, *K) -> (N, Ci, *in_spatial)."""
    r = g.ndim - 2
    kshape = w.shape[2:]
    if any(pad > k - 1 for k in kshape):
        raise ShapeError(f"padding {pad} exceeds kernel bound for kernel {kshape}")
    extra = [d - ((o - 1) * stride + k - 2 * pad)
             for d, o, k in zip(in_spatial, g.shape[2:], kshape)]
    if any(e < 0 or e > stride - 1 for e in extra):
        raise ShapeError(
            f"output size {tuple(in_spatial)} incompatible with gradient {g.shape[2:]} "
            f"for kernel {kshape}, stride {stride}, pad {pad}"
        )
    if stride == 1:
        wt = np.ascontiguousarray(
            np.flip(w, axis=tuple(range(2, 2 + r))).transpose((1, 0) + tuple(range(2, 2 + r)))
        )
        gp = np.pad(g, [(0, 0), (0, 0)] + [(k - 1 - pad,) * 2 for k in kshape])
        y = _conv_core(gp, wt, 1, 0)
        assert y.shape[2:] == tuple(in_spatial)
        return y
    # Strided case: the dilated gradient is mostly zeros, so split the input
    # lattice into stride^r phase classes and run a dense small conv per phase.
    # For input index i the touching taps are k = (i + pad) % stride + stride*m:
    #   dx[i] = sum_m g[(i + pad - k)//stride] * w[k].
    out = np.zeros((g.shape[0], w.shape[1]) + tuple(in_spatial))
    for phase in np.ndindex(*(stride,) * r):
        taps, lpad, rpad = [], [], []
        ok = True
        for d in range(r):
            i0 = phase[d]
            kr = (i0 + pad) % stride
            m = (kshape[d] - kr + stride - 1) // stride
            if m == 0 or i0 >= in_spatial[d]:
                ok = False
                break
            base = (i0 + pad - kr) // stride
            rows = (in_spatial[d] - 1 - i0) // stride + 1
            taps.append(slice(kr, None, stride))
            lpad.append(m - 1 - base)
            rpad.append(rows + base - g.shape[2 + d])
        if not ok:
            continue
        # Negative pad means the phase window starts inside the gradient: trim.
        trims = tuple(slice(max(0, -l), g.shape[2 + d] - max(0, -rp))
                      for d, (l, rp) in enumerate(zip(lpad, rpad)))
        if any(t.stop - t.start <= 0 for t in trims):
            continue
        wp = w[(slice(None), slice(None)) + tuple(taps)]
        wp = np.ascontiguousarray(
            np.flip(wp, axis=tuple(range(2, 2 + r))).transpose((1, 0) + tuple(range(2, 2 + r)))
        )
        gp = np.pad(g[(slice(None), slice(None)) + trims],
                    [(0, 0), (0, 0)] + [(max(0, l), max(0, rp)) for l, rp in zip(lpad, rpad)])
        yp = _conv_core(gp, wp, 1, 0)
        sl = tuple(slice(phase[d], None, stride) for d in range(r))
        out[(slice(None), slice(None)) + sl] = yp
    return out


def _check_conv_shapes(x, w, rank, op):
    if x.ndim != rank + 2 or w.ndim != rank + 2:
        raise ShapeError(f"{op}: expected rank-{rank + 2} input/weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"{op}: input channels {x.shape[1]} != weight channels {w.shape[1]}")


def _make_conv(rank: int, op: str):
    def fwd(x, w, stride=1, pad=0):
        _check_conv_shapes(x, w, rank, op)
        out, cols = _conv_core(x, w, stride, pad, want_cols=True)
        return out, {"cols": cols, "ci": x.shape[1], "in_sp": x.shape[2:],
                     "w": w, "stride": stride, "pad": pad}

    def bwd(ctx, g):
        w, s, p = ctx["w"], ctx["stride"], ctx["pad"]
        dx = _conv_input_grad(g, w, s, p, ctx["in_sp"])
        dw = _conv_weight_grad_cols(ctx["cols"], g, ctx["ci"], w.shape[2:])
        return dx, dw

    return fwd, bwd


def _make_conv_transpose(rank: int, op: str):
    # Exact adjoint of the matching conv: weight keeps the conv layout (Co, Ci, *K),
    # input is (N, Co, *S), output is (N, Ci, *output_size).
    def fwd(x, w, stride=1, pad=0, output_size=None):
        if x.ndim != rank + 2 or w.ndim != rank + 2:
            raise ShapeError(f"{op}: expected rank-{rank + 2} input/weight, got {x.shape}, {w.shape}")
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"{op}: input channels {x.shape[1]} != weight out-channels {w.shape[0]}")
        if output_size is None:
            output_size = tuple((d - 1) * stride + k - 2 * pad
                                for d, k in zip(x.shape[2:], w.shape[2:]))
        out = _conv_input_grad(x, w, stride, pad, tuple(output_size))
        return out, {"x": x, "w": w, "stride": stride, "pad": pad}

    def bwd(ctx, g):
        x, w, s, p = ctx["x"], ctx["w"], ctx["stride"], ctx["pad"]
        # The cotangent plays the conv-input role for both grads; share its columns.
        dx, cols = _conv_core(g, w, s, p, want_cols=True)
        if dx.shape != x.shape:
            raise ShapeError(f"{ctx['x'].shape} vs {dx.shape}")  # pragma: no cover
        dw = _conv_weight_grad_cols(cols, x, g.shape[1], w.shape[2:])
        return dx, dw

    return fwd, bwd


_register("conv2d")(lambda: _make_conv(2, "conv2d"))
_register("conv3d")(lambda: _make_conv(3, "conv3d"))
_register("conv_transpose2d")(lambda: _make_conv_transpose(2, "conv_transpose2d"))
_register("conv_transpose3d")(lambda: _make_conv_transpose(3, "conv_transpose3d"))


# ---------------------------------------------------------------------------
# Normalization / attention
# ---------------------------------------------------------------------------

@_register("group_norm")
def _group_norm():
    def fwd(x, gamma, beta, groups, eps=1e-5):
        n, c = x.shape[:2]
        if c % groups:
            raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"group_norm: affine params must have shape ({c},)")
        xg = x.reshape(n, groups, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xh = (xg - mu) * inv
        cshape = (1, c) + (1,) * (x.ndim - 2)
        y = xh.reshape(x.shape) * gamma.reshape(cshape) + beta.reshape(cshape)
        return y, {"xh": xh, "inv": inv, "gamma": gamma, "shape": x.shape, "groups": groups}

    def bwd(ctx, g):
        shape, groups = ctx["shape"], ctx["groups"]
        n, c = shape[:2]
        cshape = (1, c) + (1,) * (len(shape) - 2)
        xh, inv, gamma = ctx["xh"], ctx["inv"], ctx["gamma"]
        xh_full = xh.reshape(shape)
        red = (0,) + tuple(range(2, len(shape)))
        dgamma = (g * xh_full).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxh = (g * gamma.reshape(cshape)).reshape(n, groups, -1)
        dx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                    - xh * (dxh * xh).mean(axis=2, keepdims=True))
        return dx.reshape(shape), dgamma, dbeta

    return fwd, bwd


@_register("scaled_dot_attention")
def _scaled_dot_attention():
    def fwd(q, k, v):
        if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
            raise ShapeError(f"attention: batch dims differ: {q.shape}, {k.shape}, {v.shape}")
        if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
            raise ShapeError(f"attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
        scale = 1.0 / np.sqrt(q.shape[-1])
        s = np.matmul(q, k.swapaxes(-1, -2)) * scale
        s -= s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=-1, keepdims=True)
        o = np.matmul(a, v)
        return o, {"q": q, "k": k, "v": v, "a": a, "scale": scale}

    def bwd(ctx, g):
        q, k, v, a, scale = ctx["q"], ctx["k"], ctx["v"], ctx["a"], ctx["scale"]
        dv = np.matmul(a.swapaxes(-1, -2), g)
        da = np.matmul(g, v.swapaxes(-1, -2))
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
        dq = np.matmul(ds, k) * scale
        dk = np.matmul(ds.swapaxes(-1, -2), q) * scale
        return dq, dk, dv

    return fwd, bwd


@_register("sparse_mix")
def _sparse_mix():
    # y[d, c] = sum over entries e with dst[e] == d of w[e] * x[c, src[e]].
    # Precomputed sparse maps of this form drive the volume renderer, where x
    # is the flattened color grid and entries fold compositing weights with
    # trilinear corner weights.
    def fwd(x, src, dst, w, n_dst):
        c = x.shape[0]
        out = np.empty((n_dst, c))
        for ch in range(c):
            out[:, ch] = np.bincount(dst, weights=w * x[ch, src], minlength=n_dst)
        return out, {"src": src, "dst": dst, "w": w, "xshape": x.shape}

    def bwd(ctx, g):
        src, dst, w = ctx["src"], ctx["dst"], ctx["w"]
        c, nvox = ctx["xshape"]
        dx = np.empty((c, nvox))
        for ch in range(c):
            dx[ch] = np.bincount(src, weights=w * g[dst, ch], minlength=nvox)
        return (dx,)

    return fwd, bwd


@_register("trilinear_sample")
def _trilinear_sample():
    # coords are continuous voxel indices into a (C, D0, D1, D2) grid, border-clamped.
    def fwd(grid, coords):
        c, d0, d1, d2 = grid.shape
        pts = np.asarray(coords, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"trilinear_sample: coords must be (n, 3), got {pts.shape}")
        dims = np.array([d0, d1, d2], dtype=np.float64)
        pts = np.clip(pts, 0.0, dims - 1.0)
        i0 = np.floor(pts).astype(np.int64)
        i0 = np.minimum(i0, (dims - 2).astype(np.int64).clip(min=0))
        f = pts - i0
        i1 = np.minimum(i0 + 1, (dims - 1).astype(np.int64))
        corners = []
        out = np.zeros((pts.shape[0], c))
        gflat = grid.reshape(c, -1)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    ix = i1[:, 0] if dx else i0[:, 0]
                    iy = i1[:, 1] if dy else i0[:, 1]
                    iz = i1[:, 2] if dz else i0[:, 2]
                    w = ((f[:, 0] if dx else 1 - f[:, 0])
                         * (f[:, 1] if dy else 1 - f[:, 1])
                         * (f[:, 2] if dz else 1 - f[:, 2]))
                    flat = (ix * d1 + iy) * d2 + iz
                    out += w[:, None] * gflat[:, flat].T
                    corners.append((flat, w))
        return out, {"corners": corners, "gshape": grid.shape}

    def bwd(ctx, g):
        c, d0, d1, d2 = ctx["gshape"]
        nvox = d0 * d1 * d2
        dgrid = np.zeros((c, nvox))
        for flat, w in ctx["corners"]:
            wg = g * w[:, None]  # (n, c)
            for ch in range(c):
                dgrid[ch] += np.bincount(flat, weights=wg[:, ch], minlength=nvox)
        return dgrid.reshape(ctx["gshape"]), None

    return fwd, bwd


# ---------------------------------------------------------------------------
# Functional wrappers
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return apply_primitive("scale", (a,), {"c": float(c)})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", (a, b))


def reshape(a: Tensor, newshape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", (a,), {"newshape": tuple(newshape)})


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    return apply_primitive("transpose", (a,), {"axes": tuple(axes)})


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    return apply_primitive("concat", tuple(tensors), {"axis": axis})


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", (a,), {"axis": axis, "keepdims": keepdims})


def silu(a: Tensor) -> Tensor:
    return apply_primitive("silu", (a,))


def tanh(a: Tensor) -> Tensor:
    return apply_primitive("tanh", (a,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", (a,), {"axis": axis})


def stop_gradient(a: Tensor) -> Tensor:
    return apply_primitive("stop_gradient", (a,))


def straight_through(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("straight_through", (a, b))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    return apply_primitive("embedding_lookup", (table,), {"ids": np.asarray(ids, dtype=np.int64)})


def mse(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mse", (a, b))


def l1(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("l1", (a, b))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return apply_primitive("conv2d", (x, w), {"stride": stride, "pad": pad})


def conv3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return apply_primitive("conv3d", (x, w), {"stride": stride, "pad": pad})


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0,
                     output_size: Optional[tuple[int, ...]] = None) -> Tensor:
    return apply_primitive("conv_transpose2d", (x, w),
                           {"stride": stride, "pad": pad, "output_size": output_size})


def conv_transpose3d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0,
                     output_size: Optional[tuple[int, ...]] = None) -> Tensor:
    return apply_primitive("conv_transpose3d", (x, w),
                           {"stride": stride, "pad": pad, "output_size": output_size})


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    return apply_primitive("group_norm", (x, gamma, beta), {"groups": groups, "eps": eps})


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return apply_primitive("scaled_dot_attention", (q, k, v))


def trilinear_sample(grid: Tensor, coords: np.ndarray) -> Tensor:
    return apply_primitive("trilinear_sample", (grid,), {"coords": coords})


def sparse_mix(x: Tensor, src: np.ndarray, dst: np.ndarray, w: np.ndarray,
               n_dst: int) -> Tensor:
    return apply_primitive("sparse_mix", (x,),
                           {"src": src, "dst": dst, "w": w, "n_dst": n_dst})


# ---------------------------------------------------------------------------
# Parameters, Adam, checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SDFTNSR1"


class ParamStore:
    """Named parameter tensors with per-parameter Adam moment state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, data) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def n_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_digest(self) -> int:
        """Cheap change detector over all parameter bytes (used by frozen-critic checks)."""
        import zlib
        crc = 0
        for name in self.params:
            crc = zlib.crc32(self.params[name].data.tobytes(), crc)
        return crc

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(self.params)))
            for name, t in self.params.items():
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<I", t.ndim))
                f.write(struct.pack(f"<{t.ndim}I", *t.shape))
                f.write(t.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
            (count,) = struct.unpack("<I", f.read(4))
            for _ in range(count):
                (nlen,) = struct.unpack("<I", f.read(4))
                name = f.read(nlen).decode("utf-8")
                (rank,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
                n = int(np.prod(shape)) if rank else 1
                data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
                store.add(name, data.copy())
        return store


def adam_step(store: ParamStore, grads: Gradients, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Standard bias-corrected Adam update over every parameter in the store."""
    updates = {}
    for name, p in store.params.items():
        try:
            g = grads[p]
        except KeyError:
            raise KeyError(f"missing gradient for parameter {name!r}")
        updates[name] = g
    store.step += 1
    t = store.step
    for name, g in updates.items():
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        store.params[name].data -= lr * mhat / (np.sqrt(vhat) + eps)
    return store
