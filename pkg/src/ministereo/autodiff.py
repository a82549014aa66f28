"""Minimal reverse-mode differentiation over the tensor kernels.

A :class:`Tape` records every op applied to :class:`Var` values while active.
``backward`` replays the tape in reverse creation order (which is a valid
reverse-topological order for an eagerly built graph) and accumulates
gradients with a fixed, deterministic ordering. Parameters are lifted through
a :class:`ParamView`, so two branches reading the same name share one node --
that is what makes the weight-sharing feature extractor literal.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as K
from .tensor import DTYPE, ShapeError

GradStore = dict[str, np.ndarray]


class Var:
    """A node value: a float32 ndarray plus an optional parameter name."""

    __slots__ = ("value", "name")

    def __init__(self, value, name: str | None = None):
        v = np.asarray(value)
        if v.dtype != DTYPE:
            v = v.astype(DTYPE)
        self.value = v
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.value.shape}{tag})"


@dataclass
class _Node:
    var: Var
    parents: tuple[Var, ...]
    vjp: Callable[[np.ndarray], tuple]
    op: str


class Tape:
    """Recorded op sequence plus the parameters touched while recording."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Var] = {}

    def watch(self, name: str, var: Var) -> None:
        self.params[name] = var

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE = self
        K._TAPE_ACTIVE = True
        return self

    def __exit__(self, *exc) -> bool:
        global _ACTIVE
        _ACTIVE = None
        K._TAPE_ACTIVE = False
        return False


_ACTIVE: Tape | None = None


def lift(value, name: str | None = None) -> Var:
    """Wrap a constant (or reuse an existing Var)."""
    if isinstance(value, Var):
        return value
    return Var(value, name)


def custom(value: np.ndarray, parents: tuple, vjp, op: str) -> Var:
    """Create a tracked Var from an already-computed forward value.

    ``vjp(grad_out)`` must return one gradient array (or None) per parent.
    This is the extension point network-level ops use for their backward
    rules.
    """
    out = Var(value)
    if _ACTIVE is not None:
        _ACTIVE.nodes.append(_Node(out, tuple(parents), vjp, op))
    return out


class ParamView:
    """Lazily lifts named parameters; one shared Var per name."""

    def __init__(self, store: Mapping[str, np.ndarray]):
        self._store = store
        self._cache: dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        v = self._cache.get(name)
        if v is None:
            v = Var(self._store[name], name=name)
            self._cache[name] = v
            if _ACTIVE is not None:
                _ACTIVE.watch(name, v)
        return v

    def __contains__(self, name: str) -> bool:
        return name in self._store


def record(fn: Callable[..., Var], *args, **kwargs) -> tuple[Var, Tape]:
    """Run ``fn`` under a fresh tape; the output matches the untaped run bit-exactly."""
    tape = Tape()
    with tape:
        out = fn(*args, **kwargs)
    if not isinstance(out, Var):
        raise TypeError("recorded computation must return a Var")
    return out, tape


def backward(tape: Tape, output: Var, seed=None) -> GradStore:
    """Chain rule in reverse creation order; returns name -> gradient.

    Every parameter watched by the tape gets an entry; parameters the output
    does not depend on get exact zeros.
    """
    if seed is None:
        seed = np.ones_like(output.value)
    seed = np.asarray(seed, dtype=DTYPE)
    if seed.shape != output.value.shape:
        raise ShapeError(
            f"seed gradient shape {seed.shape} != output shape {output.value.shape}")
    grads: dict[int, np.ndarray] = {id(output): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.var), None)
        if g is None:
            continue
        parts = node.vjp(g)
        if len(parts) != len(node.parents):
            raise RuntimeError(f"{node.op}: vjp arity mismatch")
        for parent, pg in zip(node.parents, parts):
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if pg.shape != parent.value.shape:
                raise RuntimeError(
                    f"{node.op}: gradient shape {pg.shape} != value shape {parent.value.shape}")
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    out: GradStore = {}
    for name, var in tape.params.items():
        g = grads.get(id(var))
        out[name] = np.zeros_like(var.value) if g is None else g
    return out


# --- broadcasting helpers ---------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# --- elementwise / structural ops -------------------------------------------------

def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    out = a.value + b.value
    if not np.isfinite(out).all():
        raise K.NonFiniteError("add produced non-finite values")

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return custom(out, (a, b), vjp, "add")


def sub(a, b) -> Var:
    a, b = lift(a), lift(b)
    out = a.value - b.value
    if not np.isfinite(out).all():
        raise K.NonFiniteError("sub produced non-finite values")

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return custom(out, (a, b), vjp, "sub")


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    out = av * bv
    if not np.isfinite(out).all():
        raise K.NonFiniteError("mul produced non-finite values")

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return custom(out, (a, b), vjp, "mul")


def reshape(x, shape) -> Var:
    x = lift(x)
    old = x.value.shape
    out = x.value.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return custom(out, (x,), vjp, "reshape")


def concatenate(vars_, axis: int = 0) -> Var:
    vs = [lift(v) for v in vars_]
    sizes = [v.value.shape[axis] for v in vs]
    out = np.concatenate([v.value for v in vs], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(vs)))

    return custom(out, tuple(vs), vjp, "concatenate")


def sum_axis(x, axis: int, keepdims: bool = False) -> Var:
    x = lift(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)
    shape = x.value.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return custom(out, (x,), vjp, "sum_axis")


def mean_all(x) -> Var:
    x = lift(x)
    n = x.value.size
    out = np.asarray(x.value.mean(), dtype=DTYPE)

    def vjp(g):
        return (np.full(x.value.shape, float(g) / n, dtype=DTYPE),)

    return custom(out, (x,), vjp, "mean_all")


def sum_all(x) -> Var:
    x = lift(x)
    out = np.asarray(x.value.sum(), dtype=DTYPE)

    def vjp(g):
        return (np.full(x.value.shape, float(g), dtype=DTYPE),)

    return custom(out, (x,), vjp, "sum_all")


# --- kernel wrappers ---------------------------------------------------------------

def conv2d(x, w, bias=None, stride=(1, 1), padding=(0, 0), groups: int = 1,
           label: str | None = None) -> Var:
    x, w = lift(x), lift(w)
    b = lift(bias) if bias is not None else None
    with K._raw_region():
        out = K.conv2d(x.value, w.value, None if b is None else b.value,
                       stride, padding, groups, label)
    xv, wv = x.value, w.value

    def vjp(g):
        gx, gw, gb = K._conv2d_vjp(xv, wv, g, stride, padding, groups, b is not None)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return custom(out, parents, vjp, "conv2d")


def depthwise_conv2d(x, w, bias=None, stride=(1, 1), padding=(0, 0),
                     label: str | None = None) -> Var:
    x, w = lift(x), lift(w)
    b = lift(bias) if bias is not None else None
    with K._raw_region():
        out = K.depthwise_conv2d(x.value, w.value, None if b is None else b.value,
                                 stride, padding, label)
    xv, wv = x.value, w.value

    def vjp(g):
        gx, gw, gb = K._depthwise_vjp(xv, wv, g, stride, padding, b is not None)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return custom(out, parents, vjp, "depthwise_conv2d")


def conv3d(x, w, bias=None, stride=(1, 1, 1), padding=(0, 0, 0),
           label: str | None = None) -> Var:
    x, w = lift(x), lift(w)
    b = lift(bias) if bias is not None else None
    with K._raw_region():
        out = K.conv3d(x.value, w.value, None if b is None else b.value,
                       stride, padding, label)
    xv, wv = x.value, w.value

    def vjp(g):
        gx, gw, gb = K._conv3d_vjp(xv, wv, g, stride, padding, b is not None)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return custom(out, parents, vjp, "conv3d")


def normalize(x, kind: str, scale, shift, mean=None, var=None,
              eps: float = K.NORM_EPS) -> Var:
    x, scale, shift = lift(x), lift(scale), lift(shift)
    with K._raw_region():
        out = K.normalize(x.value, kind, scale.value, shift.value, mean, var, eps)
    xv, sv = x.value, scale.value
    c = xv.shape[0]
    bshape = (c,) + (1,) * (xv.ndim - 1)
    red = tuple(range(1, xv.ndim))

    if kind == "batch-norm-inference":
        inv = (1.0 / np.sqrt(np.asarray(var, dtype=DTYPE) + DTYPE(eps))).reshape(bshape)
        xhat = (xv - np.asarray(mean, dtype=DTYPE).reshape(bshape)) * inv

        def vjp(g):
            gx = g * (sv.reshape(bshape) * inv)
            return gx.astype(DTYPE), (g * xhat).sum(axis=red), g.sum(axis=red)
    else:  # layer-norm over the channel axis
        mu = xv.mean(axis=0, keepdims=True)
        v = np.square(xv - mu).mean(axis=0, keepdims=True)
        inv = 1.0 / np.sqrt(v + DTYPE(eps))
        xhat = (xv - mu) * inv

        def vjp(g):
            gs = g * sv.reshape(bshape)
            m1 = gs.mean(axis=0, keepdims=True)
            m2 = (gs * xhat).mean(axis=0, keepdims=True)
            gx = (gs - m1 - xhat * m2) * inv
            return gx.astype(DTYPE), (g * xhat).sum(axis=red), g.sum(axis=red)

    return custom(out, (x, scale, shift), vjp, f"normalize[{kind}]")


def relu6(x) -> Var:
    x = lift(x)
    with K._raw_region():
        out = K.relu6(x.value)
    gate = ((x.value > 0) & (x.value < 6)).astype(DTYPE)

    def vjp(g):
        return (g * gate,)

    return custom(out, (x,), vjp, "relu6")


def gelu(x) -> Var:
    x = lift(x)
    with K._raw_region():
        out = K.gelu(x.value)
    xv = x.value.astype(np.float64)
    phi = np.exp(-0.5 * xv * xv) / np.sqrt(2.0 * np.pi)
    from scipy.special import erf as _erf
    cdf = 0.5 * (1.0 + _erf(xv * np.sqrt(0.5)))
    deriv = (cdf + xv * phi).astype(DTYPE)

    def vjp(g):
        return (g * deriv,)

    return custom(out, (x,), vjp, "gelu")


def activation(x, kind: str) -> Var:
    if kind == "relu6":
        return relu6(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"activation: unknown kind {kind!r}")


def bilinear_resize(x, out_h: int, out_w: int, align_corners: bool = False) -> Var:
    x = lift(x)
    with K._raw_region():
        out = K.bilinear_resize(x.value, out_h, out_w, align_corners)
    in_shape = x.value.shape

    def vjp(g):
        return (K._bilinear_resize_vjp(in_shape, g, align_corners),)

    return custom(out, (x,), vjp, "bilinear_resize")


def softmax_axis(x, axis: int) -> Var:
    x = lift(x)
    with K._raw_region():
        out = K.softmax_axis(x.value, axis)
    y = out

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((y * (g - dot)).astype(DTYPE),)

    return custom(out, (x,), vjp, "softmax_axis")


def upsample_nearest3d(x, factor: int = 2) -> Var:
    """[C,D,H,W] -> [C, f*D, f*H, f*W] by repetition; backward sum-pools."""
    x = lift(x)
    v = x.value
    if v.ndim != 4:
        raise ShapeError(f"upsample_nearest3d: expected [C,D,H,W], got {v.shape}")
    f = int(factor)
    out = v.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3)
    c, d, h, w = v.shape

    def vjp(g):
        return (g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6)).astype(DTYPE),)

    return custom(out, (x,), vjp, "upsample_nearest3d")


def neighbors3x3(x) -> Var:
    """[H,W] -> [9,H,W] of 3x3 neighborhoods, edge-replicated at borders."""
    x = lift(x)
    v = x.value
    if v.ndim != 2:
        raise ShapeError(f"neighbors3x3: expected [H,W], got {v.shape}")
    h, w = v.shape
    xp = np.pad(v, 1, mode="edge")
    out = np.stack([xp[i:i + h, j:j + w] for i in range(3) for j in range(3)])

    def vjp(g):
        gp = np.zeros((h + 2, w + 2), dtype=DTYPE)
        k = 0
        for i in range(3):
            for j in range(3):
                gp[i:i + h, j:j + w] += g[k]
                k += 1
        gx = gp[1:-1, 1:-1].copy()
        gx[0, :] += gp[0, 1:-1]
        gx[-1, :] += gp[-1, 1:-1]
        gx[:, 0] += gp[1:-1, 0]
        gx[:, -1] += gp[1:-1, -1]
        gx[0, 0] += gp[0, 0]
        gx[0, -1] += gp[0, -1]
        gx[-1, 0] += gp[-1, 0]
        gx[-1, -1] += gp[-1, -1]
        return (gx,)

    return custom(out, (x,), vjp, "neighbors3x3")


def depth_to_space4(x) -> Var:
    """[16,H,W] -> [4H,4W]; channel r*4+c lands at sub-pixel (r, c)."""
    x = lift(x)
    v = x.value
    if v.ndim != 3 or v.shape[0] != 16:
        raise ShapeError(f"depth_to_space4: expected [16,H,W], got {v.shape}")
    _, h, w = v.shape
    out = v.reshape(4, 4, h, w).transpose(2, 0, 3, 1).reshape(4 * h, 4 * w)

    def vjp(g):
        return (g.reshape(h, 4, w, 4).transpose(1, 3, 0, 2).reshape(16, h, w).copy(),)

    return custom(np.ascontiguousarray(out), (x,), vjp, "depth_to_space4")


# --- finite differences ----------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_coordinate: tuple[str, int]
    n_coords: int
    analytic_at_worst: float
    numeric_at_worst: float

    def __str__(self):
        name, idx = self.worst_coordinate
        return (f"max rel error {self.max_rel_error:.3e} over {self.n_coords} coords; "
                f"worst {name}[{idx}] analytic={self.analytic_at_worst:.6g} "
                f"numeric={self.numeric_at_worst:.6g}")


def finite_diff_check(fn: Callable[[ParamView], Var], params: Mapping[str, np.ndarray],
                      eps: float = 1e-3, n_coords: int | None = None,
                      seed: int = 0) -> FiniteDiffReport:
    """Compare tape gradients of a scalar function against central differences.

    ``fn`` receives a ParamView and must return a scalar Var. The relative
    error is |analytic - numeric| / max(1, |numeric|), maximized over the
    sampled coordinates.
    """
    out, tape = record(fn, ParamView(params))
    if out.value.size != 1:
        raise ShapeError("finite_diff_check: function must be scalar-valued")
    grads = backward(tape, out, np.ones_like(out.value))

    coords: list[tuple[str, int]] = []
    for name in sorted(grads):
        coords.extend((name, i) for i in range(params[name].size))
    if n_coords is not None and n_coords < len(coords):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        picked = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    def eval_at(mod: Mapping[str, np.ndarray]) -> float:
        return float(fn(ParamView(mod)).value)

    worst = (0.0, ("", -1), 0.0, 0.0)
    base = dict(params)
    for name, idx in coords:
        orig = base[name]
        flat = orig.reshape(-1)
        wplus = orig.copy().reshape(-1)
        wminus = orig.copy().reshape(-1)
        wplus[idx] = flat[idx] + DTYPE(eps)
        wminus[idx] = flat[idx] - DTYPE(eps)
        h = float(wplus[idx]) - float(wminus[idx])
        base[name] = wplus.reshape(orig.shape)
        fp = eval_at(base)
        base[name] = wminus.reshape(orig.shape)
        fm = eval_at(base)
        base[name] = orig
        numeric = (fp - fm) / h
        analytic = float(grads[name].reshape(-1)[idx])
        rel = abs(analytic - numeric) / max(1.0, abs(numeric))
        if rel >= worst[0]:
            worst = (rel, (name, idx), analytic, numeric)
    return FiniteDiffReport(worst[0], worst[1], len(coords), worst[2], worst[3])
