"""Dense float32 tensor kernels with multiply-accumulate accounting.

Values are plain C-contiguous numpy ``float32`` arrays, channels first, last
axis fastest. Every kernel validates shapes, raises on non-finite output, and
(while a :class:`MacsLedger` is active) records its multiply-accumulate count.

MACs convention: one MAC per multiply-accumulate inside a convolution,
correlation, soft-argmax expectation, or convex combination. Bias adds,
normalizations, activations, resizing, and softmax normalization cost zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import erf

DTYPE = np.float32
NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Kernel arguments have incompatible shapes."""


class NonFiniteError(ArithmeticError):
    """A kernel produced NaN or Inf, which the tensor contract forbids."""


class UntrackedKernelError(RuntimeError):
    """A raw kernel was invoked while a gradient tape was recording."""


# --- gradient-tape guard -----------------------------------------------------
# autodiff flips _TAPE_ACTIVE while recording and enters _raw_region around the
# kernel calls it tracks; a bare kernel call inside a recording is a bug.

_TAPE_ACTIVE = False
_RAW_DEPTH = 0


class _raw_region:
    def __enter__(self):
        global _RAW_DEPTH
        _RAW_DEPTH += 1
        return self

    def __exit__(self, *exc):
        global _RAW_DEPTH
        _RAW_DEPTH -= 1
        return False


def _guard(op: str) -> None:
    if _TAPE_ACTIVE and _RAW_DEPTH == 0:
        raise UntrackedKernelError(
            f"{op} called directly while a gradient tape is recording; "
            "use the autodiff wrappers so the backward rule is captured"
        )


# --- MACs ledger --------------------------------------------------------------

@dataclass
class MacsLedger:
    """Ordered (op-name, macs) entries for one profiling pass."""

    entries: list[tuple[str, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(m for _, m in self.entries)

    def add(self, name: str, macs: int) -> None:
        self.entries.append((name, int(macs)))

    def by_group(self) -> dict[str, int]:
        """Totals grouped by the first dot-separated segment of the op name."""
        out: dict[str, int] = {}
        for name, macs in self.entries:
            key = name.split(".", 1)[0]
            out[key] = out.get(key, 0) + macs
        return out

    def __enter__(self) -> "MacsLedger":
        _LEDGERS.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _LEDGERS.remove(self)
        return False


_LEDGERS: list[MacsLedger] = []


def _bump(name: str, macs: int) -> None:
    if _LEDGERS:
        _LEDGERS[-1].add(name, macs)


# --- helpers ------------------------------------------------------------------

def _as_f32(x, ndim: int, what: str) -> np.ndarray:
    a = np.asarray(x)
    if a.ndim != ndim:
        raise ShapeError(f"{what}: expected {ndim}-d array, got shape {a.shape}")
    if a.dtype != DTYPE:
        a = a.astype(DTYPE)
    return np.ascontiguousarray(a)


def _finished(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    a, b, c = v
    return (int(a), int(b), int(c))


def _out_extent(n: int, k: int, s: int, p: int, what: str) -> int:
    if n + 2 * p < k:
        raise ShapeError(f"{what}: window {k} larger than padded extent {n + 2 * p}")
    return (n + 2 * p - k) // s + 1


def _im2col2d(x: np.ndarray, kh: int, kw: int, sh: int, sw: int,
              ph: int, pw: int) -> tuple[np.ndarray, int, int]:
    """Return patches [C, kh*kw, oh*ow] (copy) for a [C,H,W] input."""
    c, h, w = x.shape
    oh = _out_extent(h, kh, sh, ph, "conv2d")
    ow = _out_extent(w, kw, sw, pw, "conv2d")
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    s0, s1, s2 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (c, kh, kw, oh, ow), (s0, s1, s2, s1 * sh, s2 * sw))
    return view.reshape(c, kh * kw, oh * ow), oh, ow


def _col2im2d(cols: np.ndarray, in_shape, kh, kw, sh, sw, ph, pw, oh, ow) -> np.ndarray:
    """Adjoint of _im2col2d: scatter [C, kh*kw, oh*ow] back to [C,H,W]."""
    c, h, w = in_shape
    buf = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=DTYPE)
    g = cols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            buf[:, i:i + sh * oh:sh, j:j + sw * ow:sw] += g[:, i, j]
    return buf[:, ph:ph + h, pw:pw + w]


# --- convolutions ---------------------------------------------------------------

def conv2d(x, w, bias=None, stride=(1, 1), padding=(0, 0), groups: int = 1,
           label: str | None = None) -> np.ndarray:
    """Cross-correlation of [C_in,H,W] with [C_out,C_in/groups,kh,kw], zero padding."""
    _guard("conv2d")
    x = _as_f32(x, 3, "conv2d input")
    w = _as_f32(w, 4, "conv2d kernel")
    cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"conv2d: groups={groups} incompatible with C_in={cin}, C_out={cout}")
    if cpg != cin // groups:
        raise ShapeError(f"conv2d: kernel expects {cpg} channels/group, input has {cin // groups}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)

    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0 and groups == 1:
        # 1x1 fast path: plain matmul over flattened pixels
        out = (w.reshape(cout, cin) @ x.reshape(cin, h * wd)).reshape(cout, h, wd)
        oh, ow = h, wd
    else:
        cols, oh, ow = _im2col2d(x, kh, kw, sh, sw, ph, pw)
        if groups == 1:
            out = (w.reshape(cout, cpg * kh * kw) @ cols.reshape(cin * kh * kw, oh * ow))
        else:
            cg = cols.reshape(groups, cpg * kh * kw, oh * ow)
            wg = w.reshape(groups, cout // groups, cpg * kh * kw)
            out = np.matmul(wg, cg)
        out = out.reshape(cout, oh, ow)
    if bias is not None:
        b = _as_f32(bias, 1, "conv2d bias")
        if b.shape[0] != cout:
            raise ShapeError(f"conv2d: bias has {b.shape[0]} channels, kernel {cout}")
        out = out + b[:, None, None]
    _bump(label or "conv2d", cout * cpg * kh * kw * oh * ow)
    return _finished(np.ascontiguousarray(out), "conv2d")


def _conv2d_vjp(x, w, go, stride, padding, groups, with_bias):
    """Gradients of conv2d wrt (input, kernel, bias)."""
    cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    _, oh, ow = go.shape
    gof = go.reshape(cout, oh * ow).astype(DTYPE)
    if groups == 1:
        cols, _, _ = _im2col2d(x, kh, kw, sh, sw, ph, pw)
        colsf = cols.reshape(cin * kh * kw, oh * ow)
        gw = (gof @ colsf.T).reshape(w.shape)
        gcols = w.reshape(cout, cpg * kh * kw).T @ gof
        gx = _col2im2d(gcols.reshape(cin, kh * kw, oh * ow), x.shape, kh, kw, sh, sw, ph, pw, oh, ow)
    else:
        cols, _, _ = _im2col2d(x, kh, kw, sh, sw, ph, pw)
        cg = cols.reshape(groups, cpg * kh * kw, oh * ow)
        gg = gof.reshape(groups, cout // groups, oh * ow)
        gw = np.matmul(gg, cg.transpose(0, 2, 1)).reshape(w.shape)
        wg = w.reshape(groups, cout // groups, cpg * kh * kw)
        gcols = np.matmul(wg.transpose(0, 2, 1), gg)
        gx = _col2im2d(gcols.reshape(cin, kh * kw, oh * ow), x.shape, kh, kw, sh, sw, ph, pw, oh, ow)
    gb = gof.sum(axis=1) if with_bias else None
    return gx.astype(DTYPE), gw.astype(DTYPE), gb


def depthwise_conv2d(x, w, bias=None, stride=(1, 1), padding=(0, 0),
                     label: str | None = None) -> np.ndarray:
    """Per-channel 2D cross-correlation: input [C,H,W], kernel [C,kh,kw]."""
    _guard("depthwise_conv2d")
    x = _as_f32(x, 3, "depthwise input")
    w = _as_f32(w, 3, "depthwise kernel")
    c, h, wd = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"depthwise: kernel has {w.shape[0]} channels, input {c}")
    _, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh = _out_extent(h, kh, sh, ph, "depthwise")
    ow = _out_extent(wd, kw, sw, pw, "depthwise")
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    out = np.zeros((c, oh, ow), dtype=DTYPE)
    # tap accumulation: cheap and avoids a C*kh*kw*oh*ow buffer
    for i in range(kh):
        for j in range(kw):
            out += w[:, i, j, None, None] * xp[:, i:i + sh * oh:sh, j:j + sw * ow:sw]
    if bias is not None:
        b = _as_f32(bias, 1, "depthwise bias")
        if b.shape[0] != c:
            raise ShapeError("depthwise: bias channel mismatch")
        out = out + b[:, None, None]
    _bump(label or "depthwise_conv2d", c * kh * kw * oh * ow)
    return _finished(out, "depthwise_conv2d")


def _depthwise_vjp(x, w, go, stride, padding, with_bias):
    c, h, wd = x.shape
    _, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    _, oh, ow = go.shape
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    gw = np.zeros_like(w)
    gxp = np.zeros((c, h + 2 * ph, wd + 2 * pw), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, i:i + sh * oh:sh, j:j + sw * ow:sw]
            gw[:, i, j] = (go * sl).sum(axis=(1, 2))
            gxp[:, i:i + sh * oh:sh, j:j + sw * ow:sw] += w[:, i, j, None, None] * go
    gx = gxp[:, ph:ph + h, pw:pw + wd] if (ph or pw) else gxp
    gb = go.sum(axis=(1, 2)) if with_bias else None
    return np.ascontiguousarray(gx), gw, gb


def _im2col3d(x: np.ndarray, kd, kh, kw, sd, sh, sw, pd, ph, pw):
    """Return patches [C, kd*kh*kw, od*oh*ow] (copy) for a [C,D,H,W] input."""
    c, d, h, w = x.shape
    od = _out_extent(d, kd, sd, pd, "conv3d")
    oh = _out_extent(h, kh, sh, ph, "conv3d")
    ow = _out_extent(w, kw, sw, pw, "conv3d")
    if pd or ph or pw:
        x = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (c, kd, kh, kw, od, oh, ow),
        (s0, s1, s2, s3, s1 * sd, s2 * sh, s3 * sw))
    return view.reshape(c, kd * kh * kw, od * oh * ow), od, oh, ow


def conv3d(x, w, bias=None, stride=(1, 1, 1), padding=(0, 0, 0),
           label: str | None = None) -> np.ndarray:
    """Cross-correlation of [C_in,D,H,W] with [C_out,C_in,kd,kh,kw], zero padding."""
    _guard("conv3d")
    x = _as_f32(x, 4, "conv3d input")
    w = _as_f32(w, 5, "conv3d kernel")
    cin, d, h, wd = x.shape
    cout, cink, kd, kh, kw = w.shape
    if cink != cin:
        raise ShapeError(f"conv3d: kernel expects {cink} input channels, got {cin}")
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    cols, od, oh, ow = _im2col3d(x, kd, kh, kw, sd, sh, sw, pd, ph, pw)
    out = (w.reshape(cout, cin * kd * kh * kw)
           @ cols.reshape(cin * kd * kh * kw, od * oh * ow))
    out = out.reshape(cout, od, oh, ow)
    if bias is not None:
        b = _as_f32(bias, 1, "conv3d bias")
        if b.shape[0] != cout:
            raise ShapeError("conv3d: bias channel mismatch")
        out = out + b[:, None, None, None]
    _bump(label or "conv3d", cout * cin * kd * kh * kw * od * oh * ow)
    return _finished(np.ascontiguousarray(out), "conv3d")


def _conv3d_vjp(x, w, go, stride, padding, with_bias):
    cin, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    _, od, oh, ow = go.shape
    gof = go.reshape(cout, od * oh * ow).astype(DTYPE)
    cols, _, _, _ = _im2col3d(x, kd, kh, kw, sd, sh, sw, pd, ph, pw)
    gw = (gof @ cols.reshape(cin * kd * kh * kw, -1).T).reshape(w.shape)
    gcols = (w.reshape(cout, cin * kd * kh * kw).T @ gof).reshape(
        cin, kd, kh, kw, od, oh, ow)
    gxp = np.zeros((cin, d + 2 * pd, h + 2 * ph, wd + 2 * pw), dtype=DTYPE)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                gxp[:, i:i + sd * od:sd, j:j + sh * oh:sh, k:k + sw * ow:sw] += \
                    gcols[:, i, j, k]
    gx = gxp[:, pd:pd + d, ph:ph + h, pw:pw + wd]
    gb = gof.sum(axis=1) if with_bias else None
    return np.ascontiguousarray(gx), gw, gb


# --- normalization / activations ------------------------------------------------

def normalize(x, kind: str, scale, shift, mean=None, var=None, eps: float = NORM_EPS,
              label: str | None = None) -> np.ndarray:
    """Channel-affine normalization.

    ``batch-norm-inference`` uses the provided running mean/var per channel;
    ``layer-norm`` normalizes over the channel axis at each spatial site.
    """
    _guard("normalize")
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim < 1:
        raise ShapeError("normalize: input must have a channel axis")
    c = x.shape[0]
    scale = np.asarray(scale, dtype=DTYPE).reshape(-1)
    shift = np.asarray(shift, dtype=DTYPE).reshape(-1)
    if scale.shape[0] != c or shift.shape[0] != c:
        raise ShapeError(f"normalize: scale/shift must have {c} channels")
    bshape = (c,) + (1,) * (x.ndim - 1)
    if kind == "batch-norm-inference":
        if mean is None or var is None:
            raise ShapeError("batch-norm-inference requires running mean and var")
        mean = np.asarray(mean, dtype=DTYPE).reshape(bshape)
        var = np.asarray(var, dtype=DTYPE).reshape(bshape)
        out = (x - mean) / np.sqrt(var + DTYPE(eps)) * scale.reshape(bshape) + shift.reshape(bshape)
    elif kind == "layer-norm":
        mu = x.mean(axis=0, keepdims=True)
        v = np.square(x - mu).mean(axis=0, keepdims=True)
        out = (x - mu) / np.sqrt(v + DTYPE(eps)) * scale.reshape(bshape) + shift.reshape(bshape)
    else:
        raise ValueError(f"normalize: unknown kind {kind!r}")
    return _finished(out.astype(DTYPE), "normalize")


def relu6(x) -> np.ndarray:
    _guard("relu6")
    x = np.asarray(x, dtype=DTYPE)
    return _finished(np.clip(x, DTYPE(0), DTYPE(6)), "relu6")


def gelu(x) -> np.ndarray:
    """x * Phi(x) with the exact Gaussian CDF."""
    _guard("gelu")
    x = np.asarray(x, dtype=DTYPE)
    out = DTYPE(0.5) * x * (DTYPE(1) + erf(x * DTYPE(np.sqrt(0.5)))).astype(DTYPE)
    return _finished(out, "gelu")


def activation(x, kind: str) -> np.ndarray:
    if kind == "relu6":
        return relu6(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"activation: unknown kind {kind!r}")


# --- resize / softmax -------------------------------------------------------------

@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int, align_corners: bool) -> np.ndarray:
    """[n_out, n_in] bilinear interpolation weights along one axis."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        if align_corners:
            src = 0.0 if n_out == 1 else i * (n_in - 1) / (n_out - 1)
        else:
            src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        f = src - lo
        m[i, lo] += 1.0 - f
        m[i, hi] += f
    return m.astype(DTYPE)


def bilinear_resize(x, out_h: int, out_w: int, align_corners: bool = False,
                    label: str | None = None) -> np.ndarray:
    """Bilinear resampling of [C,H,W] (or [H,W]) to (out_h, out_w)."""
    _guard("bilinear_resize")
    squeeze = False
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 2:
        x = x[None]
        squeeze = True
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize: expected [C,H,W], got {x.shape}")
    _, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: output extents must be positive")
    rh = _resize_matrix(h, out_h, align_corners)
    rw = _resize_matrix(w, out_w, align_corners)
    out = np.matmul(rh, np.matmul(x, rw.T))
    out = np.ascontiguousarray(out.astype(DTYPE))
    if squeeze:
        out = out[0]
    return _finished(out, "bilinear_resize")


def _bilinear_resize_vjp(in_shape, go, align_corners):
    """Exact transpose of the forward interpolation weights."""
    squeeze = len(in_shape) == 2
    h, w = in_shape[-2], in_shape[-1]
    g = go if go.ndim == 3 else go[None]
    rh = _resize_matrix(h, g.shape[1], align_corners)
    rw = _resize_matrix(w, g.shape[2], align_corners)
    gx = np.matmul(rh.T, np.matmul(g, rw))
    gx = np.ascontiguousarray(gx.astype(DTYPE))
    return gx[0] if squeeze else gx


def softmax_axis(x, axis: int, label: str | None = None) -> np.ndarray:
    """Numerically stable softmax along one axis."""
    _guard("softmax_axis")
    x = np.asarray(x, dtype=DTYPE)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _finished(out.astype(DTYPE), "softmax_axis")
