"""The disparity network: shared-weight feature pyramid, correlation volume,
hybrid 2D/3D cost aggregation (five wirings), soft-argmax regression, and
convex upsampling back to full resolution.

Parameters live in a :class:`WeightStore`. The graph is defined once, in the
forward code: ``init_weights`` simply runs the forward in allocate mode, so
parameter names and shapes cannot drift from what the graph consumes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensor as K
from .autodiff import ParamView, Var
from .config import NetworkConfig
from .tensor import DTYPE, MacsLedger, ShapeError


@dataclass
class WeightStore:
    """Ordered named parameter tensors plus their initialization metadata."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    init_seed: int = 0
    schemes: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = np.asarray(value, dtype=DTYPE)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def keys(self):
        return self.tensors.keys()

    def items(self):
        return self.tensors.items()

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.tensors.items()},
                           self.init_seed, dict(self.schemes))

    def parameter_count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def allclose(self, other: "WeightStore") -> bool:
        return (self.keys() == other.keys()
                and all(np.array_equal(self[k], other[k]) for k in self))


@dataclass
class DisparityMap:
    """Full-resolution disparity in pixels plus a validity mask."""

    values: np.ndarray
    valid: np.ndarray


@dataclass
class ForwardResult:
    disparity: DisparityMap
    quarter: np.ndarray
    fused_left: np.ndarray
    fused_right: np.ndarray


class NetParams:
    """Name -> parameter resolution.

    Run mode reads through a ParamView (so autodiff watches each name once);
    init mode allocates tensors on first touch, in forward-encounter order.
    """

    def __init__(self, view: ParamView | None, store: WeightStore | None, rng):
        self._view = view
        self._store = store
        self._rng = rng

    @classmethod
    def run(cls, view: ParamView) -> "NetParams":
        return cls(view, None, None)

    @classmethod
    def init(cls, store: WeightStore, rng) -> "NetParams":
        return cls(None, store, rng)

    def get(self, name: str, shape: tuple, scheme: str = "he") -> Var:
        if self._view is not None:
            var = self._view[name]
            if var.value.shape != tuple(shape):
                raise ShapeError(f"parameter {name!r} has shape {var.value.shape}, "
                                 f"the graph expects {tuple(shape)}")
            return var
        store = self._store
        if name not in store:
            if scheme == "he":
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
                std = math.sqrt(2.0 / fan_in)
                store[name] = self._rng.normal(0.0, std, size=shape).astype(DTYPE)
                store.schemes[name] = f"he_normal(fan_in={fan_in})"
            elif scheme == "zeros":
                store[name] = np.zeros(shape, dtype=DTYPE)
                store.schemes[name] = "zeros"
            elif scheme == "ones":
                store[name] = np.ones(shape, dtype=DTYPE)
                store.schemes[name] = "ones"
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
        return ad.lift(store[name])


def init_weights(cfg: NetworkConfig, seed: int = 0) -> WeightStore:
    """Allocate all parameters by tracing the forward graph on a dummy pair."""
    store = WeightStore(init_seed=seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    p = NetParams.init(store, rng)
    dummy = ad.lift(np.zeros((3, 32, 64), dtype=DTYPE))
    forward_vars(dummy, dummy, p, cfg)
    return store


# --- building blocks -----------------------------------------------------------

def _layer_norm(p: NetParams, prefix: str, x: Var) -> Var:
    c = x.value.shape[0]
    return ad.normalize(x, "layer-norm",
                        p.get(prefix + ".scale", (c,), "ones"),
                        p.get(prefix + ".shift", (c,), "zeros"))


def _inverted_residual(p: NetParams, prefix: str, x: Var, cout: int,
                       stride: int, ratio: int) -> Var:
    cin = x.value.shape[0]
    hidden = cin * ratio
    y = x
    if ratio != 1:
        y = ad.conv2d(y, p.get(f"{prefix}.expand.w", (hidden, cin, 1, 1)),
                      label=f"{prefix}.expand")
        y = _layer_norm(p, f"{prefix}.expand.norm", y)
        y = ad.relu6(y)
    y = ad.depthwise_conv2d(y, p.get(f"{prefix}.dw.w", (hidden, 3, 3)),
                            stride=(stride, stride), padding=(1, 1),
                            label=f"{prefix}.dw")
    y = _layer_norm(p, f"{prefix}.dw.norm", y)
    y = ad.relu6(y)
    y = ad.conv2d(y, p.get(f"{prefix}.project.w", (cout, hidden, 1, 1)),
                  p.get(f"{prefix}.project.b", (cout,), "zeros"),
                  label=f"{prefix}.project")
    if stride == 1 and cin == cout:
        y = ad.add(x, y)
    return y


def extract_features(image: Var, p: NetParams, cfg: NetworkConfig) -> Var:
    """Fused quarter-resolution feature map [N_c, H/4, W/4]."""
    image = ad.lift(image)
    _, h, w = image.value.shape
    if h % 32 or w % 32:
        raise ShapeError(f"input size {h}x{w} must be divisible by 32")

    x = ad.conv2d(image, p.get("features.stem.w", (cfg.stem_channels, 3, 3, 3)),
                  stride=(2, 2), padding=(1, 1), label="features.stem")
    x = _layer_norm(p, "features.stem.norm", x)
    x = ad.relu6(x)

    feats = []
    for si, (c, n) in enumerate(zip(cfg.channels_per_scale, cfg.blocks_per_scale)):
        scale = 4 * 2 ** si
        for b in range(n):
            x = _inverted_residual(p, f"features.s{scale}.b{b}", x, c,
                                   stride=2 if b == 0 else 1, ratio=cfg.expand_ratio)
        feats.append(x)

    nc = cfg.fused_channels
    h4, w4 = h // 4, w // 4
    fused = ad.conv2d(feats[0], p.get("fusion.lat4.w", (nc, feats[0].value.shape[0], 1, 1)),
                      p.get("fusion.lat4.b", (nc,), "zeros"), label="fusion.lat4")
    for scale, f in zip((8, 16, 32), feats[1:]):
        u = ad.conv2d(f, p.get(f"fusion.lat{scale}.w", (nc, f.value.shape[0], 1, 1)),
                      p.get(f"fusion.lat{scale}.b", (nc,), "zeros"),
                      label=f"fusion.lat{scale}")
        u = ad.bilinear_resize(u, h4, w4, align_corners=False)
        fused = ad.add(fused, u)

    y = ad.conv2d(fused, p.get("fusion.block.conv1.w", (nc, nc, 3, 3)),
                  padding=(1, 1), label="fusion.block.conv1")
    y = _layer_norm(p, "fusion.block.norm", y)
    y = ad.relu6(y)
    y = ad.conv2d(y, p.get("fusion.block.conv2.w", (nc, nc, 3, 3)),
                  p.get("fusion.block.conv2.b", (nc,), "zeros"),
                  padding=(1, 1), label="fusion.block.conv2")
    return ad.add(fused, y)


def build_cost_volume(f_left, f_right, d_levels: int) -> Var:
    """Mean-channel inner products: C(d,h,w) = <F_L(h,w), F_R(h,w-d)> / N_c.

    Positions looking past the left edge of the right image (w - d < 0) are 0.
    """
    fl, fr = ad.lift(f_left), ad.lift(f_right)
    a, b = fl.value, fr.value
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"cost volume inputs must be matching [C,H,W], "
                         f"got {a.shape} and {b.shape}")
    nc, h, w = a.shape
    out = np.zeros((d_levels, h, w), dtype=DTYPE)
    macs = 0
    for d in range(min(d_levels, w)):
        out[d, :, d:] = np.einsum("chw,chw->hw", a[:, :, d:], b[:, :, :w - d]) / nc
        macs += nc * h * (w - d)
    K._bump("correlation", macs)
    out = K._finished(out, "correlation")

    def vjp(g):
        ga = np.zeros_like(a)
        gb = np.zeros_like(b)
        for d in range(min(d_levels, w)):
            gd = g[d, :, d:] / nc
            ga[:, :, d:] += gd[None] * b[:, :, :w - d]
            gb[:, :, :w - d] += gd[None] * a[:, :, d:]
        return ga, gb

    return ad.custom(out, (fl, fr), vjp, "correlation")


# --- aggregation ---------------------------------------------------------------

def three_d_width(cfg: NetworkConfig) -> int:
    """Pick the 3D block width whose closed-form share of aggregation MACs is
    closest to the configured proportion (shape-independent)."""
    k = int(np.prod(cfg.three_d_kernel))
    d = cfg.d_levels
    c2 = cfg.agg_channels
    f2d = 2 * c2 * d + cfg.two_d_layer_count * (49 * c2 + 8 * c2 * c2)
    proj = d * d

    def fraction(w: int) -> float:
        f3 = k * d * (2 * w + w * w)
        return f3 / (f3 + f2d + proj)

    return min(range(1, 65), key=lambda w: abs(fraction(w) - cfg.three_d_proportion))


def _crop3d(x: Var, shape: tuple) -> Var:
    x = ad.lift(x)
    full = x.value.shape
    if full == tuple(shape):
        return x
    c, d, h, w = shape
    out = np.ascontiguousarray(x.value[:c, :d, :h, :w])

    def vjp(g):
        buf = np.zeros(full, dtype=DTYPE)
        buf[:c, :d, :h, :w] = g
        return (buf,)

    return ad.custom(out, (x,), vjp, "crop3d")


def _g3d(cost: Var, p: NetParams, cfg: NetworkConfig) -> Var:
    d, h, w = cost.value.shape
    kd, kh, kw = cfg.three_d_kernel
    pad = (kd // 2, kh // 2, kw // 2)
    cw = three_d_width(cfg)
    v = ad.reshape(cost, (1, d, h, w))
    lift = ad.relu6(ad.conv3d(v, p.get("agg3d.lift.w", (cw, 1, kd, kh, kw)),
                              p.get("agg3d.lift.b", (cw,), "zeros"),
                              padding=pad, label="agg3d.lift"))
    down = ad.relu6(ad.conv3d(lift, p.get("agg3d.down.w", (2 * cw, cw, kd, kh, kw)),
                              p.get("agg3d.down.b", (2 * cw,), "zeros"),
                              stride=(2, 2, 2), padding=pad, label="agg3d.down"))
    mid = ad.relu6(ad.conv3d(down, p.get("agg3d.mid.w", (2 * cw, 2 * cw, kd, kh, kw)),
                             p.get("agg3d.mid.b", (2 * cw,), "zeros"),
                             padding=pad, label="agg3d.mid"))
    up = ad.conv3d(mid, p.get("agg3d.up.w", (cw, 2 * cw, kd, kh, kw)),
                   p.get("agg3d.up.b", (cw,), "zeros"),
                   padding=pad, label="agg3d.up")
    up = _crop3d(ad.upsample_nearest3d(up, 2), lift.value.shape)
    out = ad.conv3d(ad.add(lift, up), p.get("agg3d.out.w", (1, cw, kd, kh, kw)),
                    p.get("agg3d.out.b", (1,), "zeros"),
                    padding=pad, label="agg3d.out")
    return ad.reshape(out, (d, h, w))


def _convnext_block(x: Var, p: NetParams, prefix: str, c: int) -> Var:
    y = ad.depthwise_conv2d(x, p.get(f"{prefix}.dw.w", (c, 7, 7)),
                            p.get(f"{prefix}.dw.b", (c,), "zeros"),
                            padding=(3, 3), label=f"{prefix}.dw")
    y = _layer_norm(p, f"{prefix}.norm", y)
    y = ad.conv2d(y, p.get(f"{prefix}.pw1.w", (4 * c, c, 1, 1)),
                  p.get(f"{prefix}.pw1.b", (4 * c,), "zeros"), label=f"{prefix}.pw1")
    y = ad.gelu(y)
    y = ad.conv2d(y, p.get(f"{prefix}.pw2.w", (c, 4 * c, 1, 1)),
                  p.get(f"{prefix}.pw2.b", (c,), "zeros"), label=f"{prefix}.pw2")
    return ad.add(x, y)


def _g2d_in(cost: Var, p: NetParams, cfg: NetworkConfig) -> Var:
    d = cost.value.shape[0]
    return ad.conv2d(cost, p.get("agg2d.in.w", (cfg.agg_channels, d, 1, 1)),
                     p.get("agg2d.in.b", (cfg.agg_channels,), "zeros"), label="agg2d.in")


def _g2d_out(x: Var, p: NetParams, cfg: NetworkConfig) -> Var:
    return ad.conv2d(x, p.get("agg2d.out.w", (cfg.d_levels, cfg.agg_channels, 1, 1)),
                     p.get("agg2d.out.b", (cfg.d_levels,), "zeros"), label="agg2d.out")


def _g2d(cost: Var, p: NetParams, cfg: NetworkConfig) -> Var:
    x = _g2d_in(cost, p, cfg)
    for i in range(cfg.two_d_layer_count):
        x = _convnext_block(x, p, f"agg2d.blk{i}", cfg.agg_channels)
    return _g2d_out(x, p, cfg)


def _g2d_interleaved(cost: Var, p: NetParams, cfg: NetworkConfig) -> Var:
    """One ConvNeXt block then one thin 3D unit over the channel axis, repeated."""
    kd, kh, kw = cfg.three_d_kernel
    pad = (kd // 2, kh // 2, kw // 2)
    c2 = cfg.agg_channels
    x = _g2d_in(cost, p, cfg)
    for i in range(cfg.two_d_layer_count):
        x = _convnext_block(x, p, f"agg2d.blk{i}", c2)
        h, w = x.value.shape[1:]
        v = ad.reshape(x, (1, c2, h, w))
        v = ad.conv3d(v, p.get(f"agg3x.blk{i}.w", (1, 1, kd, kh, kw)),
                      p.get(f"agg3x.blk{i}.b", (1,), "zeros"),
                      padding=pad, label=f"agg3x.blk{i}")
        x = ad.add(x, ad.reshape(v, (c2, h, w)))
    return _g2d_out(x, p, cfg)


def aggregate(cost: Var, p: NetParams, cfg: NetworkConfig) -> Var:
    """Filter the raw volume through the configured 2D/3D wiring; output is a
    single-channel cost per disparity level, [D, H/4, W/4]."""
    cost = ad.lift(cost)
    variant = cfg.agg_variant
    if variant == "two-d-only":
        x = _g2d(cost, p, cfg)
    elif variant == "three-d-then-two-d":
        x = _g2d(_g3d(cost, p, cfg), p, cfg)
    elif variant == "two-d-then-three-d":
        x = _g3d(_g2d(cost, p, cfg), p, cfg)
    elif variant == "bilateral":
        x = ad.add(_g2d(cost, p, cfg), _g3d(cost, p, cfg))
    elif variant == "interleaved":
        x = _g2d_interleaved(cost, p, cfg)
    else:
        raise ValueError(f"unknown aggregation variant {variant!r}")
    d = cost.value.shape[0]
    return ad.conv2d(x, p.get("agg.proj.w", (d, d, 1, 1)),
                     p.get("agg.proj.b", (d,), "zeros"), label="agg.proj")


# --- regression head -------------------------------------------------------------

def soft_argmax(cost_agg) -> Var:
    """Expected disparity level per pixel: sum_d d * softmax(C_agg)(d)."""
    c = ad.lift(cost_agg)
    d, h, w = c.value.shape
    probs = ad.softmax_axis(c, 0)
    levels = np.arange(d, dtype=DTYPE)[:, None, None]
    K._bump("head.soft_argmax", d * h * w)
    return ad.sum_axis(ad.mul(probs, levels), 0)


def convex_upsample(disp_q, mask_logits) -> Var:
    """Each full-resolution pixel is a softmax-weighted convex combination of
    its 3x3 coarse neighborhood, scaled by 4 to full-resolution units."""
    dq, m = ad.lift(disp_q), ad.lift(mask_logits)
    if dq.value.ndim != 2:
        raise ShapeError(f"convex_upsample: disparity must be [H,W], got {dq.value.shape}")
    h4, w4 = dq.value.shape
    if m.value.shape != (144, h4, w4):
        raise ShapeError(f"convex_upsample: mask logits must be [144,{h4},{w4}], "
                         f"got {m.value.shape}")
    weights = ad.softmax_axis(ad.reshape(m, (9, 16, h4, w4)), 0)
    neigh = ad.reshape(ad.neighbors3x3(dq), (9, 1, h4, w4))
    combined = ad.sum_axis(ad.mul(weights, neigh), 0)
    K._bump("upsample.convex", 9 * 16 * h4 * w4)
    return ad.mul(ad.depth_to_space4(combined), np.asarray(4.0, dtype=DTYPE))


def forward_vars(left: Var, right: Var, p: NetParams, cfg: NetworkConfig) -> dict[str, Var]:
    """Differentiable forward pass; returns the full graph endpoints."""
    fl = extract_features(left, p, cfg)
    fr = extract_features(right, p, cfg)
    volume = build_cost_volume(fl, fr, cfg.d_levels)
    agg = aggregate(volume, p, cfg)
    quarter = soft_argmax(agg)
    mh = ad.relu6(ad.conv2d(agg, p.get("head.mask1.w", (cfg.mask_head_channels,
                                                        cfg.d_levels, 3, 3)),
                            p.get("head.mask1.b", (cfg.mask_head_channels,), "zeros"),
                            padding=(1, 1), label="head.mask1"))
    logits = ad.conv2d(mh, p.get("head.mask2.w", (144, cfg.mask_head_channels, 1, 1)),
                       p.get("head.mask2.b", (144,), "zeros"), label="head.mask2")
    full = convex_upsample(quarter, logits)
    return {"disparity": full, "quarter": quarter,
            "fused_left": fl, "fused_right": fr, "aggregated": agg}


def forward(left, right, weights: WeightStore, cfg: NetworkConfig) -> ForwardResult:
    """Plain (untaped) forward pass on a rectified pair."""
    p = NetParams.run(ParamView(weights))
    out = forward_vars(ad.lift(np.asarray(left, dtype=DTYPE)),
                       ad.lift(np.asarray(right, dtype=DTYPE)), p, cfg)
    values = out["disparity"].value
    disp = DisparityMap(values, np.ones(values.shape, dtype=bool))
    return ForwardResult(disp, out["quarter"].value,
                         out["fused_left"].value, out["fused_right"].value)


# --- MACs profile -----------------------------------------------------------------

@dataclass
class MacsProfile:
    ledger: MacsLedger
    total: int
    by_group: dict[str, int]
    aggregation_total: int
    three_d_total: int

    @property
    def three_d_fraction(self) -> float:
        return self.three_d_total / self.aggregation_total if self.aggregation_total else 0.0


def profile_macs(cfg: NetworkConfig, height: int, width: int, seed: int = 0) -> MacsProfile:
    """Analytic MACs of one forward pass at the given input size."""
    store = init_weights(cfg, seed)
    img = np.zeros((3, height, width), dtype=DTYPE)
    with MacsLedger() as ledger:
        forward(img, img, store, cfg)
    groups = ledger.by_group()
    agg = sum(v for k, v in groups.items() if k.startswith("agg"))
    three_d = sum(v for k, v in groups.items() if k in ("agg3d", "agg3x"))
    return MacsProfile(ledger, ledger.total, groups, agg, three_d)
