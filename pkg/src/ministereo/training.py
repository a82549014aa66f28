"""Losses, input perturbations, AdamW/one-cycle, and the three-stage protocol.

Stage 1 is plain supervision on clean labeled pairs. Stage 2 self-distills:
a teacher (initialized from stage 1) sees clean inputs while the student sees
perturbed ones, with a feature-alignment term tying their fused quarter-scale
features together. Stage 3 trains against pseudo labels from a pluggable
oracle on (nominally unlabeled) pairs.

All randomness flows through Philox streams keyed by (seed, purpose), so runs
are bit-reproducible and the batch stream is shared across stages.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import convolve1d

from . import autodiff as ad
from . import metrics as M
from .autodiff import ParamView, Var
from .config import NetworkConfig, StageConfig
from .data import StereoSample
from .network import DisparityMap, NetParams, WeightStore, forward, forward_vars, init_weights
from .tensor import DTYPE


class EmptyMaskError(ValueError):
    """A loss or metric was asked to average over zero valid pixels."""


# --- losses -----------------------------------------------------------------------

def disparity_loss(pred, gt, mask) -> Var:
    """Masked mean smooth-L1 (transition point 1): 0.5x^2 inside, |x|-0.5 outside."""
    p = ad.lift(pred)
    gt = np.asarray(gt, dtype=DTYPE)
    mask = np.asarray(mask, dtype=bool)
    if p.value.shape != gt.shape or mask.shape != gt.shape:
        raise ValueError(f"disparity_loss: shape mismatch {p.value.shape} vs {gt.shape}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("disparity_loss: no valid pixels")
    diff = (p.value - gt)[mask].astype(np.float64)
    a = np.abs(diff)
    per = np.where(a < 1.0, 0.5 * diff * diff, a - 0.5)
    value = np.asarray(per.sum() / n, dtype=DTYPE)

    def vjp(g):
        gx = np.zeros(gt.shape, dtype=DTYPE)
        d = np.clip(p.value - gt, -1.0, 1.0)
        gx[mask] = d[mask] * (float(g) / n)
        return (gx,)

    return ad.custom(value, (p,), vjp, "disparity_loss")


def feature_align_loss(f_teacher, f_student) -> Var:
    """1 - mean cosine over channel vectors per spatial site; zero vectors
    contribute cosine 0."""
    ft, fs = ad.lift(f_teacher), ad.lift(f_student)
    a, b = ft.value, fs.value
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"feature_align_loss: need matching [C,H,W], got {a.shape}, {b.shape}")
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    dot = (a64 * b64).sum(axis=0)
    na = np.sqrt((a64 * a64).sum(axis=0))
    nb = np.sqrt((b64 * b64).sum(axis=0))
    denom = na * nb
    ok = denom > 0
    cos = np.zeros_like(dot)
    np.divide(dot, denom, out=cos, where=ok)
    n_sites = a.shape[1] * a.shape[2]
    value = np.asarray(1.0 - cos.sum() / n_sites, dtype=DTYPE)

    def vjp(g):
        scale = -float(g) / n_sites
        with np.errstate(invalid="ignore", divide="ignore"):
            dcos_db = np.where(ok, 1.0, 0.0) * (a64 / np.where(ok, denom, 1.0)
                                                - b64 * np.where(ok, cos / np.maximum(nb * nb, 1e-300), 0.0))
            dcos_da = np.where(ok, 1.0, 0.0) * (b64 / np.where(ok, denom, 1.0)
                                                - a64 * np.where(ok, cos / np.maximum(na * na, 1e-300), 0.0))
        return (scale * dcos_da).astype(DTYPE), (scale * dcos_db).astype(DTYPE)

    return ad.custom(value, (ft, fs), vjp, "feature_align_loss")


# --- perturbation bank --------------------------------------------------------------

def adjust_brightness(img: np.ndarray, delta: float) -> np.ndarray:
    return img + DTYPE(delta)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    return (img - DTYPE(0.5)) * DTYPE(factor) + DTYPE(0.5)


def color_scale(img: np.ndarray, scales) -> np.ndarray:
    return img * np.asarray(scales, dtype=DTYPE)[:, None, None]


def gaussian_noise(img: np.ndarray, rng, sigma: float) -> np.ndarray:
    return img + rng.normal(0.0, sigma, size=img.shape).astype(DTYPE)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    k /= k.sum()
    out = convolve1d(img, k.astype(DTYPE), axis=1, mode="reflect")
    return convolve1d(out, k.astype(DTYPE), axis=2, mode="reflect").astype(DTYPE)


def occlusion_patches(img: np.ndarray, rng, count: int, max_frac: float = 0.25) -> np.ndarray:
    out = img.copy()
    _, h, w = img.shape
    for _ in range(count):
        ph = int(rng.integers(2, max(3, int(h * max_frac))))
        pw = int(rng.integers(2, max(3, int(w * max_frac))))
        y = int(rng.integers(0, h - ph + 1))
        x = int(rng.integers(0, w - pw + 1))
        fill = rng.random(3).astype(DTYPE)[:, None, None]
        out[:, y:y + ph, x:x + pw] = fill
    return out


def perturb(sample: StereoSample, seed: int, strength: float) -> StereoSample:
    """Seeded photometric/occlusion corruption of the images; ground truth is
    untouched. Strength 0 returns the sample unchanged."""
    if strength == 0:
        return replace(sample)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 0xbadc0de))))
    s = float(strength)
    left, right = sample.left, sample.right

    delta = rng.uniform(-0.25, 0.25) * s
    contrast = 1.0 + rng.uniform(-0.35, 0.35) * s
    colors = 1.0 + rng.uniform(-0.2, 0.2, size=3) * s
    left = color_scale(adjust_contrast(adjust_brightness(left, delta), contrast), colors)
    right = color_scale(adjust_contrast(adjust_brightness(right, delta), contrast), colors)

    # asymmetric left/right photometric jitter
    rdelta = rng.uniform(-0.12, 0.12) * s
    rcontrast = 1.0 + rng.uniform(-0.15, 0.15) * s
    right = adjust_contrast(adjust_brightness(right, rdelta), rcontrast)

    blur_on = rng.random() < 0.5
    blur_sigma = rng.uniform(0.3, 1.2) * s
    if blur_on:
        left = gaussian_blur(left, blur_sigma)
        right = gaussian_blur(right, blur_sigma)

    sigma = rng.uniform(0.02, 0.10) * s
    left = gaussian_noise(left, rng, sigma)
    right = gaussian_noise(right, rng, sigma)

    n_patches = int(rng.integers(0, 3))
    right = occlusion_patches(right, rng, n_patches)

    left = np.clip(left, 0.0, 1.0).astype(DTYPE)
    right = np.clip(right, 0.0, 1.0).astype(DTYPE)
    return replace(sample, left=left, right=right)


# --- optimizer and schedule ----------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(weights: WeightStore, grads: dict[str, np.ndarray], state: AdamState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Decoupled weight decay plus bias-corrected Adam moments, in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.items():
        w = weights[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= DTYPE(b1)
        m += DTYPE(1.0 - b1) * g
        v *= DTYPE(b2)
        v += DTYPE(1.0 - b2) * (g * g)
        if weight_decay:
            w -= DTYPE(lr * weight_decay) * w
        w -= DTYPE(lr) * (m / DTYPE(bc1)) / (np.sqrt(v / DTYPE(bc2)) + DTYPE(eps))


def one_cycle_lr(step: int, total_steps: int, peak_lr: float,
                 warmup_frac: float = 0.3, floor_div: float = 25.0) -> float:
    """Linear warmup from peak/25 to peak at 30% of the run, then cosine decay
    back to peak/25 at the final step."""
    floor = peak_lr / floor_div
    step = min(max(step, 0), total_steps)
    warm = int(round(warmup_frac * total_steps))
    if warm > 0 and step <= warm:
        return floor + (peak_lr - floor) * step / warm
    tail = max(total_steps - warm, 1)
    frac = (step - warm) / tail
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


# --- logging ---------------------------------------------------------------------

@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def log_step(self, step: int, lr: float, **losses: float) -> None:
        rec = {"step": int(step), "lr": float(lr)}
        rec.update({k: float(v) for k, v in losses.items()})
        if self.steps and rec["step"] <= self.steps[-1]["step"]:
            raise ValueError("step index must be strictly increasing")
        if not all(math.isfinite(v) for v in rec.values() if isinstance(v, float)):
            raise ValueError(f"non-finite value in log record {rec}")
        self.steps.append(rec)

    def log_eval(self, step: int, report: M.MetricReport) -> None:
        rec = {"step": int(step), "epe": report.epe, "d1": report.d1}
        rec.update({f"bad{t:g}": v for t, v in report.bad.items()})
        if not all(math.isfinite(v) for v in rec.values()):
            raise ValueError(f"non-finite value in eval record {rec}")
        self.evals.append(rec)

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}) + "\n")
            for rec in self.evals:
                fh.write(json.dumps({"kind": "eval", **rec}) + "\n")


# --- evaluation helper ----------------------------------------------------------------

def evaluate(weights: WeightStore, cfg: NetworkConfig, samples: Sequence[StereoSample],
             perturb_strength: float = 0.0, perturb_seed: int = 0) -> M.MetricReport:
    """Pooled metrics over a sample set, optionally with perturbed inputs."""
    preds, gts, masks = [], [], []
    for i, s in enumerate(samples):
        if perturb_strength > 0:
            s = perturb(s, seed=perturb_seed + i, strength=perturb_strength)
        res = forward(s.left, s.right, weights, cfg)
        preds.append(res.disparity.values)
        gts.append(s.gt)
        masks.append(s.valid)
    return M.report(np.stack(preds), np.stack(gts), np.stack(masks))


# --- stage loops -------------------------------------------------------------------

def _batch_rng(seed: int):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 0xba7c4))))


def _sample_seed(seed: int, step: int, slot: int) -> int:
    return (seed * 1_000_003 + step) * 1_000_003 + slot


def _loop(data: Sequence[StereoSample], cfg: StageConfig, net_cfg: NetworkConfig,
          weights: WeightStore, step_loss: Callable[[ParamView, int, list[int]], Var],
          eval_set: Sequence[StereoSample] | None,
          eval_perturb: float = 0.0,
          after_step: Callable[[int], None] | None = None) -> TrainLog:
    log = TrainLog()
    state = AdamState()
    rng = _batch_rng(cfg.seed)
    for step in range(cfg.steps):
        lr = one_cycle_lr(step, cfg.steps, cfg.peak_lr)
        idx = [int(i) for i in rng.integers(0, len(data), size=cfg.batch_size)]
        out, tape = ad.record(step_loss, step, idx)
        grads = ad.backward(tape, out)
        adamw_step(weights, grads, state, lr, (cfg.beta1, cfg.beta2),
                   weight_decay=cfg.weight_decay)
        log.log_step(step, lr, loss=float(out.value))
        if after_step is not None:
            after_step(step)
        if eval_set is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            log.log_eval(step, evaluate(weights, net_cfg, eval_set,
                                        perturb_strength=eval_perturb))
    if eval_set is not None:
        log.log_eval(cfg.steps, evaluate(weights, net_cfg, eval_set,
                                         perturb_strength=eval_perturb))
    return log


def run_stage1(data: Sequence[StereoSample], cfg: StageConfig, net_cfg: NetworkConfig,
               init: WeightStore | None = None,
               eval_set: Sequence[StereoSample] | None = None) -> tuple[WeightStore, TrainLog]:
    """Supervised training on clean labeled pairs, disparity loss only."""
    weights = init.copy() if init is not None else init_weights(net_cfg, cfg.seed)

    def loss_fn(step: int, idx: list[int]) -> Var:
        p = NetParams.run(ParamView(weights))
        total = None
        for i in idx:
            s = data[i]
            out = forward_vars(ad.lift(s.left), ad.lift(s.right), p, net_cfg)
            l = disparity_loss(out["disparity"], s.gt, s.valid)
            total = l if total is None else ad.add(total, l)
        return ad.mul(total, np.asarray(1.0 / len(idx), dtype=DTYPE))

    log = _loop(data, cfg, net_cfg, weights, loss_fn, eval_set)
    return weights, log


def run_stage2(data: Sequence[StereoSample], init: WeightStore, cfg: StageConfig,
               net_cfg: NetworkConfig,
               eval_set: Sequence[StereoSample] | None = None) -> tuple[WeightStore, TrainLog]:
    """Self-distillation: clean teacher, perturbed student, disparity loss plus
    feature alignment on the fused quarter-resolution features."""
    student = init.copy()
    teacher = init.copy()

    def loss_fn(step: int, idx: list[int]) -> Var:
        p = NetParams.run(ParamView(student))
        total = None
        for slot, i in enumerate(idx):
            clean = data[i]
            noisy = perturb(clean, _sample_seed(cfg.seed, step, slot), cfg.perturb_strength)
            out = forward_vars(ad.lift(noisy.left), ad.lift(noisy.right), p, net_cfg)
            l = disparity_loss(out["disparity"], clean.gt, clean.valid)
            if cfg.lambda_disp != 1.0:
                l = ad.mul(l, np.asarray(cfg.lambda_disp, dtype=DTYPE))
            if cfg.lambda_feat > 0:
                t_res = forward(clean.left, clean.right, teacher, net_cfg)
                align = feature_align_loss(t_res.fused_left, out["fused_left"])
                l = ad.add(l, ad.mul(align, np.asarray(cfg.lambda_feat, dtype=DTYPE)))
            total = l if total is None else ad.add(total, l)
        return ad.mul(total, np.asarray(1.0 / len(idx), dtype=DTYPE))

    def after_step(step: int) -> None:
        if cfg.teacher_update == "fixed":
            return
        if cfg.teacher_update == "hard-copy":
            for name in teacher:
                teacher.tensors[name] = student[name].copy()
            return
        d = DTYPE(cfg.ema_decay)
        one_minus = DTYPE(1.0 - cfg.ema_decay)
        for name in teacher:
            t = teacher.tensors[name]
            t *= d
            t += one_minus * student[name]

    log = _loop(data, cfg, net_cfg, student, loss_fn, eval_set,
                eval_perturb=cfg.perturb_strength, after_step=after_step)
    return student, log


def run_stage3(data: Sequence[StereoSample], oracle: Callable[[StereoSample], DisparityMap],
               init: WeightStore, cfg: StageConfig, net_cfg: NetworkConfig,
               eval_set: Sequence[StereoSample] | None = None) -> tuple[WeightStore, TrainLog]:
    """Supervised training against pseudo labels from a frozen oracle."""
    weights = init.copy()
    cache: dict[int, DisparityMap] = {}

    def pseudo(i: int) -> DisparityMap:
        if i not in cache:
            cache[i] = oracle(data[i])
        return cache[i]

    def loss_fn(step: int, idx: list[int]) -> Var:
        p = NetParams.run(ParamView(weights))
        total = None
        for i in idx:
            s = data[i]
            label = pseudo(i)
            out = forward_vars(ad.lift(s.left), ad.lift(s.right), p, net_cfg)
            l = disparity_loss(out["disparity"], label.values, label.valid)
            total = l if total is None else ad.add(total, l)
        return ad.mul(total, np.asarray(1.0 / len(idx), dtype=DTYPE))

    log = _loop(data, cfg, net_cfg, weights, loss_fn, eval_set)
    return weights, log


class SyntheticOracle:
    """Pseudo-label source backed by the generator's exact ground truth,
    optionally corrupted with per-sample seeded Gaussian noise.

    The noise seed is derived from the sample content, so repeated queries for
    the same pair return identical labels (frozen-oracle contract).
    """

    def __init__(self, noise_sigma: float = 0.0, seed: int = 0):
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)

    def __call__(self, sample: StereoSample) -> DisparityMap:
        gt = sample.gt.copy()
        if self.noise_sigma > 0:
            import zlib
            key = zlib.crc32(np.ascontiguousarray(sample.gt).tobytes())
            rng = np.random.Generator(np.random.Philox(
                np.random.SeedSequence((self.seed, key))))
            gt = (gt + rng.normal(0.0, self.noise_sigma, size=gt.shape)).astype(DTYPE)
            gt = np.clip(gt, 0.0, None)
        return DisparityMap(gt, sample.valid.copy())
