"""Gradient-based synthesis of class-conditional images from a frozen teacher.

Modes build on each other: noise_only optimizes the classification loss
alone; deepdream adds the total-variation + l2 image prior; deepinversion
adds the batch-norm statistic matching term; adaptive adds a teacher/student
competition term (1 minus the Jensen-Shannon divergence of their outputs).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .optim import Adam
from .nn import Model, FeatureStats
from .data import Preprocess, invert_preprocess

MODES = ("noise_only", "deepdream", "deepinversion", "adaptive")


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"synthesis loss became non-finite at iteration {iteration}")
        self.iteration = iteration


# -- regularizers ----------------------------------------------------------------


def _shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """One-pixel shift of an NCHW tensor with edge replication."""
    if dy == 1:
        x = T.concat([x[:, :, :1, :], x[:, :, :-1, :]], axis=2)
    elif dy == -1:
        x = T.concat([x[:, :, 1:, :], x[:, :, -1:, :]], axis=2)
    if dx == 1:
        x = T.concat([x[:, :, :, :1], x[:, :, :, :-1]], axis=3)
    elif dx == -1:
        x = T.concat([x[:, :, :, 1:], x[:, :, :, -1:]], axis=3)
    return x


def _l2norm(t: Tensor) -> Tensor:
    return T.sqrt(T.tsum(t * t))


def r_tv(x: Tensor) -> Tensor:
    """Sum of l2 norms between the image and its four one-pixel shifts
    (horizontal, vertical, both diagonals), edges replicated."""
    if x.data.ndim != 4:
        raise ValueError(f"r_tv expects an NCHW tensor, got shape {x.shape}")
    total = None
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        term = _l2norm(x - _shift(x, dy, dx))
        total = term if total is None else total + term
    return total


def r_l2(x: Tensor) -> Tensor:
    return _l2norm(x)


def r_prior(x: Tensor, alpha_tv: float, alpha_l2: float) -> Tensor:
    return Tensor(np.asarray(alpha_tv)) * r_tv(x) + Tensor(np.asarray(alpha_l2)) * r_l2(x)


def r_feature(taps: FeatureStats, target_stats) -> Tensor:
    """Per-layer l2 distances between batch feature stats of the synthesized
    images and target (running or subset-estimated) stats, summed over layers."""
    if len(taps.means) != len(target_stats):
        raise ValueError(f"{len(taps.means)} taps vs {len(target_stats)} target stat entries")
    total = None
    for (mu, var), (tm, tv) in zip(zip(taps.means, taps.vars), target_stats):
        if mu.data.shape != np.shape(tm):
            raise ValueError(f"tap channel count {mu.data.shape} vs target {np.shape(tm)}")
        dt = mu.data.dtype
        term = _l2norm(mu - Tensor(np.asarray(tm, dtype=dt))) + \
            _l2norm(var - Tensor(np.asarray(tv, dtype=dt)))
        total = term if total is None else total + term
    return total


def _kl_bits(p: Tensor, m: Tensor, axis: int) -> Tensor:
    # entries with p == 0 contribute 0 by convention; mask keeps log finite
    mask = (p.data > 0).astype(p.data.dtype)
    pad = 1.0 - mask
    ln2 = float(np.log(2.0))
    safe_p = p + Tensor(pad)
    safe_m = m + Tensor(pad)
    per = Tensor(mask) * p * (T.log(safe_p) - T.log(safe_m))
    return T.tsum(per, axis=axis) * Tensor(np.asarray(1.0 / ln2))


def r_compete(p_t: Tensor, p_s: Tensor) -> Tensor:
    """1 - JS(p_t, p_s) in bits; 1 when the distributions agree, 0 when disjoint.

    Accepts single probability vectors or (batch, classes) rows; batch rows
    are averaged.
    """
    p_t = p_t if isinstance(p_t, Tensor) else Tensor(p_t)
    p_s = p_s if isinstance(p_s, Tensor) else Tensor(p_s)
    if p_t.data.shape != p_s.data.shape:
        raise ValueError(f"distribution shapes differ: {p_t.shape} vs {p_s.shape}")
    axis = -1
    for name, p in (("p_t", p_t), ("p_s", p_s)):
        sums = p.data.sum(axis=axis)
        if np.any(np.abs(sums - 1.0) > 1e-4) or np.any(p.data < -1e-7):
            raise ValueError(f"{name} is not normalized (sum deviates from 1 by more than 1e-4)")
    m = (p_t + p_s) * Tensor(np.asarray(0.5))
    js = (_kl_bits(p_t, m, axis) + _kl_bits(p_s, m, axis)) * Tensor(np.asarray(0.5))
    one_minus = Tensor(np.asarray(1.0)) - js
    return one_minus if one_minus.data.ndim == 0 else T.tmean(one_minus)


# -- config and batches ------------------------------------------------------------


@dataclass
class SynthesisConfig:
    mode: str = "deepinversion"
    alpha_tv: float = 2.5e-5
    alpha_l2: float = 3e-8
    alpha_f: float = 1.0
    alpha_c: float = 10.0
    lr: float = 0.05
    iterations: int = 500
    batch: int = 64
    targets: list | None = None  # None: uniform-random per image
    jitter_px: int = 2
    random_flip: bool = True
    clip: Preprocess | None = None
    multires: dict | None = None  # {"low_res": int, "low_iters": int, "high_iters": int}
    seed: int = 0
    stats_override: list | None = None  # [(mean, var), ...] in tap order, replaces BN stats

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown synthesis mode {self.mode!r}")
        for name in ("alpha_tv", "alpha_l2", "alpha_f", "alpha_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch <= 0:
            raise ValueError("batch must be positive")

    def config_hash(self) -> str:
        d = asdict(self)
        d["clip"] = list(self.clip.mean) + list(self.clip.std) if self.clip else None
        d["stats_override"] = None if self.stats_override is None else "override"
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ImageBatch:
    pixels: np.ndarray          # N x C x H x W, preprocessed space
    targets: np.ndarray         # intended class per image
    provenance: dict = field(default_factory=dict)
    soft_labels: np.ndarray | None = None  # teacher probabilities, stored at synthesis time

    def __len__(self):
        return len(self.targets)


class ImageStore:
    """Append-only collection of synthesized batches, tagged by round."""

    def __init__(self):
        self._batches: list[ImageBatch] = []

    def append(self, batch: ImageBatch) -> None:
        self._batches.append(batch)

    @property
    def batches(self) -> tuple:
        return tuple(self._batches)

    def __len__(self):
        return sum(len(b) for b in self._batches)

    def all_pixels(self) -> np.ndarray:
        return np.concatenate([b.pixels for b in self._batches])

    def all_soft_labels(self) -> np.ndarray:
        return np.concatenate([b.soft_labels for b in self._batches])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform random sample of n images across every stored batch."""
        if not self._batches:
            raise ValueError("image store is empty")
        sizes = [len(b) for b in self._batches]
        total = sum(sizes)
        idx = rng.integers(0, total, n)
        bounds = np.cumsum(sizes)
        out = np.empty((n,) + self._batches[0].pixels.shape[1:], dtype=self._batches[0].pixels.dtype)
        for i, j in enumerate(idx):
            b = int(np.searchsorted(bounds, j, side="right"))
            out[i] = self._batches[b].pixels[j - (bounds[b - 1] if b else 0)]
        return out


# -- synthesis ---------------------------------------------------------------------


def clip_images(pixels: np.ndarray, p: Preprocess) -> np.ndarray:
    """Clamp preprocessed pixels to the representable range of real [0,1] images."""
    c = pixels.shape[1]
    if c != len(p.mean):
        raise ValueError(f"clip preprocess has {len(p.mean)} channels, images have {c}")
    lo = np.asarray(p.lo, dtype=pixels.dtype).reshape(1, c, 1, 1)
    hi = np.asarray(p.hi, dtype=pixels.dtype).reshape(1, c, 1, 1)
    return np.clip(pixels, lo, hi)


def _frozen(model: Model):
    flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    return flags


def _restore(model: Model, flags):
    for p, f in zip(model.parameters(), flags):
        p.requires_grad = f


def _resolve_targets(cfg: SynthesisConfig, classes: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.targets is None:
        return rng.integers(0, classes, cfg.batch).astype(np.int64)
    t = np.asarray(cfg.targets, dtype=np.int64)
    if len(t) != cfg.batch:
        raise ValueError(f"{len(t)} targets for batch of {cfg.batch}")
    return t


def _optimize(pixels: Tensor, targets: np.ndarray, teacher: Model, cfg: SynthesisConfig,
              iterations: int, rng: np.random.Generator, student: Model | None,
              target_stats) -> None:
    need_taps = cfg.mode in ("deepinversion", "adaptive") and cfg.alpha_f > 0
    opt = Adam([pixels], lr=cfg.lr)
    for it in range(iterations):
        x = pixels
        if cfg.random_flip and rng.random() < 0.5:
            x = T.flip(x, 3)
        if cfg.jitter_px > 0:
            dy, dx = rng.integers(-cfg.jitter_px, cfg.jitter_px + 1, 2)
            x = T.roll(x, (int(dy), int(dx)), (2, 3))
        logits, taps = teacher.forward(x, mode="eval", want_taps=need_taps)
        loss = T.cross_entropy(logits, targets)
        if cfg.mode != "noise_only":
            if cfg.alpha_tv > 0:
                loss = loss + Tensor(np.asarray(cfg.alpha_tv)) * r_tv(x)
            if cfg.alpha_l2 > 0:
                loss = loss + Tensor(np.asarray(cfg.alpha_l2)) * r_l2(x)
        if need_taps:
            loss = loss + Tensor(np.asarray(cfg.alpha_f)) * r_feature(taps, target_stats)
        if cfg.mode == "adaptive" and cfg.alpha_c > 0:
            s_logits = student.logits(x)
            loss = loss + Tensor(np.asarray(cfg.alpha_c)) * r_compete(
                T.softmax(logits, axis=1), T.softmax(s_logits, axis=1))
        if not np.isfinite(loss.data):
            raise DivergenceError(it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if cfg.clip is not None:
            pixels.data = clip_images(pixels.data, cfg.clip)


def synthesize(teacher: Model, cfg: SynthesisConfig, student: Model | None = None,
               round_index: int = 0) -> ImageBatch:
    """Optimize a batch of pixels against the teacher; returns the final images
    together with the teacher's stored soft labels."""
    cfg.validate()
    if cfg.mode == "adaptive" and student is None:
        raise ValueError("adaptive mode requires a student model")
    rng = np.random.default_rng(cfg.seed)
    c, h, w = teacher.in_shape
    targets = _resolve_targets(cfg, teacher.class_count, rng)
    pixels = Tensor(rng.standard_normal((cfg.batch, c, h, w)), requires_grad=True)
    t_flags = _frozen(teacher)
    s_flags = _frozen(student) if student is not None else None
    try:
        target_stats = cfg.stats_override if cfg.stats_override is not None \
            else teacher.bn_running_stats()
        _optimize(pixels, targets, teacher, cfg, cfg.iterations, rng, student, target_stats)
    finally:
        _restore(teacher, t_flags)
        if student is not None:
            _restore(student, s_flags)
    with T.no_grad():
        probs = T.softmax(teacher.logits(Tensor(pixels.data)), axis=1).data.copy()
    return ImageBatch(pixels.data.copy(), targets,
                      provenance={"round": round_index, "config": cfg.config_hash()},
                      soft_labels=probs)


def synthesize_multires(teacher: Model, cfg: SynthesisConfig,
                        student: Model | None = None, round_index: int = 0) -> ImageBatch:
    """Two-phase synthesis: optimize at low resolution, nearest-neighbor
    upsample, then refine at full resolution."""
    cfg.validate()
    if not cfg.multires:
        raise ValueError("multires schedule not set")
    low_res = int(cfg.multires["low_res"])
    low_iters = int(cfg.multires["low_iters"])
    high_iters = int(cfg.multires["high_iters"])
    c, h, w = teacher.in_shape
    if h % low_res or w % low_res or h != w:
        raise ValueError(f"low_res {low_res} must evenly divide square resolution {h}x{w}")
    factor = h // low_res
    if low_iters == 0:
        flat = SynthesisConfig(**{**asdict(cfg), "multires": None, "iterations": high_iters,
                                  "clip": cfg.clip, "stats_override": cfg.stats_override})
        return synthesize(teacher, flat, student, round_index)
    rng = np.random.default_rng(cfg.seed)
    targets = _resolve_targets(cfg, teacher.class_count, rng)
    pixels = Tensor(rng.standard_normal((cfg.batch, c, low_res, low_res)), requires_grad=True)
    t_flags = _frozen(teacher)
    s_flags = _frozen(student) if student is not None else None
    try:
        target_stats = cfg.stats_override if cfg.stats_override is not None \
            else teacher.bn_running_stats()
        _optimize(pixels, targets, teacher, cfg, low_iters, rng, student, target_stats)
        up = np.repeat(np.repeat(pixels.data, factor, axis=2), factor, axis=3)
        pixels = Tensor(up, requires_grad=True)
        _optimize(pixels, targets, teacher, cfg, high_iters, rng, student, target_stats)
    finally:
        _restore(teacher, t_flags)
        if student is not None:
            _restore(student, s_flags)
    with T.no_grad():
        probs = T.softmax(teacher.logits(Tensor(pixels.data)), axis=1).data.copy()
    return ImageBatch(pixels.data.copy(), targets,
                      provenance={"round": round_index, "config": cfg.config_hash()},
                      soft_labels=probs)


# -- feature statistics from an image subset ----------------------------------------


def stats_from_images(model: Model, images: np.ndarray, k: int,
                      chunk: int = 128) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (mean, variance) of batch-norm inputs over the first k images,
    pluggable wherever BN running stats are used."""
    if k <= 0:
        raise ValueError("subset size k must be positive")
    if k > len(images):
        raise ValueError(f"k={k} exceeds {len(images)} available images")
    subset = images[:k]
    sums = None
    sqs = None
    counts = None
    with T.no_grad():
        for start in range(0, k, chunk):
            xb = Tensor(subset[start:start + chunk])
            _, taps = model.forward(xb, mode="eval", want_taps=True)
            n = xb.data.shape[0]
            if sums is None:
                sums = [np.zeros_like(m.data, dtype=np.float64) for m in taps.means]
                sqs = [np.zeros_like(m.data, dtype=np.float64) for m in taps.means]
                counts = [0.0] * len(taps.means)
            for i, (m, v) in enumerate(zip(taps.means, taps.vars)):
                # chunk moments -> sums of x and x^2 (per channel, over N*H*W)
                sums[i] += n * m.data.astype(np.float64)
                sqs[i] += n * (v.data.astype(np.float64) + m.data.astype(np.float64) ** 2)
                counts[i] += n
    out = []
    for s, q, n in zip(sums, sqs, counts):
        mean = s / n
        out.append((mean, q / n - mean ** 2))
    return out


# -- diversity projection --------------------------------------------------------------


def diversity_projection(features: np.ndarray) -> np.ndarray:
    """Project N x D features onto their first two principal components."""
    features = np.asarray(features, dtype=np.float64)
    n, d = features.shape
    if n < 3 or d < 2:
        raise ValueError(f"need at least 3 points and 2 dims, got {features.shape}")
    centered = features - features.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    if np.max(np.diag(cov)) <= 1e-12:
        raise ValueError("zero-variance features cannot be projected")
    evals, evecs = np.linalg.eigh(cov)
    top = evecs[:, np.argsort(evals)[::-1][:2]]
    for j in range(2):
        if top[np.argmax(np.abs(top[:, j])), j] < 0:
            top[:, j] = -top[:, j]
    return centered @ top


# -- export -----------------------------------------------------------------------------


def save_ppm(path: str, image01: np.ndarray) -> None:
    """Write one C x H x W [0,1] image as binary PPM (P6)."""
    c, h, w = image01.shape
    if c != 3:
        raise ValueError(f"PPM export needs 3 channels, got {c}")
    px = (np.clip(image01, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(px.transpose(1, 2, 0).tobytes())


def export_batch(batch: ImageBatch, out_dir: str, preprocess: Preprocess,
                 teacher: Model) -> str:
    """PPM per image plus a manifest (index, target, teacher top-1, confidence)."""
    os.makedirs(out_dir, exist_ok=True)
    images01 = invert_preprocess(batch.pixels, preprocess)
    with T.no_grad():
        probs = T.softmax(teacher.logits(Tensor(batch.pixels)), axis=1).data
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("index\ttarget\tteacher_top1\tconfidence\n")
        for i in range(len(batch)):
            save_ppm(os.path.join(out_dir, f"img_{i:05d}.ppm"), images01[i])
            top1 = int(np.argmax(probs[i]))
            f.write(f"{i}\t{int(batch.targets[i])}\t{top1}\t{probs[i, top1]:.6f}\n")
    return manifest
