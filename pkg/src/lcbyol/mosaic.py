"""Sliding-window classification of large rasters with Gaussian-weighted blending.

Windows are predicted independently (one forward per window per model), then
blended into float64 sums in row-major window order.  Workers only produce
window predictions; the merge is sequential, so any worker count gives
bit-identical output.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import DIHEDRAL_GROUP, dihedral_apply, dihedral_invert, patch_rng

log = logging.getLogger(__name__)


@dataclass
class MosaicConfig:
    patch: int = 256
    stride: int = 64
    sigma: float = 64.0
    tta: bool = False
    models: list = field(default_factory=list)
    seed: int = 0
    workers: int | None = None

    def __post_init__(self):
        if not 0 < self.stride <= self.patch:
            raise ValueError(f"stride must lie in (0, patch], got {self.stride}")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")


def gaussian_kernel(size=256, sigma=64.0):
    """exp(-((x - c)^2 + (y - c)^2) / (2 sigma^2)) with c = (size - 1) / 2."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    c = (size - 1) / 2
    d = (np.arange(size) - c) ** 2
    if np.isinf(sigma):
        return np.ones((size, size))
    return np.exp(-(d[:, None] + d[None, :]) / (2 * sigma ** 2))


def _axis_origins(length, patch, stride):
    if length < patch:
        raise ValueError(f"extent {length} is smaller than the patch {patch}; pad first")
    out = list(range(0, length - patch + 1, stride))
    if out[-1] != length - patch:
        out.append(length - patch)  # clamped final window
    return out


def windows(extent, patch=256, stride=64):
    """Row-major (row, col) window origins covering ``extent`` = (width, height)."""
    width, height = extent
    rows = _axis_origins(height, patch, stride)
    cols = _axis_origins(width, patch, stride)
    return [(r, c) for r in rows for c in cols]


@dataclass
class MosaicAccumulator:
    prob_sum: np.ndarray  # (C, H, W) float64
    weight_sum: np.ndarray  # (H, W) float64

    @classmethod
    def create(cls, n_classes, height, width):
        return cls(np.zeros((n_classes, height, width)), np.zeros((height, width)))

    @property
    def extent(self):
        return self.weight_sum.shape[1], self.weight_sum.shape[0]


def blend(acc: MosaicAccumulator, probs, origin, kernel):
    """Add ``probs * kernel`` and ``kernel`` to the window at ``origin``; nothing else changes."""
    r, c = origin
    _, ph, pw = probs.shape
    h, w = acc.weight_sum.shape
    if r < 0 or c < 0 or r + ph > h or c + pw > w:
        raise ValueError(f"window at ({r}, {c}) of size {ph}x{pw} exceeds the {h}x{w} extent")
    if kernel.shape != (ph, pw):
        raise ValueError("kernel and window sizes differ")
    acc.prob_sum[:, r:r + ph, c:c + pw] += np.asarray(probs, dtype=np.float64) * kernel
    acc.weight_sum[r:r + ph, c:c + pw] += kernel
    return acc


def finalize(acc: MosaicAccumulator):
    """Weighted-mean probabilities and the argmax class map (codes 1..C, lowest index wins ties)."""
    if (acc.weight_sum <= 0).any():
        raise ValueError("some pixels were never covered by a window")
    probs = acc.prob_sum / acc.weight_sum
    return probs, (np.argmax(probs, axis=0) + 1).astype(np.uint8)


def as_predictor(model):
    """Callable (N, 3, P, P) -> probabilities for nets models or plain callables."""
    if hasattr(model, "predict_proba"):
        model.eval()
        return model.predict_proba
    return model


def ensemble_predict(patch, models, tta=False, rng=None, seed=0, window_index=0):
    """Average class probabilities over ``models`` for one (3, P, P) float patch.

    With TTA each model sees its own random dihedral transform of the patch and
    its output is mapped back.  Without ``rng`` the transform for model m is
    drawn from the counter stream (seed, window_index, m).
    """
    if not models:
        raise ValueError("empty ensemble")
    x = np.asarray(patch, dtype=np.float32)
    total = None
    with torch.no_grad():
        for m, model in enumerate(models):
            if tta:
                g = rng if rng is not None else patch_rng(seed, window_index, m)
                d = DIHEDRAL_GROUP[int(g.integers(len(DIHEDRAL_GROUP)))]
                xin = np.ascontiguousarray(dihedral_apply(x, d))
            else:
                d, xin = None, x
            out = as_predictor(model)(torch.from_numpy(xin)[None])[0].numpy()
            if d is not None:
                out = np.ascontiguousarray(dihedral_invert(out, d))
            out = out.astype(np.float64)
            if total is None:
                total = out
            elif out.shape != total.shape:
                raise ValueError("ensemble members disagree on the class count")
            else:
                total += out
    return total / len(models)


def _pad_small(img, patch):
    """Reflect-pad a raster smaller than one patch; returns the padded array and the crop."""
    _, h, w = img.shape
    ph, pw = max(0, patch - h), max(0, patch - w)
    if not ph and not pw:
        return img, None
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge"), (h, w)


def default_workers():
    env = os.environ.get("LCBYOL_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


@dataclass
class MosaicResult:
    classes: np.ndarray  # (H, W) uint8
    probs: np.ndarray | None  # (C, H, W) float32 when requested
    n_windows: int


def classify_raster(raster, models, config: MosaicConfig, return_probs=False, n_classes=None) -> MosaicResult:
    """Classify a (3, H, W) raster (uint8 or float in [0, 1]) with the ensemble."""
    raster = np.asarray(raster)
    if raster.ndim != 3 or raster.shape[0] != 3:
        raise ValueError(f"expected a 3-band (3, H, W) raster, got {raster.shape}")
    img = raster.astype(np.float32) / 255.0 if raster.dtype == np.uint8 else raster.astype(np.float32)
    img, crop = _pad_small(img, config.patch)
    _, h, w = img.shape
    kernel = gaussian_kernel(config.patch, config.sigma)
    origins = windows((w, h), config.patch, config.stride)
    rows = sorted({r for r, _ in origins})
    by_row = [[(i, o) for i, o in enumerate(origins) if o[0] == r] for r in rows]
    p = config.patch

    def predict_row(items):
        outs = []
        for idx, (r, c) in items:
            try:
                outs.append(ensemble_predict(img[:, r:r + p, c:c + p], models, config.tta,
                                             seed=config.seed, window_index=idx))
            except Exception as exc:
                raise RuntimeError(f"window {idx} at (row {r}, col {c}) failed: {exc}") from exc
        return outs

    acc = None
    workers = config.workers or default_workers()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for items, outs in zip(by_row, pool.map(predict_row, by_row)):
            for (_, origin), probs in zip(items, outs):
                if acc is None:
                    acc = MosaicAccumulator.create(n_classes or probs.shape[0], h, w)
                blend(acc, probs, origin, kernel)
    probs, classes = finalize(acc)
    if crop is not None:
        probs, classes = probs[:, :crop[0], :crop[1]], classes[:crop[0], :crop[1]]
    return MosaicResult(np.ascontiguousarray(classes),
                        np.ascontiguousarray(probs, dtype=np.float32) if return_probs else None, len(origins))


def reference_classify(raster, models, config: MosaicConfig):
    """Naive single-pass implementation: every window straight into one full-size accumulator."""
    img = raster.astype(np.float32) / 255.0 if raster.dtype == np.uint8 else raster.astype(np.float32)
    _, h, w = img.shape
    p = config.patch
    kernel = gaussian_kernel(p, config.sigma)
    prob_sum, weight_sum = None, np.zeros((h, w))
    for idx, (r, c) in enumerate(windows((w, h), p, config.stride)):
        probs = ensemble_predict(img[:, r:r + p, c:c + p], models, config.tta, seed=config.seed, window_index=idx)
        if prob_sum is None:
            prob_sum = np.zeros((probs.shape[0], h, w))
        prob_sum[:, r:r + p, c:c + p] += probs * kernel
        weight_sum[r:r + p, c:c + p] += kernel
    probs = prob_sum / weight_sum
    return probs, (np.argmax(probs, axis=0) + 1).astype(np.uint8)
