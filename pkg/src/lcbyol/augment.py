"""Augmentation pipelines on (3, H, W) float images in [0, 1] and (H, W) masks.

All sampling goes through a ``numpy.random.Generator``; ``patch_rng`` derives
independent, counter-based streams so per-patch results do not depend on
processing order.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class AugPolicy:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotate_p: float = 1.0
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.2
    gray_p: float = 0.2
    blur_p: float = 1.0
    blur_kernel: int = 25
    blur_sigma: tuple = (0.1, 2.0)

    def __post_init__(self):
        self.blur_sigma = tuple(self.blur_sigma)
        for name in ("hflip_p", "vflip_p", "rotate_p", "jitter_p", "gray_p", "blur_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        lo, hi = self.blur_sigma
        if not 0 < lo <= hi:
            raise ValueError(f"blur sigma range {self.blur_sigma} must be positive and ordered")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur kernel size must be odd")
        if min(self.brightness, self.contrast, self.saturation, self.hue) < 0:
            raise ValueError("jitter strengths must be >= 0")

    @classmethod
    def identity(cls):
        return cls(0, 0, 0, 0, 0, 0, 0, 0, 0, 0)

    def to_dict(self):
        return asdict(self)


def _words(v):
    if isinstance(v, (tuple, list)):
        return [w for item in v for w in _words(item)]
    return [int(v) % 2 ** 64]  # negative counters wrap


def patch_rng(seed, *counters) -> np.random.Generator:
    """Counter-based generator: the stream depends only on (seed, counters)."""
    return np.random.default_rng(_words([seed, *counters]))


# ---------------------------------------------------------------- dihedral group


@dataclass(frozen=True)
class Dihedral:
    k: int = 0
    hflip: bool = False
    vflip: bool = False


DIHEDRAL_GROUP = tuple(Dihedral(k, h, False) for k, h in itertools.product(range(4), (False, True)))


def _flip(x, axis):
    if isinstance(x, np.ndarray):
        return np.flip(x, axis)
    return x.flip(axis)


def _rot(x, k):
    if isinstance(x, np.ndarray):
        return np.rot90(x, k, axes=(-2, -1))
    return x.rot90(k, dims=(-2, -1))


def dihedral_apply(x, d: Dihedral):
    """Rotate by ``d.k`` quarter turns, then flip horizontally, then vertically.

    Works on numpy arrays and torch tensors; acts on the last two axes.
    """
    if d.k % 2 and x.shape[-1] != x.shape[-2]:
        raise ValueError(f"quarter-turn rotation needs square spatial dims, got {tuple(x.shape[-2:])}")
    x = _rot(x, d.k % 4)
    if d.hflip:
        x = _flip(x, -1)
    if d.vflip:
        x = _flip(x, -2)
    return x


def dihedral_invert(x, d: Dihedral):
    if d.k % 2 and x.shape[-1] != x.shape[-2]:
        raise ValueError(f"quarter-turn rotation needs square spatial dims, got {tuple(x.shape[-2:])}")
    if d.vflip:
        x = _flip(x, -2)
    if d.hflip:
        x = _flip(x, -1)
    return _rot(x, -(d.k % 4))


def sample_dihedral(rng: np.random.Generator, hflip_p=0.5, vflip_p=0.5, rotate_p=1.0) -> Dihedral:
    h = bool(rng.random() < hflip_p)
    v = bool(rng.random() < vflip_p)
    k = int(rng.integers(4)) if rng.random() < rotate_p else 0
    return Dihedral(k, h, v)


# ---------------------------------------------------------------- photometric


def rgb_to_hsv(img):
    r, g, b = img
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v]).astype(img.dtype)


def hsv_to_rgb(hsv):
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b]).astype(hsv.dtype)


def grayscale(img):
    gray = np.tensordot(GRAY_WEIGHTS, img, axes=1).astype(img.dtype)
    return np.broadcast_to(gray, img.shape).copy()


def adjust_brightness(img, factor):
    return img * np.float32(factor)


def adjust_contrast(img, factor):
    mean = np.float32(np.tensordot(GRAY_WEIGHTS, img, axes=1).mean())
    return mean + np.float32(factor) * (img - mean)


def adjust_saturation_hue(img, sat_factor=1.0, hue_shift=0.0):
    # bands (NIR, R, G) stand in for (R, G, B): HSV is only defined for 3 channels
    hsv = rgb_to_hsv(np.clip(img, 0, 1))
    hsv[1] = np.clip(hsv[1] * np.float32(sat_factor), 0, 1)
    hsv[0] = (hsv[0] + np.float32(hue_shift)) % 1.0
    return hsv_to_rgb(hsv)


def _check_three_band(img):
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"colour operations need a 3-band (3, H, W) image, got {img.shape}")


def color_jitter(img, strengths, rng: np.random.Generator):
    """Brightness, contrast, saturation and hue jitter in that order.

    ``strengths`` is (brightness, contrast, saturation, hue).  Factors are drawn
    uniformly from [max(0, 1 - s), 1 + s]; the hue shift from [-s, s].
    """
    _check_three_band(img)
    b, c, s, h = strengths
    fb = rng.uniform(max(0.0, 1 - b), 1 + b)
    fc = rng.uniform(max(0.0, 1 - c), 1 + c)
    fs = rng.uniform(max(0.0, 1 - s), 1 + s)
    fh = rng.uniform(-h, h)
    img = np.clip(adjust_brightness(img, fb), 0, 1)
    img = np.clip(adjust_contrast(img, fc), 0, 1)
    return np.clip(adjust_saturation_hue(img, fs, fh), 0, 1)


def gaussian_kernel1d(sigma, size=25):
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma, kernel=25):
    """Separable Gaussian blur with half-sample symmetric (reflect) borders."""
    k = gaussian_kernel1d(sigma, kernel)
    out = ndimage.correlate1d(img.astype(np.float64), k, axis=-1, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=-2, mode="reflect")
    return out.astype(img.dtype)


# ---------------------------------------------------------------- pipelines


def photometric(img, policy: AugPolicy, rng: np.random.Generator):
    if rng.random() < policy.jitter_p:
        img = color_jitter(img, (policy.brightness, policy.contrast, policy.saturation, policy.hue), rng)
    if rng.random() < policy.gray_p:
        img = grayscale(img)
    if rng.random() < policy.blur_p:
        img = gaussian_blur(img, rng.uniform(*policy.blur_sigma), policy.blur_kernel)
    return np.clip(img, 0, 1).astype(np.float32)


def augment_image(img, policy: AugPolicy, rng: np.random.Generator):
    d = sample_dihedral(rng, policy.hflip_p, policy.vflip_p, policy.rotate_p)
    return photometric(np.ascontiguousarray(dihedral_apply(img, d)), policy, rng)


@dataclass
class ViewPair:
    v1: np.ndarray
    v2: np.ndarray


def two_views(patch, policy: AugPolicy, rng: np.random.Generator) -> ViewPair:
    _check_three_band(patch)
    return ViewPair(augment_image(patch, policy, rng), augment_image(patch, policy, rng))


def joint_augment(patch, mask, policy: AugPolicy, rng: np.random.Generator, return_transform=False):
    """Same geometric transform on image and mask; photometric jitter on the image only."""
    if patch.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"image {patch.shape} and mask {mask.shape} are not aligned")
    d = sample_dihedral(rng, policy.hflip_p, policy.vflip_p, policy.rotate_p)
    img = photometric(np.ascontiguousarray(dihedral_apply(patch, d)), policy, rng)
    m = np.ascontiguousarray(dihedral_apply(mask, d))
    if return_transform:
        return img, m, d
    return img, m
