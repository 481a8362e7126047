"""Procedural 8-class colour-infrared landscapes for desk-scale runs.

Bands are (NIR, R, G).  Class appearance follows the legend descriptions:
dark water, bright sharp-edged buildings with cast shadows, linear roads,
neutral barren ground, textured deep-red forest, smooth lighter-red
herbaceous cover, striped pink crops and near-black shadow.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

LEGEND = {
    1: "Open Water",
    2: "Impervious Structures",
    3: "Impervious Surfaces",
    4: "Barren Land",
    5: "Forest/Woody Vegetation",
    6: "Herbaceous/Low Vegetation",
    7: "Cultivated Crops",
    8: "Unclassified",
}
WATER, STRUCT, ROAD, BARREN, FOREST, HERB, CROPS, SHADOW = range(1, 9)

# mean (NIR, R, G) digital numbers per class
CLASS_COLORS = np.array([
    [0, 0, 0],
    [28, 38, 62],
    [205, 192, 188],
    [150, 140, 138],
    [168, 152, 122],
    [165, 58, 62],
    [196, 108, 96],
    [222, 118, 142],
    [18, 14, 20],
], dtype=np.float32)


@dataclass
class SynthWorld:
    image: np.ndarray  # (3, H, W) uint8
    truth: np.ndarray  # (H, W) uint8, classes 1..8
    reference: np.ndarray  # (H/ref_res, W/ref_res) uint8 majority classes
    ref_res: int
    seed: int


def _smooth_noise(rng, shape, sigma):
    spectrum = ndimage.fourier_gaussian(np.fft.rfft2(rng.standard_normal(shape)), sigma, n=shape[1])
    f = np.fft.irfft2(spectrum, s=shape)
    return (f - f.mean()) / (f.std() + 1e-12)


def _draw_line(mask, rng, size, width):
    h, w = mask.shape
    if rng.random() < 0.5:
        y0, y1 = rng.integers(h), rng.integers(h)
        x0, x1 = 0, w - 1
    else:
        x0, x1 = rng.integers(w), rng.integers(w)
        y0, y1 = 0, h - 1
    n = 2 * max(h, w)
    ys = np.linspace(y0, y1, n)
    xs = np.linspace(x0, x1, n)
    for dy in range(-(width // 2), width - width // 2):
        for dx in range(-(width // 2), width - width // 2):
            yy = np.clip(np.round(ys + dy).astype(int), 0, h - 1)
            xx = np.clip(np.round(xs + dx).astype(int), 0, w - 1)
            mask[yy, xx] = True


def _labels(rng, size):
    h = w = size
    truth = np.full((h, w), HERB, dtype=np.uint8)

    # agricultural parcels on a jittered block grid
    block = max(size // 8, 32)
    parcel_kind = np.zeros((h, w), dtype=np.uint8)
    stripes = np.zeros((h, w), dtype=np.float32)
    yy, xx = np.mgrid[0:h, 0:w]
    for by in range(0, h, block):
        for bx in range(0, w, block):
            kind = rng.choice([HERB, CROPS, CROPS, BARREN, HERB])
            sl = (slice(by, by + block), slice(bx, bx + block))
            parcel_kind[sl] = kind
            if kind == CROPS:
                period = rng.uniform(4, 8)
                theta = rng.uniform(0, np.pi)
                phase = np.cos(theta) * xx[sl] + np.sin(theta) * yy[sl]
                stripes[sl] = np.sin(2 * np.pi * phase / period)
    truth[:] = parcel_kind

    forest = _smooth_noise(rng, (h, w), size / 24) > 0.15
    truth[forest] = FOREST
    barren = (_smooth_noise(rng, (h, w), size / 64) > 1.6) & ~forest
    truth[barren] = BARREN
    water = _smooth_noise(rng, (h, w), size / 20) < -1.45
    truth[water] = WATER

    # shadows cast south-east of forest edges
    shift = max(2, size // 256)
    cast = np.zeros_like(forest)
    cast[shift:, shift:] = forest[:-shift, :-shift]
    edge_shadow = cast & ~forest & ~water & (_smooth_noise(rng, (h, w), 6) > -0.3)
    edge_shadow = ndimage.binary_dilation(edge_shadow, iterations=1) & ~forest & ~water
    truth[edge_shadow] = SHADOW

    roads = np.zeros((h, w), dtype=bool)
    for _ in range(max(3, size // 256 + 2)):
        _draw_line(roads, rng, size, int(rng.integers(3, 6)))
    truth[roads & ~water] = ROAD
    truth[roads & water] = ROAD  # bridges

    # buildings near roads, each casting a short shadow
    near_road = ndimage.binary_dilation(roads, iterations=24) & ~roads & ~water
    cand = np.argwhere(near_road)
    n_buildings = int(size * size / 7000)
    buildings = np.zeros((h, w), dtype=bool)
    shadows = np.zeros((h, w), dtype=bool)
    if len(cand):
        for i in rng.choice(len(cand), size=min(n_buildings, len(cand)), replace=False):
            y, x = cand[i]
            bh, bw = rng.integers(6, 15, size=2)
            sl = (slice(y, y + bh), slice(x, x + bw))
            b = ~roads[sl] & ~water[sl]
            buildings[sl] |= b
            s = max(3, int(min(bh, bw) * 0.5))
            ssl = (slice(y + s, y + s + bh), slice(x + s, x + s + bw))
            sh = shadows[ssl]
            sh |= b[:sh.shape[0], :sh.shape[1]]
    truth[shadows & ~buildings & ~roads & ~water] = SHADOW
    truth[buildings] = STRUCT
    return truth, stripes


def _render(rng, truth, stripes):
    h, w = truth.shape
    size = max(h, w)
    img = CLASS_COLORS[truth].transpose(2, 0, 1).copy()

    # per-object tone variation
    lab, n = ndimage.label(truth == STRUCT)
    if n:
        tone = rng.uniform(-35, 30, size=n + 1).astype(np.float32)
        img += (tone[lab] * (lab > 0))[None]
    lab, n = ndimage.label(truth == ROAD)
    if n:
        tone = rng.uniform(-40, 15, size=n + 1).astype(np.float32)
        img += (tone[lab] * (lab > 0))[None]

    crops = truth == CROPS
    img[:, crops] *= (1 + 0.18 * stripes[crops])[None]

    forest = truth == FOREST
    canopy = _smooth_noise(rng, (h, w), 1.5) + 0.6 * rng.standard_normal((h, w))
    crowns = np.clip(1 + 0.22 * canopy, 0.45, 1.5).astype(np.float32)
    img[:, forest] *= crowns[forest][None]

    barren = truth == BARREN
    img[:, barren] *= (1 + 0.08 * _smooth_noise(rng, (h, w), 2)[barren])[None]

    herb = truth == HERB
    img[:, herb] *= (1 + 0.05 * _smooth_noise(rng, (h, w), 4)[herb])[None]

    # turbid water tint and illumination drift
    water = truth == WATER
    img[1:, water] += (12 * _smooth_noise(rng, (h, w), 10)[water])[None]
    light = 1 + 0.1 * _smooth_noise(rng, (h, w), size / 6)
    img *= light[None].astype(np.float32)

    img = ndimage.gaussian_filter(img, (0, 0.6, 0.6))
    img += rng.normal(0, 5, img.shape).astype(np.float32)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def majority_downsample(truth, res, n_classes=8):
    h, w = truth.shape
    hh, ww = -(-h // res), -(-w // res)
    pad = np.zeros((hh * res, ww * res), dtype=np.int64)
    pad[:h, :w] = truth
    blocks = pad.reshape(hh, res, ww, res).transpose(0, 2, 1, 3).reshape(hh, ww, -1)
    counts = np.stack([(blocks == c).sum(-1) for c in range(1, n_classes + 1)], -1)
    return (counts.argmax(-1) + 1).astype(np.uint8)


def synth_world(seed=0, size=1024, ref_res=30) -> SynthWorld:
    if size < 256:
        raise ValueError("synthetic world size must be >= 256")
    rng = np.random.default_rng(seed)
    truth, stripes = _labels(rng, size)
    image = _render(rng, truth, stripes)
    return SynthWorld(image, truth, majority_downsample(truth, ref_res), ref_res, seed)
