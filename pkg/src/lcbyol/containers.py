"""Self-describing raw raster container and the patch dataset directory format.

A container is a directory holding ``header.json`` and ``data.bin`` (little
endian, row-major, band-sequential).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
DTYPES = {"u8": np.dtype("u1"), "f32": np.dtype("<f4")}
IMAGE_BANDS = ["NIR", "R", "G"]


class DataError(Exception):
    """Malformed or missing data artefact."""


@dataclass
class RasterHeader:
    width: int
    height: int
    bands: int
    dtype: str = "u8"
    nodata: float | None = None
    band_semantics: list = field(default_factory=lambda: list(IMAGE_BANDS))
    pixel_size: float = 1.0
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {"width": self.width, "height": self.height, "bands": self.bands, "dtype": self.dtype,
             "nodata": self.nodata, "band_semantics": self.band_semantics, "pixel_size": self.pixel_size,
             "schema_version": self.schema_version}
        if self.extra:
            d["extra"] = self.extra
        return d


def write_raster(path, data, band_semantics=None, nodata=None, pixel_size=1.0, extra=None):
    """Write a (bands, H, W) or (H, W) array as a container directory."""
    path = Path(path)
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.dtype == np.uint8:
        dtype = "u8"
    elif arr.dtype in (np.float32, np.float64):
        dtype, arr = "f32", arr.astype("<f4")
    else:
        raise DataError(f"unsupported raster dtype {arr.dtype}")
    bands, h, w = arr.shape
    if band_semantics is None:
        band_semantics = list(IMAGE_BANDS) if bands == 3 and dtype == "u8" else ["class"] * bands
    header = RasterHeader(w, h, bands, dtype, nodata, list(band_semantics), pixel_size, extra=extra or {})
    path.mkdir(parents=True, exist_ok=True)
    (path / "header.json").write_text(json.dumps(header.to_dict(), indent=2, sort_keys=True))
    np.ascontiguousarray(arr).tofile(path / "data.bin")
    return header


def read_header(path) -> RasterHeader:
    path = Path(path)
    try:
        d = json.loads((path / "header.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"{path}: no header.json") from e
    return RasterHeader(d["width"], d["height"], d["bands"], d["dtype"], d.get("nodata"),
                        d.get("band_semantics", []), d.get("pixel_size", 1.0),
                        d.get("schema_version", SCHEMA_VERSION), d.get("extra", {}))


def read_raster(path, squeeze=True):
    path = Path(path)
    h = read_header(path)
    if h.dtype not in DTYPES:
        raise DataError(f"{path}: unknown dtype {h.dtype!r}")
    dt = DTYPES[h.dtype]
    expected = h.width * h.height * h.bands * dt.itemsize
    size = (path / "data.bin").stat().st_size if (path / "data.bin").exists() else -1
    if size != expected:
        raise DataError(f"{path}: data.bin has {size} bytes, header implies {expected}")
    arr = np.fromfile(path / "data.bin", dtype=dt).reshape(h.bands, h.height, h.width)
    if squeeze and h.bands == 1:
        arr = arr[0]
    return arr, h


# ---------------------------------------------------------------- patch dataset


@dataclass
class PatchEntry:
    id: int
    role: str  # labeled | pretrain | pretrain-val
    image: str
    fold: int | None = None
    label: str | None = None
    origin: tuple | None = None


def write_patch_dataset(root, entries, images, labels=None, meta=None):
    """Write one container per patch plus ``index.json``.

    ``images`` maps id -> (3, H, W) uint8; ``labels`` maps id -> (H, W) uint8.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    for e in entries:
        write_raster(root / e.image, images[e.id])
        if e.label is not None:
            write_raster(root / e.label, labels[e.id], band_semantics=["class"], nodata=0)
        index.append({"id": e.id, "role": e.role, "image": e.image, "fold": e.fold, "label": e.label,
                      "origin": list(e.origin) if e.origin is not None else None})
    doc = {"schema_version": SCHEMA_VERSION, "patches": index, "meta": meta or {}}
    (root / "index.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


class PatchDataset:
    """Read access to a patch dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            doc = json.loads((self.root / "index.json").read_text())
        except FileNotFoundError as e:
            raise DataError(f"{self.root}: no index.json; run `sample` first") from e
        self.meta = doc.get("meta", {})
        self.entries = [PatchEntry(p["id"], p["role"], p["image"], p.get("fold"), p.get("label"),
                                   tuple(p["origin"]) if p.get("origin") else None) for p in doc["patches"]]

    def select(self, role=None, fold=None):
        return [e for e in self.entries
                if (role is None or e.role == role) and (fold is None or e.fold == fold)]

    def load_images(self, entries):
        if not entries:
            return np.zeros((0, 3, 0, 0), dtype=np.uint8)
        return np.stack([read_raster(self.root / e.image, squeeze=False)[0] for e in entries])

    def load_labels(self, entries):
        out = []
        for e in entries:
            if e.label is None:
                raise DataError(f"patch {e.id} has no label")
            lab, _ = read_raster(self.root / e.label)
            if lab.max(initial=0) > 8:
                raise DataError(f"patch {e.id}: label values outside 0..8")
            out.append(lab)
        return np.stack(out)

    def fold_data(self, fold):
        entries = self.select("labeled", fold)
        if not entries:
            raise DataError(f"no labeled patches in fold {fold}")
        return self.load_images(entries), self.load_labels(entries)

    @property
    def n_folds(self):
        folds = {e.fold for e in self.entries if e.role == "labeled"}
        return len(folds)
