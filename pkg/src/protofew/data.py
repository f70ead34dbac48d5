"""Dataset ingestion, preprocessing, and the synthetic desk-scale fixture.

Real datasets are split-file driven image folders (``root/<class>/<files>``
with a ``filename,label,section`` CSV). The synthetic generator renders
seeded geometric patterns that are hard for raw-pixel classifiers but
learnable by a small encoder, so the whole pipeline can be exercised on a
CPU in minutes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractViolation, DataError
from .seeds import SYNTH_CLASS, SYNTH_IMAGE, derive_rng

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}

SECTIONS = ("train", "val", "test")


@dataclass(frozen=True)
class Normalization:
    """Channel-wise (value - mean) / std applied after resize."""

    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    @staticmethod
    def identity() -> "Normalization":
        return Normalization(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint class-name lists for the three protocol sections."""

    train: tuple
    val: tuple
    test: tuple

    def section(self, name: str) -> tuple:
        if name not in SECTIONS:
            raise ContractViolation(f"unknown split section {name!r}")
        return getattr(self, name)


class ImageRecord:
    """One image: a stable key plus a lazy decoder to HWC float32 in [0, 1]."""

    __slots__ = ("key", "class_name", "_loader", "_cache")

    def __init__(self, key: str, class_name: str, loader):
        self.key = key
        self.class_name = class_name
        self._loader = loader
        self._cache = None

    def load(self) -> np.ndarray:
        if self._cache is None:
            self._cache = self._loader()
        return self._cache

    def __repr__(self):
        return f"ImageRecord({self.key!r}, class={self.class_name!r})"


@dataclass
class ImageDataset:
    """An indexed image collection: class name -> ordered records.

    Index order is deterministic (sorted keys), decoding is lazy, and the
    dataset is read-only after construction.
    """

    root: str
    class_names: tuple
    index: dict
    normalization: Normalization = field(default_factory=Normalization)
    resolution: int | None = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def records(self, class_name: str) -> list:
        return self.index[class_name]

    def class_sizes(self) -> dict:
        return {c: len(self.index[c]) for c in self.class_names}

    def min_class_size(self) -> int:
        return min(len(self.index[c]) for c in self.class_names)

    def all_records(self) -> list:
        out = []
        for c in self.class_names:
            out.extend(self.index[c])
        return out

    def labeled_records(self) -> list:
        """(record, class_index) pairs, class index = position in class_names."""
        out = []
        for k, c in enumerate(self.class_names):
            out.extend((r, k) for r in self.index[c])
        return out

    def subset(self, class_names) -> "ImageDataset":
        missing = [c for c in class_names if c not in self.index]
        if missing:
            raise DataError(f"subset: classes not in dataset: {missing}")
        return replace(self, class_names=tuple(class_names),
                       index={c: self.index[c] for c in class_names})


# ---------------------------------------------------------------------------
# split files
# ---------------------------------------------------------------------------

def load_split(split_file) -> ClassSplit:
    """Parse a ``filename,label,section`` CSV into a validated ClassSplit.

    A class name appearing under two different sections is rejected, with
    the first offending line of each section named in the error.
    """
    path = Path(split_file)
    if not path.is_file():
        raise DataError(f"split file not found: {path}")
    seen: dict = {}          # label -> {section: first line number}
    order: dict = {s: [] for s in SECTIONS}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != ["filename", "label", "section"]:
            raise DataError(f"{path}: expected header 'filename,label,section', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            _, label, section = (c.strip() for c in row[:3])
            if section not in SECTIONS:
                raise DataError(f"{path}:{lineno}: unknown section {section!r}")
            lines = seen.setdefault(label, {})
            if section not in lines:
                lines[section] = lineno
                order[section].append(label)
    offenders = {lbl: lines for lbl, lines in seen.items() if len(lines) > 1}
    if offenders:
        parts = [
            f"{lbl!r} in " + ", ".join(f"{s} (line {ln})" for s, ln in sorted(lines.items()))
            for lbl, lines in sorted(offenders.items())
        ]
        raise DataError(f"{path}: classes assigned to multiple sections: " + "; ".join(parts))
    return ClassSplit(train=tuple(order["train"]), val=tuple(order["val"]),
                      test=tuple(order["test"]))


def _decode_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr


def load_dataset(root, split: ClassSplit, section: str,
                 normalization: Normalization | None = None) -> ImageDataset:
    """Index one split section of an image-folder tree.

    Every class in the section must exist as a directory with at least one
    decodable image; iteration order is sorted paths.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    classes = split.section(section)
    if not classes:
        raise DataError(f"split section {section!r} lists no classes")
    index: dict = {}
    for cname in classes:
        cdir = root / cname
        if not cdir.is_dir():
            raise DataError(f"missing class directory: {cdir}")
        files = sorted(p for p in cdir.iterdir()
                       if p.suffix.lower() in _IMAGE_SUFFIXES and p.is_file())
        if not files:
            raise DataError(f"class directory has no images: {cdir}")
        index[cname] = [
            ImageRecord(str(p), cname, (lambda q=p: _decode_image(q))) for p in files
        ]
    return ImageDataset(root=str(root), class_names=tuple(classes), index=index,
                        normalization=normalization or Normalization())


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

@lru_cache(maxsize=512)
def _interp_matrix(out_size: int, in_size: int, dtype_name: str = "float32") -> np.ndarray:
    """Bilinear interpolation weights [out, in], half-pixel convention."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    if in_size == out_size:
        np.fill_diagonal(m, 1.0)
    else:
        ratio = in_size / out_size
        for i in range(out_size):
            src = (i + 0.5) * ratio - 0.5
            src = min(max(src, 0.0), in_size - 1.0)
            lo = int(np.floor(src))
            hi = min(lo + 1, in_size - 1)
            frac = src - lo
            m[i, lo] += 1.0 - frac
            m[i, hi] += frac
    m = m.astype(np.dtype(dtype_name))
    m.flags.writeable = False
    return m


def resize_bilinear(chw: np.ndarray, resolution: int) -> np.ndarray:
    """Separable bilinear resize of a CHW image to resolution x resolution."""
    _, h, w = chw.shape
    if h == resolution and w == resolution:
        return chw
    name = chw.dtype.name if chw.dtype.name in ("float32", "float64") else "float32"
    mh = _interp_matrix(resolution, h, name)
    mw = _interp_matrix(resolution, w, name)
    return np.matmul(np.matmul(mh, chw.astype(mh.dtype, copy=False)),
                     mw.T).astype(chw.dtype, copy=False)


def _to_chw(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise DataError(f"preprocess: expected a 3-d image, got shape {arr.shape}")
    if 0 in arr.shape:
        raise DataError(f"preprocess: zero-dimension image {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    if arr.shape[0] == 3 and arr.shape[2] != 3:
        chw = arr
    elif arr.shape[2] == 3:
        chw = arr.transpose(2, 0, 1)
    elif arr.shape[0] == 3:
        chw = arr
    else:
        raise DataError(f"preprocess: cannot find a 3-channel axis in shape {arr.shape}")
    return np.ascontiguousarray(chw, dtype=np.float32)


def preprocess(image, resolution: int, normalization: Normalization) -> np.ndarray:
    """Decode-agnostic resize + normalize: any 3-channel image -> [3, R, R] float32."""
    if resolution < 1:
        raise DataError(f"preprocess: bad resolution {resolution}")
    chw = _to_chw(image)
    chw = resize_bilinear(chw, resolution)
    mean = np.asarray(normalization.mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(normalization.std, dtype=np.float32).reshape(3, 1, 1)
    return (chw - mean) / std


def batch_from_records(records, resolution: int,
                       normalization: Normalization) -> np.ndarray:
    """Stack preprocessed records into a [N, 3, R, R] float32 batch."""
    return np.stack([preprocess(r.load(), resolution, normalization) for r in records])


# ---------------------------------------------------------------------------
# synthetic fixture
# ---------------------------------------------------------------------------

_PALETTES = {
    # background base color families; per-class/-image jitter is added on top
    "A": ((0.35, 0.42, 0.52), 0.10),
    "B": ((0.55, 0.38, 0.26), 0.10),
    "C": ((0.30, 0.52, 0.34), 0.10),
}

# per-image nuisance strengths; tuned so raw-pixel nearest-centroid lands
# well above chance but below 95% while class geometry stays learnable
_RENDER = {
    "noise": 0.02,
    "translate": 0.10,
    "shape_jitter": 0.01,
    "tint": 0.08,
    "brightness": (0.65, 1.35),
    "bg_jitter": 0.02,
}


@dataclass(frozen=True)
class _Shape:
    kind: str            # disc | square | bar | ring
    cx: float            # center, fraction of resolution
    cy: float
    size: float          # radius/half-width, fraction of resolution
    angle: float         # bars only
    color: np.ndarray    # signed RGB offset


def _class_pattern(seed: int, k: int, palette: str) -> tuple:
    if palette not in _PALETTES:
        raise DataError(f"unknown palette {palette!r}; have {sorted(_PALETTES)}")
    base, spread = _PALETTES[palette]
    rng = derive_rng(seed, SYNTH_CLASS, k)
    bg = np.clip(np.asarray(base) + rng.uniform(-spread, spread, 3), 0.05, 0.95)
    cells = rng.choice(9, size=3, replace=False)
    shapes = []
    for cell in cells:
        cx = (cell % 3) / 3 + 1 / 6 + rng.uniform(-0.04, 0.04)
        cy = (cell // 3) / 3 + 1 / 6 + rng.uniform(-0.04, 0.04)
        kind = rng.choice(["disc", "square", "bar", "ring"])
        size = rng.uniform(0.10, 0.17)
        angle = rng.uniform(0.0, np.pi)
        color = rng.uniform(0.3, 0.6, 3) * rng.choice([-1.0, 1.0], 3)
        shapes.append(_Shape(str(kind), cx, cy, size, angle, color))
    return bg, tuple(shapes)


def _shape_mask(shape: _Shape, res: int, dx: float, dy: float,
                yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    cx = shape.cx * res + dx
    cy = shape.cy * res + dy
    r = shape.size * res
    edge = 1.2  # soft edge in pixels, keeps gradients of the pattern smooth
    u = xx - cx
    v = yy - cy
    if shape.kind == "disc":
        d = np.sqrt(u * u + v * v) - r
    elif shape.kind == "square":
        d = np.maximum(np.abs(u), np.abs(v)) - r
    elif shape.kind == "ring":
        d = np.abs(np.sqrt(u * u + v * v) - r) - 0.35 * r
    else:  # bar
        ca, sa = np.cos(shape.angle), np.sin(shape.angle)
        along = u * ca + v * sa
        across = -u * sa + v * ca
        d = np.maximum(np.abs(across) - 0.35 * r, np.abs(along) - 1.6 * r)
    return np.clip(0.5 - d / edge, 0.0, 1.0)


def _render_image(bg: np.ndarray, shapes, res: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    canvas = np.empty((3, res, res), dtype=np.float64)
    canvas[:] = (bg + rng.uniform(-_RENDER["bg_jitter"], _RENDER["bg_jitter"], 3))[:, None, None]
    dx, dy = rng.uniform(-_RENDER["translate"], _RENDER["translate"], 2) * res
    for shape in shapes:
        jx, jy = rng.uniform(-_RENDER["shape_jitter"], _RENDER["shape_jitter"], 2) * res
        mask = _shape_mask(shape, res, dx + jx, dy + jy, yy, xx)
        canvas += shape.color[:, None, None] * mask[None, :, :]
    canvas *= rng.uniform(*_RENDER["brightness"])
    canvas += rng.uniform(-_RENDER["tint"], _RENDER["tint"], 3)[:, None, None]
    canvas += rng.normal(0.0, _RENDER["noise"], canvas.shape)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32).transpose(1, 2, 0)


def synth_dataset(num_classes: int, per_class: int, resolution: int, seed: int,
                  palette: str = "A",
                  normalization: Normalization | None = None) -> ImageDataset:
    """Seed-deterministic synthetic dataset.

    Class identity is carried by the geometric layout (shape kinds,
    positions, orientations, contrast signs); per-image translation,
    brightness/tint jitter and noise keep raw-pixel classifiers honest
    while leaving the structure learnable.
    """
    if num_classes < 1 or per_class < 1 or resolution < 8:
        raise ContractViolation(
            f"synth_dataset: bad arguments ({num_classes}, {per_class}, {resolution})")
    index: dict = {}
    names = []
    for k in range(num_classes):
        bg, shapes = _class_pattern(seed, k, palette)
        cname = f"synth{k:03d}"
        names.append(cname)
        recs = []
        for i in range(per_class):
            rng = derive_rng(seed, SYNTH_IMAGE, k, i)
            arr = _render_image(bg, shapes, resolution, rng)
            rec = ImageRecord(f"{cname}/{i:04d}", cname, (lambda a=arr: a))
            rec._cache = arr
            recs.append(rec)
        index[cname] = recs
    return ImageDataset(root=f"synthetic:{palette}:{seed}", class_names=tuple(names),
                        index=index, normalization=normalization or Normalization(),
                        resolution=resolution)


def synth_split(dataset: ImageDataset, n_train: int, n_val: int, n_test: int) -> ClassSplit:
    """Deterministic class split of a synthetic dataset by index order."""
    if n_train + n_val + n_test > dataset.num_classes:
        raise DataError(
            f"split {n_train}+{n_val}+{n_test} exceeds {dataset.num_classes} classes")
    names = dataset.class_names
    return ClassSplit(train=tuple(names[:n_train]),
                      val=tuple(names[n_train:n_train + n_val]),
                      test=tuple(names[n_train + n_val:n_train + n_val + n_test]))


def export_dataset(dataset: ImageDataset, root) -> None:
    """Write a dataset to the ``root/<class>/<image>.png`` folder layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for cname in dataset.class_names:
        cdir = root / cname
        cdir.mkdir(exist_ok=True)
        for i, rec in enumerate(dataset.index[cname]):
            arr = np.clip(rec.load() * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(cdir / f"{i:04d}.png")


def write_split_csv(path, split: ClassSplit) -> None:
    """Emit the ``filename,label,section`` convention for a class split."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label", "section"])
        for section in SECTIONS:
            for cname in split.section(section):
                writer.writerow([f"{cname}/0000.png", cname, section])
