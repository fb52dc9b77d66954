"""Image ingestion, stratified fold planning and synthetic texture datasets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import kernels
from .errors import ConfigError, DataError, FormatError, IOFailure
from .model import rng_stream

log = logging.getLogger(__name__)

CRC_CLASSES = ("ADI", "BACK", "DEB", "LYM", "MUC", "MUS", "NORM", "STR", "TUM")
IMAGE_SUFFIXES = (".png", ".ppm")
SUBSETS = ("train", "val", "test")


@dataclass
class DatasetIndex:
    root: Path
    samples: list[tuple[str, int]]
    class_names: list[str]
    skipped: int = 0

    @property
    def labels(self) -> list[int]:
        return [c for _, c in self.samples]

    def path(self, i: int) -> Path:
        return self.root / self.samples[i][0]


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (OSError, UnidentifiedImageError, SyntaxError):
        return False


def scan_dataset(root) -> DatasetIndex:
    """Index ``<root>/<class_name>/*.png|*.ppm``; class ids follow sorted directory names."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class directories under {root}")
    samples, skipped = [], 0
    for cid, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        kept = 0
        for f in files:
            if _readable(f):
                samples.append((f.relative_to(root).as_posix(), cid))
                kept += 1
            else:
                skipped += 1
        if kept == 0:
            raise DataError(f"class directory {name!r} contains no readable images")
    if skipped:
        log.warning("skipped %d unreadable files under %s", skipped, root)
    samples.sort(key=lambda s: s[0])
    return DatasetIndex(root, samples, classes, skipped)


def decode_image(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG or binary PPM (P6) to a ``uint8 [H, W, 3]`` array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt == "PPM":
                with open(path, "rb") as fh:
                    if fh.read(2) != b"P6":
                        raise FormatError(f"{path}: only binary P6 PPM is supported")
            elif fmt != "PNG":
                raise FormatError(f"{path}: unsupported image format {fmt}")
            if im.mode != "RGB":
                raise FormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, SyntaxError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    except FileNotFoundError as exc:
        raise IOFailure(str(exc)) from None
    return arr.copy()


def normalize(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Map pixel values in [0, 255] to [0, 1] by dividing by 255."""
    return np.asarray(img, dtype=dtype) / dtype(255)


def resize_to(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an ``[H, W, C]`` image to ``size x size`` (float output)."""
    if size < 1:
        raise ConfigError("resize target must be positive")
    arr = np.asarray(img)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr.copy()
    return kernels.bilinear(arr[None], size, size)[0]


def load_images(index: DatasetIndex, size: int, ids: Sequence[int] | None = None) -> np.ndarray:
    """Decode, resize and normalize the selected samples into one float32 batch."""
    ids = range(len(index.samples)) if ids is None else ids
    out = [normalize(resize_to(decode_image(index.path(i)), size)) for i in ids]
    return np.stack(out) if out else np.zeros((0, size, size, 3), np.float32)


# --------------------------------------------------------------------------- fold plans


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: list[dict[str, np.ndarray]]  # per fold: subset name -> sorted sample indices
    labels: np.ndarray = field(repr=False)

    def subset(self, fold: int, name: str) -> np.ndarray:
        return self.folds[fold][name]

    def to_text(self) -> str:
        lines = []
        for f, fold in enumerate(self.folds):
            for name in SUBSETS:
                for i in fold[name]:
                    lines.append(f"{f},{name},{int(i)},{int(self.labels[i])}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        try:
            Path(path).write_text(self.to_text(), encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from exc

    @classmethod
    def read(cls, path) -> "FoldPlan":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot read {path}: {exc}") from exc
        rows: dict[int, dict[str, list[int]]] = {}
        labels: dict[int, int] = {}
        for ln, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                f, name, idx, cid = line.split(",")
                f, idx, cid = int(f), int(idx), int(cid)
            except ValueError:
                raise FormatError(f"{path}:{ln}: expected '<fold>,<subset>,<index>,<class_id>'") from None
            if name not in SUBSETS:
                raise FormatError(f"{path}:{ln}: unknown subset {name!r}")
            rows.setdefault(f, {s: [] for s in SUBSETS})[name].append(idx)
            labels[idx] = cid
        if not rows:
            raise FormatError(f"{path}: empty fold plan")
        k = max(rows) + 1
        n = max(labels) + 1
        lab = np.array([labels.get(i, -1) for i in range(n)])
        folds = [{s: np.array(sorted(rows.get(f, {}).get(s, [])), dtype=np.int64) for s in SUBSETS} for f in range(k)]
        return cls(k, -1, folds, lab)


def stratified_splits(labels: Sequence[int], k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified k-fold plan with each held-out block halved into test and val.

    Per class the indices are shuffled and cut into ``k`` contiguous blocks.
    Fold ``f`` tests on the first (smaller) half of block ``f``, validates on
    the rest of it, and trains on the other blocks.
    """
    if k < 2:
        raise ConfigError(f"fold count must be at least 2, got {k}")
    labels = np.asarray(labels, dtype=np.int64)
    rng = rng_stream(seed, "split")
    folds = [{s: [] for s in SUBSETS} for _ in range(k)]
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 2 * k:
            raise DataError(f"class {int(c)} has {members.size} samples; needs at least {2 * k} for {k} folds")
        blocks = np.array_split(rng.permutation(members), k)
        for f in range(k):
            held = blocks[f]
            n_test = held.size // 2
            folds[f]["test"].extend(held[:n_test])
            folds[f]["val"].extend(held[n_test:])
            for g in range(k):
                if g != f:
                    folds[f]["train"].extend(blocks[g])
    as_arrays = [{s: np.sort(np.array(fold[s], dtype=np.int64)) for s in SUBSETS} for fold in folds]
    return FoldPlan(k, seed, as_arrays, labels)


# --------------------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 4
    per_class: int = 100
    size: int = 64
    family: str = "gratings"
    planted: bool = True  # class 0 only ever appears in the designated quadrant
    quadrant: int = 0  # 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right
    background: float = 0.1  # dark, so zero padding adds little edge signal at the borders


@dataclass
class SynthDataset:
    images: np.ndarray  # uint8 [N, S, S, 3]
    labels: np.ndarray
    class_names: list[str]
    regions: np.ndarray  # quadrant holding each image's class texture, -1 for full frame
    spec: SynthSpec

    def normalized(self) -> np.ndarray:
        return normalize(self.images)


def quadrant_slices(size: int, q: int) -> tuple[slice, slice]:
    h = size // 2
    return slice(0, h) if q < 2 else slice(h, size), slice(0, h) if q % 2 == 0 else slice(h, size)


def _class_texture(c: int, n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Oriented grating with a class-specific orientation, frequency and tint."""
    theta = np.pi * c / n + rng.uniform(-0.1, 0.1)
    freq = (2.0 + 1.5 * c) / size * 2 * np.pi
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    wave = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    hue = 2 * np.pi * c / n
    tint = 0.5 + 0.35 * np.array([np.cos(hue), np.cos(hue - 2 * np.pi / 3), np.cos(hue + 2 * np.pi / 3)])
    return tint[None, None, :] + 0.3 * wave[..., None]


def synth_dataset(spec: SynthSpec, seed: int = 0) -> SynthDataset:
    """Generate a balanced set of parametric texture images.

    Every image starts as dark noise around ``spec.background``. Without
    ``planted`` the class grating fills the frame. With ``planted`` each
    grating fills one quadrant: always ``spec.quadrant`` for class 0 and a
    random one for the others, so only class 0 has a fixed location for
    Grad-CAM to recover.
    """
    if spec.n_classes < 2:
        raise ConfigError("synthetic datasets need at least 2 classes")
    if spec.size < 32 or spec.size % 32:
        raise ConfigError(f"synthetic image size must be a multiple of 32, got {spec.size}")
    if spec.family != "gratings":
        raise ConfigError(f"unknown texture family {spec.family!r}")
    if spec.per_class < 1:
        raise ConfigError("per_class must be positive")
    if not 0 <= spec.background <= 1:
        raise ConfigError("background level must be in [0, 1]")
    rng = rng_stream(seed, "synth")
    s, n = spec.size, spec.n_classes
    images, labels, regions = [], [], []
    for c in range(n):
        for _ in range(spec.per_class):
            img = spec.background + 0.08 * rng.standard_normal((s, s, 3))
            tex = _class_texture(c, n, s, rng) + 0.05 * rng.standard_normal((s, s, 3))
            if spec.planted:
                q = spec.quadrant if c == 0 else int(rng.integers(4))
                ys, xs = quadrant_slices(s, q)
                img[ys, xs] = tex[ys, xs]
            else:
                q = -1
                img = tex
            images.append(np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))
            labels.append(c)
            regions.append(q)
    width = len(str(n - 1))
    names = [f"class_{c:0{width}d}" for c in range(n)]
    return SynthDataset(np.stack(images), np.array(labels), names, np.array(regions), spec)


def write_dataset(ds: SynthDataset, root) -> list[Path]:
    """Write a synthetic dataset as a ``<root>/<class>/<class>_<i>.png`` tree."""
    root = Path(root)
    paths = []
    try:
        counters = {}
        for img, lab in zip(ds.images, ds.labels):
            name = ds.class_names[lab]
            i = counters.get(name, 0)
            counters[name] = i + 1
            d = root / name
            d.mkdir(parents=True, exist_ok=True)
            p = d / f"{name}_{i:05d}.png"
            Image.fromarray(img, "RGB").save(p, format="PNG")
            paths.append(p)
    except OSError as exc:
        raise IOFailure(f"cannot write dataset under {root}: {exc}") from exc
    return paths
