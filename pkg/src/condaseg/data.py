"""Dataset acquisition and synthesis: MNIST, MNIST-M and MNIST-thin.

On-disk layout produced by :func:`build_dataset`::

    <root>/<name>/<split>/img_000000.png
    <root>/<name>/<split>/mask_000000.png
    <root>/<name>/<split>/manifest.jsonl

The first line of ``manifest.jsonl`` is a ``{"dataset": {...}}`` header, every
following line is one sample record (index, digit_class, relative paths and the
sha256 of each file).

Raw MNIST is looked up in ``<root>/raw/mnist`` (idx files, optionally gzipped)
and real BSDS500 images in ``<root>/raw/BSDS500``. Without BSDS500 the MNIST-M
builder falls back to procedural textures and flags the manifest with
``non_paper_texture``.
"""
from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import os
import shutil
import urllib.request
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from skimage.morphology import disk, skeletonize

from .seeding import numpy_rng

log = logging.getLogger(__name__)

DATASETS = ("mnist", "mnist_m", "mnist_thin")
SPLITS = ("train", "val", "test")
SPLIT_SIZES = {"train": 50_000, "val": 10_000, "test": 10_000}
DEFAULT_RESOLUTION = 64
# Binarization used for every dataset mask. 0.4 reproduces the reported mean
# digit areas (MNIST ~14.6%, MNIST-thin ~5.2%); derive_mask itself defaults to 0.5.
MASK_THRESHOLD = 0.4
EROSION_RADIUS = 4
BUILDER_VERSION = 1

_MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte",
                     "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
                     "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    "train_labels": ("train-labels-idx1-ubyte",
                     "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
                     "d53e105ee54ea40749a09fcbcd1e9432"),
    "test_images": ("t10k-images-idx3-ubyte",
                    "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
                    "9fb629c4189551a2d022fa330f9573f3"),
    "test_labels": ("t10k-labels-idx1-ubyte",
                    "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
                    "ec29112dd5afa0611ce80d1b7f02629c"),
}
_MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)


class AcquisitionError(RuntimeError):
    """Raw source material is missing or fails its checksum."""


class LeakageError(AssertionError):
    """A target-domain ground-truth mask was requested during adaptation."""


def data_root() -> Path:
    env = os.environ.get("CONDASEG_DATA_ROOT")
    return Path(env) if env else Path.home() / ".cache" / "condaseg"


# --------------------------------------------------------------------------- types

@dataclass(frozen=True)
class DomainLabel:
    id: str

    def __post_init__(self):
        if self.id not in ("source", "target"):
            raise ValueError(f"unknown domain {self.id!r}")

    @property
    def index(self) -> int:
        return 0 if self.id == "source" else 1

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(2, dtype=np.float32)
        v[self.index] = 1.0
        return v

    @property
    def other(self) -> "DomainLabel":
        return TARGET if self.id == "source" else SOURCE


SOURCE = DomainLabel("source")
TARGET = DomainLabel("target")


@dataclass
class Sample:
    image: np.ndarray  # (H, W) or (H, W, 3), float32 in [0, 1]
    mask: np.ndarray  # (H, W), uint8 in {0, 1}
    digit_class: int = -1
    domain: DomainLabel | None = None

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ spatially")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask must be binary")


@dataclass
class DatasetManifest:
    name: str
    split: str
    count: int
    resolution: int
    checksum: str
    generator_seed: int
    non_paper_texture: bool = False
    mask_threshold: float = MASK_THRESHOLD
    builder_version: int = BUILDER_VERSION
    directory: Path | None = field(default=None, compare=False, repr=False)
    records: list[dict] = field(default_factory=list, compare=False, repr=False)

    def header(self) -> dict:
        h = asdict(self)
        h.pop("directory")
        h.pop("records")
        return h

    def image_path(self, i: int) -> Path:
        return self.directory / self.records[i]["image"]

    def mask_path(self, i: int) -> Path:
        return self.directory / self.records[i]["mask"]

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        with open(path) as fh:
            lines = fh.read().splitlines()
        header = json.loads(lines[0])["dataset"]
        records = [json.loads(line) for line in lines[1:]]
        return cls(**header, directory=path.parent, records=records)


# --------------------------------------------------------------------------- MNIST

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _md5(path: Path) -> str:
    return hashlib.md5(path.read_bytes()).hexdigest()


def _download_mnist(root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for fname, _, md5 in _MNIST_FILES.values():
        target = root / (fname + ".gz")
        if target.exists():
            continue
        for mirror in _MNIST_MIRRORS:
            try:
                with urllib.request.urlopen(mirror + fname + ".gz", timeout=30) as resp:
                    data = resp.read()
            except OSError as exc:
                log.warning("download of %s from %s failed: %s", fname, mirror, exc)
                continue
            if hashlib.md5(data).hexdigest() == md5:
                target.write_bytes(data)
                break
        else:
            raise AcquisitionError(
                f"could not fetch {fname}.gz; place the MNIST idx files in {root} "
                "(e.g. from the `mnist-data` npm tarball or any MNIST mirror)")


def _read_idx(root: Path, key: str) -> np.ndarray:
    fname, sha_raw, md5_gz = _MNIST_FILES[key]
    raw, gz = root / fname, root / (fname + ".gz")
    if raw.exists():
        digest = _sha256(raw)
        if digest != sha_raw:
            raise AcquisitionError(f"{raw}: checksum mismatch (sha256 {digest}, expected {sha_raw})")
        data = raw.read_bytes()
    elif gz.exists():
        digest = _md5(gz)
        if digest != md5_gz:
            raise AcquisitionError(f"{gz}: checksum mismatch (md5 {digest}, expected {md5_gz})")
        data = gzip.decompress(gz.read_bytes())
    else:
        raise AcquisitionError(f"missing MNIST file {fname} in {root}")
    ndim = data[3]
    dims = [int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def mnist_arrays(split: str, root: str | Path | None = None, download: bool = True):
    """Raw uint8 digits (N, 28, 28) and labels for one split."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    root = Path(root) if root is not None else data_root() / "raw" / "mnist"
    prefix = "test" if split == "test" else "train"
    missing = [f for f, _, _ in _MNIST_FILES.values()
               if not (root / f).exists() and not (root / (f + ".gz")).exists()]
    if missing and download:
        _download_mnist(root)
    images, labels = _read_idx(root, f"{prefix}_images"), _read_idx(root, f"{prefix}_labels")
    if split == "train":
        return images[:50_000], labels[:50_000]
    if split == "val":
        return images[50_000:], labels[50_000:]
    return images, labels


def derive_mask(image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(image) > threshold).astype(np.uint8)


def load_mnist(split: str, root: str | Path | None = None,
               threshold: float = MASK_THRESHOLD) -> list[Sample]:
    """MNIST at native 28x28 with thresholded masks."""
    images, labels = mnist_arrays(split, root)
    out = []
    for img, lab in zip(images, labels):
        x = img.astype(np.float32) / 255.0
        out.append(Sample(x, derive_mask(x, threshold), int(lab)))
    return out


# --------------------------------------------------------------------------- synthesis

def resize_bilinear(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of (H, W) or (N, H, W) float images, clipped to [0, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    y = F.interpolate(x[:, None], size=(size, size), mode="bilinear", align_corners=False)[:, 0]
    y = y.clamp_(0.0, 1.0).numpy()
    return y[0] if squeeze else y


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
    return mask[np.ix_(rows, cols)]


def synthesize_mnist_m(mnist_image: np.ndarray, patch: np.ndarray) -> np.ndarray:
    """Blend a digit into a colour patch: ``|patch - digit|`` per channel."""
    mnist_image = np.asarray(mnist_image, dtype=np.float32)
    patch = np.asarray(patch, dtype=np.float32)
    if patch.ndim != 3 or patch.shape[2] != 3 or patch.shape[:2] != mnist_image.shape:
        raise ValueError(f"patch {patch.shape} does not match digit {mnist_image.shape} x RGB")
    return np.abs(patch - mnist_image[..., None])


def sample_bsds_patch(bsds_image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = bsds_image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than patch size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return bsds_image[top:top + size, left:left + size]


def procedural_texture(shape: tuple[int, int], rng: np.random.Generator,
                       octaves: int = 5) -> np.ndarray:
    """Multi-octave value noise pushed through a random colour ramp; uint8 RGB."""
    h, w = shape

    def noise(base: int) -> np.ndarray:
        acc = np.zeros((h, w), dtype=np.float32)
        amp, total = 1.0, 0.0
        for o in range(octaves):
            cells = base * 2 ** o
            grid = torch.from_numpy(rng.random((1, 1, cells + 1, cells + 1), dtype=np.float32))
            layer = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=True)[0, 0]
            acc += amp * layer.numpy()
            total += amp
            amp *= 0.5
        acc /= total
        return (acc - acc.min()) / max(float(acc.max() - acc.min()), 1e-6)

    hue = noise(int(rng.integers(2, 5)))
    shade = noise(int(rng.integers(3, 8)))
    stops = rng.random((4, 3), dtype=np.float32)
    pos = hue * (len(stops) - 1)
    lo = np.floor(pos).astype(int).clip(0, len(stops) - 2)
    t = (pos - lo)[..., None]
    rgb = stops[lo] * (1 - t) + stops[lo + 1] * t
    rgb *= (0.55 + 0.45 * shade)[..., None]
    return np.round(rgb.clip(0, 1) * 255).astype(np.uint8)


class TexturePool:
    """Source images for MNIST-M patches: BSDS500 if present, else procedural."""

    def __init__(self, images: list[np.ndarray], procedural: bool):
        if not images:
            raise AcquisitionError("texture pool is empty")
        self.images = images
        self.procedural = procedural

    @classmethod
    def from_bsds(cls, root: str | Path) -> "TexturePool":
        files = sorted(p for p in Path(root).rglob("*") if p.suffix.lower() in (".jpg", ".png"))
        if not files:
            raise AcquisitionError(f"no BSDS500 images under {root}")
        return cls([np.asarray(Image.open(p).convert("RGB")) for p in files], procedural=False)

    @classmethod
    def procedural_pool(cls, seed: int, n: int = 200, shape=(321, 481)) -> "TexturePool":
        rng = numpy_rng(seed, "textures")
        return cls([procedural_texture(shape, rng) for _ in range(n)], procedural=True)

    @classmethod
    def default(cls, seed: int, bsds_root: str | Path | None = None) -> "TexturePool":
        root = Path(bsds_root) if bsds_root is not None else data_root() / "raw" / "BSDS500"
        if root.exists():
            try:
                return cls.from_bsds(root)
            except AcquisitionError:
                pass
        log.warning("BSDS500 not found at %s; using procedural textures (non_paper_texture)", root)
        return cls.procedural_pool(seed)

    def patch(self, size: int, rng: np.random.Generator, max_tries: int = 100) -> np.ndarray:
        for _ in range(max_tries):
            img = self.images[int(rng.integers(len(self.images)))]
            try:
                return sample_bsds_patch(img, size, rng)
            except ValueError:
                continue
        raise AcquisitionError(f"no texture image of at least {size}x{size}")


def thin_digit(binary: np.ndarray, skeleton: np.ndarray, radius: int = EROSION_RADIUS) -> np.ndarray:
    """Erode a binary digit with a disk and add back its skeleton."""
    eroded = ndimage.binary_erosion(binary.astype(bool), structure=disk(radius))
    return (eroded | skeleton.astype(bool)).astype(np.uint8)


def synthesize_mnist_thin(mnist_image: np.ndarray, resolution: int = DEFAULT_RESOLUTION,
                          threshold: float = MASK_THRESHOLD, digit_class: int = -1) -> Sample:
    """Resize, binarize, erode by a radius-4 disk, OR with the digit's skeleton.

    The skeleton is taken on the native-resolution digit and upsampled with
    nearest neighbour, so strokes erased by the erosion survive as 2-3 px lines.
    """
    mnist_image = np.asarray(mnist_image, dtype=np.float32)
    binary = resize_bilinear(mnist_image, resolution) > threshold
    skeleton = resize_nearest(skeletonize(mnist_image > threshold), resolution)
    mask = thin_digit(binary, skeleton)
    return Sample(mask.astype(np.float32), mask, digit_class)


# --------------------------------------------------------------------------- building

def _png_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)


def _render_split(name: str, split: str, resolution: int, seed: int, limit: int | None,
                  mnist_root, textures: TexturePool | None) -> Iterator[tuple[np.ndarray, np.ndarray, int]]:
    raw, labels = mnist_arrays(split, mnist_root)
    if limit is not None:
        raw, labels = raw[:limit], labels[:limit]
    rng = numpy_rng(seed, f"{name}/{split}/patches")
    chunk = 1000
    for start in range(0, len(raw), chunk):
        digits = raw[start:start + chunk].astype(np.float32) / 255.0
        resized = resize_bilinear(digits, resolution)
        for k in range(len(digits)):
            lab = int(labels[start + k])
            if name == "mnist":
                yield _to_u8(resized[k]), derive_mask(resized[k], MASK_THRESHOLD), lab
            elif name == "mnist_m":
                patch = textures.patch(resolution, rng).astype(np.float32) / 255.0
                img = synthesize_mnist_m(resized[k], patch)
                yield _to_u8(img), derive_mask(resized[k], MASK_THRESHOLD), lab
            else:
                s = synthesize_mnist_thin(digits[k], resolution)
                yield s.mask * 255, s.mask, lab


def _existing(directory: Path, header: dict) -> DatasetManifest | None:
    try:
        m = DatasetManifest.load(directory)
    except (FileNotFoundError, json.JSONDecodeError, KeyError, TypeError):
        return None
    h = m.header()
    if any(h.get(k) != v for k, v in header.items()) or len(m.records) != m.count:
        return None
    return m


def build_dataset(name: str, resolution: int = DEFAULT_RESOLUTION, seed: int = 0,
                  out: str | Path | None = None, *, splits=SPLITS, limit: int | None = None,
                  mnist_root=None, bsds_root=None) -> dict[str, DatasetManifest]:
    """Materialize every split of ``name`` under ``out/<name>/<split>``.

    Idempotent: a split whose manifest already matches (name, resolution,
    seed, count) is left untouched. ``limit`` caps each split (tests, smoke runs).
    """
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASETS}")
    if resolution % 4:
        raise ValueError("resolution must be divisible by 4")
    out = Path(out) if out is not None else data_root()
    textures = None
    manifests = {}
    for split in splits:
        count = SPLIT_SIZES[split] if limit is None else min(limit, SPLIT_SIZES[split])
        directory = out / name / split
        want = {"name": name, "split": split, "count": count, "resolution": resolution,
                "generator_seed": seed, "mask_threshold": MASK_THRESHOLD,
                "builder_version": BUILDER_VERSION}
        found = _existing(directory, want)
        if found is not None:
            manifests[split] = found
            continue
        if name == "mnist_m" and textures is None:
            textures = TexturePool.default(seed, bsds_root)
        if directory.exists():
            shutil.rmtree(directory)
        directory.mkdir(parents=True)
        records = []
        it = _render_split(name, split, resolution, seed, limit, mnist_root, textures)
        for i, (img, mask, lab) in enumerate(it):
            rec = {"index": i, "digit_class": lab,
                   "image": f"img_{i:06d}.png", "mask": f"mask_{i:06d}.png"}
            for key, arr in (("image", img), ("mask", mask * 255)):
                data = _png_bytes(np.ascontiguousarray(arr, dtype=np.uint8))
                (directory / rec[key]).write_bytes(data)
                rec[f"{key}_sha256"] = hashlib.sha256(data).hexdigest()
            records.append(rec)
        lines = [json.dumps(r, sort_keys=True) for r in records]
        checksum = hashlib.sha256("\n".join(lines).encode()).hexdigest()
        manifest = DatasetManifest(
            name=name, split=split, count=len(records), resolution=resolution,
            checksum=checksum, generator_seed=seed,
            non_paper_texture=bool(textures is not None and textures.procedural),
            directory=directory, records=records)
        tmp = directory / "manifest.jsonl.tmp"
        tmp.write_text("\n".join([json.dumps({"dataset": manifest.header()}, sort_keys=True)] + lines) + "\n")
        tmp.replace(directory / "manifest.jsonl")
        manifests[split] = manifest
        log.info("built %s/%s: %d samples", name, split, len(records))
    return manifests


# --------------------------------------------------------------------------- reading

class SegDataset:
    """Random access to a built split, with an audit log of every file read.

    ``masks_allowed=False`` turns any ground-truth mask read into a
    :class:`LeakageError`; used for the unlabeled target domain.
    """

    def __init__(self, manifest: DatasetManifest | str | Path, limit: int | None = None,
                 masks_allowed: bool = True, channels: int | None = None):
        if not isinstance(manifest, DatasetManifest):
            manifest = DatasetManifest.load(manifest)
        self.manifest = manifest
        self.count = manifest.count if limit is None else min(limit, manifest.count)
        self.masks_allowed = masks_allowed
        self.channels = channels
        self.access_log: list[str] = []

    def __len__(self) -> int:
        return self.count

    def _read(self, path: Path) -> np.ndarray:
        self.access_log.append(str(path))
        with Image.open(path) as im:
            return np.asarray(im)

    def image(self, i: int) -> np.ndarray:
        """(C, H, W) float32 in [0, 1]."""
        a = self._read(self.manifest.image_path(i)).astype(np.float32) / 255.0
        a = a[None] if a.ndim == 2 else a.transpose(2, 0, 1)
        if self.channels is not None and a.shape[0] != self.channels:
            if a.shape[0] != 1:
                raise ValueError(f"cannot map {a.shape[0]} channels to {self.channels}")
            a = np.repeat(a, self.channels, axis=0)
        return a

    def mask(self, i: int) -> np.ndarray:
        path = self.manifest.mask_path(i)
        if not self.masks_allowed:
            raise LeakageError(f"target mask access attempted: {path}")
        return (self._read(path) > 127).astype(np.float32)[None]

    def mask_reads(self) -> list[str]:
        return [p for p in self.access_log if Path(p).name.startswith("mask_")]

    def batch(self, indices, masks: bool = True) -> tuple[torch.Tensor, torch.Tensor | None]:
        imgs = np.stack([self.image(i) for i in indices])
        x = torch.from_numpy(to_model_range(imgs))
        y = torch.from_numpy(np.stack([self.mask(i) for i in indices])) if masks else None
        return x, y


def to_model_range(x):
    return x * 2.0 - 1.0


def from_model_range(x):
    return (x + 1.0) / 2.0


def epoch_order(count: int, shuffle_seed: int | None, epoch: int) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(count)
    return numpy_rng(shuffle_seed, f"shuffle/epoch{epoch}").permutation(count)


def batch_iterator(dataset: SegDataset | DatasetManifest, batch_size: int,
                   shuffle_seed: int | None = None, epoch: int = 0,
                   masks: bool = True) -> Iterator[tuple[torch.Tensor, torch.Tensor | None]]:
    """One epoch of (images in [-1, 1], masks in {0, 1}) batches.

    The order is a pure function of ``(shuffle_seed, epoch)``; ``None`` keeps
    file order. The final batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not isinstance(dataset, SegDataset):
        dataset = SegDataset(dataset)
    order = epoch_order(len(dataset), shuffle_seed, epoch)
    for start in range(0, len(order), batch_size):
        yield dataset.batch(order[start:start + batch_size], masks=masks)


def cycling_indices(count: int, batch_size: int, shuffle_seed: int, step: int) -> np.ndarray:
    """Indices of batch ``step`` in an endless stream of reshuffled epochs."""
    pos = np.arange(step * batch_size, (step + 1) * batch_size)
    epochs, offsets = np.divmod(pos, count)
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        sel = epochs == e
        out[sel] = epoch_order(count, shuffle_seed, int(e))[offsets[sel]]
    return out


@dataclass
class ForegroundStats:
    mean: float
    fractions: np.ndarray
    histogram: np.ndarray
    bin_edges: np.ndarray


def foreground_stats(manifest: DatasetManifest | SegDataset, bins: int = 50) -> ForegroundStats:
    ds = manifest if isinstance(manifest, SegDataset) else SegDataset(manifest)
    fractions = np.array([ds.mask(i).mean() for i in range(len(ds))], dtype=np.float64)
    hist, edges = np.histogram(fractions, bins=bins, range=(0.0, 1.0))
    mean = float(fractions.mean()) if len(fractions) else 0.0
    return ForegroundStats(mean, fractions, hist, edges)
