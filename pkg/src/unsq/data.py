"""Synthetic EM-like segmentation data, on-disk rasters and manifests.

Layout of a split directory::

    <root>/<split>/manifest.json
    <root>/<split>/image_0000.pgm   8-bit binary PGM (P5), intensities q/255
    <root>/<split>/mask_0000.pgm    P5 with values 0 (background) / 255 (foreground)

``manifest.json`` schema (format "unsq-dataset", version 1)::

    {"format": "unsq-dataset", "version": 1, "split": "train",
     "height": 64, "width": 64,
     "entries": [{"image": "image_0000.pgm", "mask": "mask_0000.pgm", "h": 64, "w": 64}, ...],
     "stats": {"foreground": 1234, "background": 98765},
     "generator": {...SynthConfig fields...} | null,
     "content_hash": "<sha256 hex over image bytes then mask bytes, entry by entry>"}

Soft-target rasters (``*.soft``) hold probabilities, which PGM cannot::

    magic b"UNSQSOFT" | u32 version=1 | u32 height | u32 width | u32 channels
    | height*width*channels float64, little-endian, channel-major (c, h, w)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "unsq-dataset"
MANIFEST_VERSION = 1
MULTIPLE = 16


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError):
    pass


class NonBinaryMaskError(DatasetError):
    pass


class HashMismatchError(DatasetError):
    pass


class DimensionError(DatasetError):
    pass


class UnreachableFractionError(DatasetError):
    pass


# --- PGM -----------------------------------------------------------------

def write_pgm(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2-D uint8 array")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise DatasetError(f"{path}: truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# --- soft-target container -----------------------------------------------

SOFT_MAGIC = b"UNSQSOFT"
SOFT_VERSION = 1


def write_soft_raster(path, probs: np.ndarray) -> None:
    arr = np.asarray(probs, dtype="<f8")
    if arr.ndim != 3:
        raise ValueError("soft raster must be (channels, h, w)")
    c, h, w = arr.shape
    Path(path).write_bytes(SOFT_MAGIC + struct.pack("<IIII", SOFT_VERSION, h, w, c)
                           + np.ascontiguousarray(arr).tobytes())


def read_soft_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    head = len(SOFT_MAGIC) + 16
    if data[:len(SOFT_MAGIC)] != SOFT_MAGIC or len(data) < head:
        raise DatasetError(f"{path}: not a soft-target raster")
    version, h, w, c = struct.unpack("<IIII", data[len(SOFT_MAGIC):head])
    if version != SOFT_VERSION:
        raise DatasetError(f"{path}: soft raster version {version} unsupported")
    body = data[head:]
    if len(body) != 8 * c * h * w:
        raise DatasetError(f"{path}: truncated soft raster")
    return np.frombuffer(body, dtype="<f8").reshape(c, h, w).astype(np.float64)


# --- manifests -----------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: list[dict]
    foreground: int
    background: int
    content_hash: str
    generator: dict | None = None

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    @property
    def height(self) -> int:
        return self.entries[0]["h"]

    @property
    def width(self) -> int:
        return self.entries[0]["w"]

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> dict:
        return {
            "format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "split": self.split,
            "height": self.height, "width": self.width, "entries": self.entries,
            "stats": {"foreground": self.foreground, "background": self.background},
            "generator": self.generator, "content_hash": self.content_hash,
        }

    def save(self) -> Path:
        self.path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return self.path

    @classmethod
    def read(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise MissingFileError(f"manifest not found: {path}")
        doc = json.loads(path.read_text())
        if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"{path}: unsupported manifest format/version")
        return cls(root=path.parent, split=doc["split"], entries=doc["entries"],
                   foreground=int(doc["stats"]["foreground"]),
                   background=int(doc["stats"]["background"]),
                   content_hash=doc["content_hash"], generator=doc.get("generator"))


def content_hash(root: Path, entries: list[dict]) -> str:
    h = hashlib.sha256()
    for e in entries:
        for key in ("image", "mask"):
            p = root / e[key]
            if not p.exists():
                raise MissingFileError(f"missing {key} file: {p}")
            h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(root, split: str, pairs: list[tuple[str, str]],
                   generator: dict | None = None) -> DatasetManifest:
    """Describe existing PGM image/mask pairs under ``root`` (relative names)."""
    root = Path(root)
    entries, fg, total = [], 0, 0
    for image_name, mask_name in pairs:
        mask = _read_mask(root / mask_name)
        h, w = mask.shape
        entries.append({"image": image_name, "mask": mask_name, "h": h, "w": w})
        fg += int(mask.sum())
        total += mask.size
    if not entries:
        raise DatasetError("a dataset needs at least one image/mask pair")
    _check_dims(entries)
    manifest = DatasetManifest(root, split, entries, fg, total - fg,
                               content_hash(root, entries), generator)
    manifest.save()
    return manifest


def _check_dims(entries: list[dict]) -> None:
    h, w = entries[0]["h"], entries[0]["w"]
    for e in entries:
        if (e["h"], e["w"]) != (h, w):
            raise DimensionError(f"{e['image']}: size {e['h']}x{e['w']} differs from {h}x{w}")
    if h % MULTIPLE or w % MULTIPLE:
        raise DimensionError(f"image size {h}x{w} must be a multiple of {MULTIPLE} in both dims")


def _read_mask(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"missing mask file: {path}")
    raw = read_pgm(path)
    if not np.all((raw == 0) | (raw == 255)):
        bad = raw[(raw != 0) & (raw != 255)][0]
        raise NonBinaryMaskError(f"{path}: non-binary mask value {bad / 255:.3f}")
    return (raw == 255).astype(np.float64)


# --- in-memory dataset ---------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # (n, 1, h, w) in [0, 1]
    masks: np.ndarray  # (n, 1, h, w) in {0, 1}
    manifest: DatasetManifest | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.masks[idx], self.manifest)

    @property
    def foreground(self) -> int:
        return int(self.masks.sum())

    @property
    def background(self) -> int:
        return int(self.masks.size - self.masks.sum())


def load_dataset(manifest_path) -> Dataset:
    """Read a split, verifying file presence, content hash, mask binarity and dims."""
    manifest = DatasetManifest.read(manifest_path)
    if not manifest.entries:
        raise DatasetError("manifest lists no entries")
    _check_dims(manifest.entries)
    images, masks = [], []
    for e in manifest.entries:
        img_path = manifest.root / e["image"]
        if not img_path.exists():
            raise MissingFileError(f"missing image file: {img_path}")
        img = read_pgm(img_path)
        mask = _read_mask(manifest.root / e["mask"])
        if img.shape != (e["h"], e["w"]) or mask.shape != (e["h"], e["w"]):
            raise DimensionError(f"{img_path}: raster size disagrees with manifest")
        images.append(img.astype(np.float64) / 255.0)
        masks.append(mask)
    # rasters are validated first so a bad mask reports itself rather than a hash mismatch
    digest = content_hash(manifest.root, manifest.entries)
    if digest != manifest.content_hash:
        raise HashMismatchError(f"{manifest.path}: content hash {digest[:12]} does not match "
                                f"manifest {manifest.content_hash[:12]}")
    ds = Dataset(np.stack(images)[:, None], np.stack(masks)[:, None], manifest)
    if ds.foreground != manifest.foreground or ds.background != manifest.background:
        raise DatasetError(f"{manifest.path}: pixel statistics disagree with mask contents")
    return ds


# --- batching ------------------------------------------------------------

@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    masks: np.ndarray


def batch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(dataset: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True,
                   epoch: int = 0) -> Iterator[Batch]:
    """One epoch of batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = batch_order(len(dataset), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(idx, dataset.images[idx], dataset.masks[idx])


# --- synthetic generator -------------------------------------------------

@dataclass
class SynthConfig:
    """Dark textured ellipses ("mitochondria") on a smooth noisy background.

    Decoy blobs share the foreground intensity but are small, round and
    untextured, so separating them requires shape context.
    """

    num_images: int = 32
    height: int = 64
    width: int = 64
    foreground_fraction: float = 1 / 18.8
    max_blobs: int = 8
    blob_radius: tuple[float, float] = (3.0, 9.0)
    blob_intensity: float = 0.25
    texture_amplitude: float = 0.12
    texture_period: float = 3.0
    background_mean: float = 0.6
    background_variation: float = 0.12
    decoys: tuple[int, int] = (0, 4)
    decoy_radius: tuple[float, float] = (1.5, 2.5)
    noise_std: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        f = self.foreground_fraction
        if not 0 < f < 0.5:
            raise ValueError("foreground_fraction must be in (0, 0.5)")
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if self.height % MULTIPLE or self.width % MULTIPLE:
            raise DimensionError(f"image size must be a multiple of {MULTIPLE}")
        target = f * self.height * self.width
        if target < 1:
            raise UnreachableFractionError("foreground_fraction * h * w must be at least one pixel")
        rmin, rmax = self.blob_radius
        if not 0 < rmin <= rmax or 2 * rmax >= min(self.height, self.width):
            raise ValueError("blob radii must be positive and fit inside the image")
        if self.max_blobs * np.pi * rmax ** 2 < target:
            raise UnreachableFractionError(
                f"{self.max_blobs} blobs of radius <= {rmax} cannot cover fraction {f}")
        if np.pi * rmin ** 2 > 2 * target:
            raise UnreachableFractionError(f"a single blob of radius {rmin} overshoots fraction {f}")


def _smooth_field(rng: np.random.Generator, h: int, w: int, grid: int = 5) -> np.ndarray:
    coarse = rng.normal(size=(grid, grid))
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    rows = np.array([np.interp(xs, np.arange(grid), coarse[i]) for i in range(grid)])
    return np.array([np.interp(ys, np.arange(grid), rows[:, j]) for j in range(w)]).T


def _ellipse(h: int, w: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _synth_image(cfg: SynthConfig, rng: np.random.Generator,
                 target: float) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    img = cfg.background_mean + cfg.background_variation * _smooth_field(rng, h, w)

    for _ in range(rng.integers(cfg.decoys[0], cfg.decoys[1] + 1)):
        r = rng.uniform(*cfg.decoy_radius)
        blob = _ellipse(h, w, rng.uniform(r, h - r), rng.uniform(r, w - r), r, r, 0.0)
        img[blob] = cfg.blob_intensity

    mask = np.zeros((h, w), dtype=bool)
    rmin, rmax = cfg.blob_radius
    blobs, misses = 0, 0
    while blobs < cfg.max_blobs and misses < 40:
        a = rng.uniform(rmin, rmax)
        b = rng.uniform(max(rmin, 0.5 * a), a)
        theta = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(a, h - a), rng.uniform(a, w - a)
        candidate = mask | _ellipse(h, w, cy, cx, a, b, theta)
        if abs(candidate.sum() - target) < abs(mask.sum() - target):
            mask = candidate
            blobs += 1
            misses = 0
            # stripes across the blob, at the blob's own orientation
            yy, xx = np.mgrid[0:h, 0:w]
            phase = ((xx - cx) * np.cos(theta + np.pi / 2) + (yy - cy) * np.sin(theta + np.pi / 2))
            stripes = cfg.texture_amplitude * np.sin(2 * np.pi * phase / cfg.texture_period)
            blob = _ellipse(h, w, cy, cx, a, b, theta)
            img[blob] = cfg.blob_intensity + stripes[blob]
        else:
            misses += 1

    if cfg.noise_std > 0:
        img = img + rng.normal(0.0, cfg.noise_std, size=(h, w))
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return pixels, mask


def generate_synthetic(config: SynthConfig, root, split: str = "train") -> DatasetManifest:
    """Write ``config.num_images`` image/mask pairs to ``root/split`` and return the manifest.

    Deterministic for a given config: same config, same bytes.
    """
    config.validate()
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    pairs = []
    fg = 0
    per_image = config.foreground_fraction * config.height * config.width
    for i in range(config.num_images):
        # aim each image at the split-level shortfall so over/undershoot does not accumulate
        pixels, mask = _synth_image(config, rng, max((i + 1) * per_image - fg, 0.0))
        image_name, mask_name = f"image_{i:04d}.pgm", f"mask_{i:04d}.pgm"
        write_pgm(out / image_name, pixels)
        write_pgm(out / mask_name, mask.astype(np.uint8) * 255)
        pairs.append((image_name, mask_name))
        fg += int(mask.sum())
    realized = fg / (config.num_images * config.height * config.width)
    f = config.foreground_fraction
    if abs(realized - f) > 0.2 * f:
        raise UnreachableFractionError(
            f"realized foreground fraction {realized:.4f} is not within 20% of {f:.4f}")
    gen = asdict(config)
    return write_manifest(out, split, pairs, generator=gen)


def generate_splits(config: SynthConfig, root, num_test: int | None = None) -> dict[str, DatasetManifest]:
    """Train and test splits from one config; the test split uses ``seed + 1``."""
    test_cfg = SynthConfig(**{**asdict(config), "seed": config.seed + 1,
                              "num_images": num_test or config.num_images})
    return {"train": generate_synthetic(config, root, "train"),
            "test": generate_synthetic(test_cfg, root, "test")}


def synth_config_from_dict(d: dict) -> SynthConfig:
    d = dict(d)
    for key in ("blob_radius", "decoys", "decoy_radius"):
        if key in d:
            d[key] = tuple(d[key])
    return SynthConfig(**d)
