"""Dataset ingestion, preprocessing, augmentation, noise injection and the
synthetic blob dataset used for desk-scale training.

Directory layout: `images/` and `masks/` hold filename-paired 8-bit PNGs
(mask: 0 background, 255 foreground, binarized at 128); an optional
`regions/` directory pairs the same way. Grayscale images decode to one
channel, RGB to three; pixel values scale to [0, 1].

Synthetic generator (synth_blobs): fully deterministic given (n, size,
seed). Sample i draws from numpy's default_rng seeded with
SeedSequence(seed).spawn(n)[i] in this order:

1. background: an 8x8 grid of uniform [0.05, 0.30) values, bilinearly
   upsampled (align-corners=false) to size x size, plus N(0, 0.02) pixel
   noise;
2. blob count b ~ integers 1..4;
3. per blob: center uniform in the central 70% box, semi-axes uniform in
   [0.07, 0.16) * size (at least 3 px), orientation uniform in [0, pi),
   peak intensity uniform in [0.55, 0.90); with q the normalized elliptic
   distance, the blob adds intensity * clip(1.25 * (1 - q), 0, 1) and its
   support q <= 1 is OR-ed into the mask;
4. image = clip(background + blobs, 0, 1), float32.

Every mask is nonempty by construction (semi-axes >= 3 px, centers inside
the image).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .ops import bilinear_matrix
from .tensor import Tensor


class PairingError(ValueError):
    """images/ and masks/ (or regions/) entries do not pair up."""


@dataclass
class Sample:
    id: str
    image: Tensor          # (C, H, W) in [0, 1]
    mask: Tensor           # (1, H, W) binary
    region_mask: Tensor | None = None

    def validate(self) -> "Sample":
        if self.image.data.ndim != 3 or self.mask.data.ndim != 3:
            raise ValueError(f"sample {self.id}: image/mask must be CHW")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValueError(f"sample {self.id}: image {tuple(self.image.shape)} and "
                             f"mask {tuple(self.mask.shape)} spatial shapes differ")
        vals = np.unique(self.mask.data)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"sample {self.id}: mask must be binary")
        return self


class Dataset:
    def __init__(self, samples, split: str = "train", source: str = "memory"):
        self.samples = list(samples)
        self.split = split
        self.source = source
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate sample ids: {dupes[:5]}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def split_at(self, n: int) -> tuple["Dataset", "Dataset"]:
        """Deterministic head/tail split into (first n, rest)."""
        if not 0 < n < len(self):
            raise ValueError(f"split point {n} outside 1..{len(self) - 1}")
        return (Dataset(self.samples[:n], "train", self.source),
                Dataset(self.samples[n:], "val", self.source))


# ---------------------------------------------------------------------------
# PNG IO


def _load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode in ("L", "I;16", "I"):
                arr = np.asarray(img.convert("L"), dtype=np.float32)[None]
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1)
    except OSError as e:
        raise PairingError(f"unreadable image {path}: {e}") from e
    return arr / 255.0


def _load_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except OSError as e:
        raise PairingError(f"unreadable mask {path}: {e}") from e
    return (arr >= 128).astype(np.float32)[None]


def load_dataset(root, split: str = "train") -> Dataset:
    """Load an images/ + masks/ (+ optional regions/) directory tree."""
    root = Path(root)
    img_dir, mask_dir, region_dir = root / "images", root / "masks", root / "regions"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        if not img_dir.is_dir() and not mask_dir.is_dir():
            return Dataset([], split=split, source=str(root))
        missing = mask_dir if img_dir.is_dir() else img_dir
        raise PairingError(f"dataset at {root} is missing {missing.name}/")
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() == ".png")
    masks = {p.name: p for p in mask_dir.iterdir() if p.suffix.lower() == ".png"}
    regions = ({p.name: p for p in region_dir.iterdir() if p.suffix.lower() == ".png"}
               if region_dir.is_dir() else {})

    samples = []
    for img_path in images:
        mask_path = masks.pop(img_path.name, None)
        if mask_path is None:
            raise PairingError(f"image {img_path.name} has no mask in {mask_dir}")
        image = _load_image(img_path)
        mask = _load_mask(mask_path)
        if image.shape[1:] != mask.shape[1:]:
            raise PairingError(f"{img_path.name}: image {image.shape[1:]} vs mask {mask.shape[1:]}")
        region = None
        if img_path.name in regions:
            region = Tensor(_load_mask(regions[img_path.name]))
        samples.append(Sample(id=img_path.stem, image=Tensor(image), mask=Tensor(mask),
                              region_mask=region).validate())
    if masks:
        orphan = sorted(masks)[0]
        raise PairingError(f"mask {orphan} has no image in {img_dir}")
    return Dataset(samples, split=split, source=str(root))


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def save_dataset(dataset: Dataset, root, force: bool = False) -> None:
    """Write a dataset in the standard images/ + masks/ PNG layout."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} exists and is not empty; pass force=True to overwrite")
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    has_regions = any(s.region_mask is not None for s in dataset)
    if has_regions:
        (root / "regions").mkdir(parents=True, exist_ok=True)
    for s in dataset:
        img = s.image.data
        if img.shape[0] == 1:
            Image.fromarray(_to_uint8(img[0]), mode="L").save(root / "images" / f"{s.id}.png")
        else:
            Image.fromarray(_to_uint8(img.transpose(1, 2, 0)), mode="RGB").save(
                root / "images" / f"{s.id}.png")
        Image.fromarray(_to_uint8(s.mask.data[0]), mode="L").save(root / "masks" / f"{s.id}.png")
        if s.region_mask is not None:
            Image.fromarray(_to_uint8(s.region_mask.data[0]), mode="L").save(
                root / "regions" / f"{s.id}.png")


# ---------------------------------------------------------------------------
# preprocessing


def _resize_plane_bilinear(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    ur = bilinear_matrix(plane.shape[0], h, np.float64)
    uc = bilinear_matrix(plane.shape[1], w, np.float64)
    return (ur @ plane.astype(np.float64) @ uc.T)


def _nearest_index(n_src: int, n_dst: int) -> np.ndarray:
    idx = np.floor((np.arange(n_dst) + 0.5) * (n_src / n_dst)).astype(np.intp)
    return np.minimum(idx, n_src - 1)


def resize(sample: Sample, height: int, width: int) -> Sample:
    """Bilinear image resize + nearest-neighbour mask resize (re-binarized)."""
    if height % 16 or width % 16:
        raise ValueError(f"target extents must be divisible by 16, got {height}x{width}")
    c, h, w = sample.image.shape
    if (h, w) == (height, width):
        return sample
    img = np.stack([
        np.clip(_resize_plane_bilinear(sample.image.data[k], height, width), 0.0, 1.0)
        for k in range(c)
    ]).astype(np.float32)
    ri = _nearest_index(h, height)
    ci = _nearest_index(w, width)
    mask = sample.mask.data[:, ri][:, :, ci]
    mask = (mask >= 0.5).astype(np.float32)
    region = None
    if sample.region_mask is not None:
        region = (sample.region_mask.data[:, ri][:, :, ci] >= 0.5).astype(np.float32)
        region = Tensor(region)
    return Sample(id=sample.id, image=Tensor(img), mask=Tensor(mask),
                  region_mask=region).validate()


def _angle_rng(seed: int, sample_id: str) -> np.random.Generator:
    # Stable across processes: CRC of the id, not python's salted hash().
    return np.random.default_rng(np.random.SeedSequence(
        entropy=int(seed), spawn_key=(zlib.crc32(sample_id.encode("utf-8")),)))


def rotate_sample(sample: Sample, angle_deg: float) -> Sample:
    """Rotate image (bilinear) and mask (nearest, re-binarized) by one angle,
    zero-filling the frame."""
    if angle_deg == 0.0:
        return sample
    img = np.stack([
        ndimage.rotate(sample.image.data[k], angle_deg, reshape=False, order=1,
                       mode="constant", cval=0.0, prefilter=False)
        for k in range(sample.image.shape[0])
    ]).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    mask = ndimage.rotate(sample.mask.data[0], angle_deg, reshape=False, order=0,
                          mode="constant", cval=0.0, prefilter=False)
    mask = (mask >= 0.5).astype(np.float32)[None]
    region = None
    if sample.region_mask is not None:
        r = ndimage.rotate(sample.region_mask.data[0], angle_deg, reshape=False,
                           order=0, mode="constant", cval=0.0, prefilter=False)
        region = Tensor((r >= 0.5).astype(np.float32)[None])
    return Sample(id=sample.id, image=Tensor(img), mask=Tensor(mask),
                  region_mask=region).validate()


def random_rotation(sample: Sample, max_deg: float, seed: int) -> Sample:
    """Rotate image and mask by the same random angle in (-max_deg, max_deg),
    deterministic per (seed, sample.id)."""
    if not 0 < max_deg <= 180:
        raise ValueError(f"max_deg must be in (0, 180], got {max_deg}")
    angle = float(_angle_rng(seed, sample.id).uniform(-max_deg, max_deg))
    return rotate_sample(sample, angle)


# ---------------------------------------------------------------------------
# noise injection


def add_gaussian_noise(image: Tensor, variance: float, seed: int) -> Tensor:
    """Add N(0, variance) per pixel, then clamp to [0, 1]."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return Tensor(image.data.copy())
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, np.sqrt(variance), image.shape)
    return Tensor(np.clip(image.data + noise, 0.0, 1.0).astype(np.float32))


def add_poisson_noise(image: Tensor, scale: float, seed: int) -> Tensor:
    """Draw Poisson(pixel * scale) / scale per pixel, then clamp to [0, 1]."""
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    rng = np.random.default_rng(seed)
    noisy = rng.poisson(image.data * scale) / scale
    return Tensor(np.clip(noisy, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# synthetic data


def _synth_one(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    coarse = rng.uniform(0.05, 0.30, (8, 8))
    background = _resize_plane_bilinear(coarse, size, size)
    background += rng.normal(0.0, 0.02, (size, size))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    image = background
    mask = np.zeros((size, size), dtype=bool)
    margin = 0.15 * size
    n_blobs = int(rng.integers(1, 5))
    for _ in range(n_blobs):
        cy = rng.uniform(margin, size - margin)
        cx = rng.uniform(margin, size - margin)
        ry = max(rng.uniform(0.07, 0.16) * size, 3.0)
        rx = max(rng.uniform(0.07, 0.16) * size, 3.0)
        theta = rng.uniform(0.0, np.pi)
        intensity = rng.uniform(0.55, 0.90)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        q = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        image = image + intensity * np.clip(1.25 * (1.0 - q), 0.0, 1.0)
        mask |= q <= 1.0
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.float32)


def synth_blobs(n: int, size: int, seed: int) -> Dataset:
    """Deterministic soft-edged elliptical blob dataset; see module docstring."""
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    if size % 16:
        raise ValueError(f"size must be divisible by 16, got {size}")
    seqs = np.random.SeedSequence(int(seed)).spawn(n)
    width = len(str(n - 1))
    samples = []
    for i, seq in enumerate(seqs):
        image, mask = _synth_one(np.random.default_rng(seq), size)
        samples.append(Sample(id=f"blob{i:0{width}d}", image=Tensor(image[None]),
                              mask=Tensor(mask[None])).validate())
    return Dataset(samples, split="train", source=f"synth_blobs(n={n},size={size},seed={seed})")
