"""Datasets: MVTec-style directory ingestion and a seeded synthetic generator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import IngestionError, ValidationError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SPLITS = ("train", "test")


@dataclass
class Sample:
    image: np.ndarray  # (h, w, 3) float32 in [0, 1]
    label: int
    mask: np.ndarray  # (h, w) uint8 in {0, 1}
    category: str
    split: str
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"{self.name}: image must be (h, w, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValidationError(
                f"{self.name}: mask {self.mask.shape} does not match image {self.image.shape[:2]}"
            )
        if self.label not in (0, 1):
            raise ValidationError(f"{self.name}: label must be 0 or 1")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.name}: unknown split {self.split!r}")


@dataclass
class _Entry:
    category: str
    split: str
    label: int
    name: str
    image_path: Path | None = None
    mask_path: Path | None = None
    sample: Sample | None = None


@dataclass
class DatasetHandle:
    """Ordered, read-only collection of samples.

    Entries loaded from disk are decoded on access; synthetic entries are held
    in memory.  ``select`` returns a view restricted to a split and/or label.
    """

    entries: list[_Entry]
    root: Path | None = None
    categories: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, idx) -> Sample:
        e = self.entries[idx]
        if e.sample is not None:
            return e.sample
        return _read_sample(e)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def labels(self) -> list[int]:
        return [e.label for e in self.entries]

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def counts(self) -> dict[str, tuple[int, int]]:
        """Per split: (normal count, anomalous count)."""
        out = {}
        for split in SPLITS:
            labels = [e.label for e in self.entries if e.split == split]
            if labels:
                out[split] = (labels.count(0), labels.count(1))
        return out

    def select(self, split: str | None = None, label: int | None = None) -> DatasetHandle:
        entries = [
            e
            for e in self.entries
            if (split is None or e.split == split) and (label is None or e.label == label)
        ]
        return DatasetHandle(entries, self.root, sorted({e.category for e in entries}))


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    return arr


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read mask {path}: {exc}") from exc
    return (arr > 0).astype(np.uint8)


def _read_sample(e: _Entry) -> Sample:
    image = read_image(e.image_path)
    if e.mask_path is None:
        mask = np.zeros(image.shape[:2], dtype=np.uint8)
    else:
        mask = read_mask(e.mask_path)
        if mask.shape != image.shape[:2]:
            raise IngestionError(
                f"mask {e.mask_path} has size {mask.shape}, image {e.image_path} has {image.shape[:2]}"
            )
    return Sample(image, e.label, mask, e.category, e.split, e.name)


def _images_in(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root, validate: bool = True) -> DatasetHandle:
    """Index ``root/<category>/{train,test}/<defect_or_good>/*`` in lexicographic order.

    Anomalous images need ``root/<category>/ground_truth/<defect>/<stem>_mask.png``.
    With ``validate`` every image/mask pair is decoded once to check sizes.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    entries: list[_Entry] = []
    categories = sorted(p.name for p in root.iterdir() if p.is_dir())
    for category in categories:
        for split in SPLITS:
            split_dir = root / category / split
            if not split_dir.is_dir():
                continue
            for defect_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                label = 0 if defect_dir.name == "good" else 1
                for img in _images_in(defect_dir):
                    mask_path = None
                    if label == 1:
                        mask_path = root / category / "ground_truth" / defect_dir.name / f"{img.stem}_mask.png"
                        if not mask_path.is_file():
                            raise IngestionError(f"anomalous image {img} has no mask at {mask_path}")
                    name = f"{category}/{split}/{defect_dir.name}/{img.name}"
                    entries.append(_Entry(category, split, label, name, img, mask_path))
    if not entries:
        raise IngestionError(f"no images found under {root}")
    handle = DatasetHandle(entries, root, sorted({e.category for e in entries}))
    if validate:
        for e in entries:
            _read_sample(e)
    return handle


# synthetic textures: (base RGB, noise smoothing sigma, noise amplitude)
TEXTURES = {
    "grain": ((0.55, 0.45, 0.35), 1.0, 0.10),
    "fabric": ((0.35, 0.45, 0.60), 2.0, 0.12),
    "marble": ((0.60, 0.60, 0.58), 4.0, 0.15),
}


def _texture(rng: np.random.Generator, size: int, category: str) -> np.ndarray:
    base, sigma, amp = TEXTURES[category]
    noise = gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(sigma, sigma, 0.0))
    noise = noise.mean(axis=2, keepdims=True) * 0.8 + noise * 0.2
    noise /= noise.std() + 1e-12
    return np.clip(np.asarray(base) + amp * noise, 0.0, 1.0)


def _defect_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = 2, size - 2  # 2-pixel border stays clean
    for _ in range(int(rng.integers(1, 4))):
        sh = int(rng.integers(max(3, size // 8), max(4, size // 3) + 1))
        sw = int(rng.integers(max(3, size // 8), max(4, size // 3) + 1))
        top = int(rng.integers(lo, hi - sh + 1))
        left = int(rng.integers(lo, hi - sw + 1))
        if rng.random() < 0.5:
            mask[top : top + sh, left : left + sw] = True
        else:
            cy, cx = top + (sh - 1) / 2, left + (sw - 1) / 2
            ell = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
            mask |= ell
    mask[:lo] = mask[hi:] = False
    mask[:, :lo] = mask[:, hi:] = False
    return mask


def _inject(rng: np.random.Generator, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Paint the masked region a darkened version of the local background."""
    background = image[mask].mean(axis=0)
    target = np.clip(background * rng.uniform(0.15, 0.35) + rng.uniform(-0.03, 0.03, size=3), 0.0, 1.0)
    out = image.copy()
    out[mask] = target + 0.03 * rng.standard_normal((int(mask.sum()), 3))
    return np.clip(out, 0.0, 1.0)


def synth_dataset(
    seed: int = 0,
    n_train: int = 200,
    n_test: int = 80,
    size: int = 64,
    anomaly_fraction: float = 0.5,
    categories: tuple[str, ...] = tuple(TEXTURES),
) -> DatasetHandle:
    """Procedural textures with injected rectangular/elliptic defects.

    Each split holds exactly ``floor(n * anomaly_fraction)`` anomalous samples,
    placed by a seeded permutation.  Categories cycle over ``categories``.
    """
    if size < 16:
        raise ValidationError("size must be >= 16")
    if not 0.0 < anomaly_fraction < 1.0:
        raise ValidationError("anomaly_fraction must lie strictly between 0 and 1")
    if n_train < 0 or n_test < 0 or n_train + n_test == 0:
        raise ValidationError("need a positive number of samples")
    unknown = set(categories) - set(TEXTURES)
    if not categories or unknown:
        raise ValidationError(f"unknown texture categories {sorted(unknown)}")

    rng = np.random.default_rng(seed)
    entries: list[_Entry] = []
    # file stems are numbered across both splits: ground-truth masks of
    # both splits share one directory per defect type
    offset = 0
    for split, n in (("train", n_train), ("test", n_test)):
        n_anom = math.floor(n * anomaly_fraction)
        is_anom = np.zeros(n, dtype=bool)
        is_anom[rng.permutation(n)[:n_anom]] = True
        for i in range(n):
            category = categories[i % len(categories)]
            image = _texture(rng, size, category)
            mask = np.zeros((size, size), dtype=np.uint8)
            if is_anom[i]:
                m = _defect_mask(rng, size)
                image = _inject(rng, image, m)
                mask = m.astype(np.uint8)
            label = int(is_anom[i])
            name = f"{category}/{split}/{'defect' if label else 'good'}/{offset + i:04d}.png"
            sample = Sample(image.astype(np.float32), label, mask, category, split, name)
            entries.append(_Entry(category, split, label, name, sample=sample))
        offset += n
    return DatasetHandle(entries, None, sorted(set(categories)))


def write_dataset(handle: DatasetHandle, out_dir) -> Path:
    """Materialise a handle in the directory layout ``load_dataset`` reads."""
    out_dir = Path(out_dir)
    for sample in handle:
        category, split, defect, fname = sample.name.split("/")
        img_dir = out_dir / category / split / defect
        img_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(sample.image * 255).astype(np.uint8)).save(img_dir / fname)
        if sample.label:
            gt_dir = out_dir / category / "ground_truth" / defect
            gt_dir.mkdir(parents=True, exist_ok=True)
            stem = Path(fname).stem
            Image.fromarray(sample.mask * 255).save(gt_dir / f"{stem}_mask.png")
    return out_dir


def resize_sample(sample: Sample, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear image / nearest-neighbour mask resize to ``size`` = (h, w)."""
    h, w = size
    if sample.image.shape[:2] == (h, w):
        return sample.image, sample.mask
    channels = [
        np.asarray(Image.fromarray(sample.image[..., c].astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
        for c in range(3)
    ]
    mask = Image.fromarray(sample.mask * 255).resize((w, h), Image.NEAREST)
    image = np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)
    return image, (np.asarray(mask) > 0).astype(np.uint8)
