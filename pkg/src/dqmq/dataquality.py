"""Image-quality levels, mixed-quality datasets and the sharpness detector.

Quality levels: 1 sharpened, 2 raw, 3/4/5 Gaussian blur of radius 1/3/5.
Images are float arrays in [0, 1], laid out ``[N, C, H, W]``; the filters
also accept a single ``[C, H, W]`` or ``[H, W]`` image and act on the last
two axes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, FormatError
from .rng import Rng

logger = logging.getLogger(__name__)

LEVELS = (1, 2, 3, 4, 5)
RAW = 2
BLUR_RADIUS = {3: 1, 4: 3, 5: 5}
CIFAR_RECORD = 1 + 3 * 32 * 32

_LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------


def gaussian_kernel(radius: int) -> np.ndarray:
    """Normalized 1-D Gaussian with sigma = radius/2 and taps -(2r+1)..(2r+1)."""
    if int(radius) != radius or radius < 1:
        raise ContractError(f"blur radius must be a positive integer, got {radius!r}")
    sigma = radius / 2.0
    half = 2 * int(radius) + 1
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, radius: int) -> np.ndarray:
    img = np.asarray(img)
    k = gaussian_kernel(radius)
    out = ndimage.correlate1d(img.astype(np.float64), k, axis=-1, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=-2, mode="reflect")
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def laplacian(img) -> np.ndarray:
    """4-neighbour Laplacian per channel, reflect padding at the borders."""
    img = np.asarray(img, dtype=np.float64)
    kernel = _LAPLACE.reshape((1,) * (img.ndim - 2) + (3, 3))
    return ndimage.correlate(img, kernel, mode="reflect")


def sharpen(img, strength: float = 1.0) -> np.ndarray:
    img = np.asarray(img)
    out = np.clip(img - strength * laplacian(img), 0.0, 1.0)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def apply_level(images, level: int) -> np.ndarray:
    if level not in LEVELS:
        raise ConfigError(f"unknown quality level {level!r}; expected one of {LEVELS}")
    if level == 1:
        return sharpen(images)
    if level == RAW:
        return np.array(images, copy=True)
    return gaussian_blur(images, BLUR_RADIUS[level])


def quality_score(img) -> float:
    """Variance of the Laplacian of the channel-mean image; higher is sharper."""
    img = np.asarray(img, dtype=np.float64)
    gray = img.mean(axis=0) if img.ndim == 3 else img
    if gray.ndim != 2:
        raise ContractError(f"quality_score expects one image, got shape {img.shape}")
    return float(laplacian(gray).var())


def quality_scores(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    gray = images.mean(axis=1)
    lap = laplacian(gray)
    return lap.reshape(len(images), -1).var(axis=1)


def batch_quality(images) -> float:
    return float(quality_scores(images).mean())


def nearest_level(score: float, reference: dict) -> int:
    """Quality level whose reference score is closest in log space."""
    if not reference:
        raise ContractError("no reference scores")
    s = np.log(max(score, 1e-12))
    return min(reference, key=lambda lvl: (abs(np.log(max(reference[lvl], 1e-12)) - s), lvl))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray            # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray            # [N] int64
    levels: Optional[np.ndarray] = None  # [N] int64 quality level, or None
    source: Optional[np.ndarray] = None  # [N] index into the base dataset

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.images)
        if self.labels.shape != (n,):
            raise ContractError(f"{n} images but labels have shape {self.labels.shape}")
        if self.levels is None:
            self.levels = np.full(n, RAW, dtype=np.int64)
        self.levels = np.asarray(self.levels, dtype=np.int64)
        if self.source is None:
            self.source = np.arange(n, dtype=np.int64)
        self.source = np.asarray(self.source, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.levels[idx], self.source[idx])

    def at_level(self, level: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.levels == level))

    def with_level(self, level: int) -> "Dataset":
        """The same samples re-rendered at ``level`` (from raw images)."""
        return Dataset(apply_level(self.images, level), self.labels, np.full(len(self), level), self.source)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))

    def manifest(self) -> dict:
        return {"count": len(self),
                "entries": [{"index": int(s), "level": int(l), "label": int(y)}
                            for s, l, y in zip(self.source, self.levels, self.labels)]}

    def save(self, out_dir, extra: Optional[dict] = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.save(out / "images.npy", self.images)
        np.save(out / "labels.npy", self.labels)
        np.save(out / "levels.npy", self.levels)
        np.save(out / "source.npy", self.source)
        m = self.manifest()
        m.update(extra or {})
        (out / "manifest.json").write_text(json.dumps(m, sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        p = Path(path)
        if not (p / "images.npy").exists():
            raise ConfigError(f"no prepared dataset at {p}")
        return cls(np.load(p / "images.npy"), np.load(p / "labels.npy"),
                   np.load(p / "levels.npy"), np.load(p / "source.npy"))


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    return Dataset(np.concatenate([d.images for d in parts]), np.concatenate([d.labels for d in parts]),
                   np.concatenate([d.levels for d in parts]), np.concatenate([d.source for d in parts]))


# ---------------------------------------------------------------------------
# synthetic textures
# ---------------------------------------------------------------------------

SYNTH_DEFAULTS = {
    "num_classes": 10,
    "samples": 1000,
    "image_size": 32,
    "channels": 3,
    "frequencies": [3.0, 6.0],  # cycles per image; class c uses frequencies[c // n_orient]
    "contrast": [0.05, 0.3],
    "background": [0.3, 0.7],
    "noise": 0.1,
}


def synth_config(config: Optional[dict] = None) -> dict:
    cfg = dict(SYNTH_DEFAULTS)
    for k, v in (config or {}).items():
        if k not in SYNTH_DEFAULTS:
            raise ConfigError(f"unknown synthetic-data key {k!r}")
        cfg[k] = v
    return cfg


def synth_dataset(config: Optional[dict] = None, seed: int = 0) -> Dataset:
    """Class-conditional oriented gratings with random phase, contrast, tint and noise.

    Classes split into ``len(frequencies)`` frequency bands, each holding
    ``num_classes / len(frequencies)`` evenly spaced orientations.  Labels are
    balanced (``samples`` must be a multiple of ``num_classes``).
    """
    cfg = synth_config(config)
    k, n, size, ch = cfg["num_classes"], cfg["samples"], cfg["image_size"], cfg["channels"]
    freqs = list(cfg["frequencies"])
    if k % len(freqs):
        raise ConfigError("num_classes must be a multiple of the number of frequencies")
    if n % k:
        raise ConfigError(f"samples ({n}) must be a multiple of num_classes ({k})")
    n_orient = k // len(freqs)
    rng = Rng(seed, stream=0x5E7)
    labels = np.tile(np.arange(k), n // k)
    labels = labels[rng.permutation(n)]
    theta = np.pi * (labels % n_orient) / n_orient + rng.uniform(n, -0.05, 0.05)
    freq = np.asarray(freqs, dtype=np.float64)[labels // n_orient]
    phase = rng.uniform(n, 0.0, 2 * np.pi)
    amp = rng.uniform(n, *cfg["contrast"])
    bg = rng.uniform(n, *cfg["background"])
    tint = rng.uniform((n, ch), 0.6, 1.0)
    coords = (np.arange(size) - (size - 1) / 2.0) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    wave = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    img = bg[:, None, None, None] + (amp[:, None] * tint)[:, :, None, None] * wave[:, None]
    img = img + cfg["noise"] * rng.normal((n, ch, size, size))
    return Dataset(np.clip(img, 0.0, 1.0).astype(np.float32), labels)


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------


def build_mixed(base: Dataset, per_level: int, seed: int = 0, levels: Sequence[int] = LEVELS) -> Dataset:
    """Disjoint, label-balanced draws from ``base``, one block per level, shuffled."""
    k = base.num_classes
    if per_level % k:
        raise ConfigError(f"per-level count {per_level} is not a multiple of {k} classes")
    per_class = per_level // k
    rng = Rng(seed, stream=0x313)
    chunks = {lvl: [] for lvl in levels}
    for c in range(k):
        idx = np.flatnonzero(base.labels == c)
        need = per_class * len(levels)
        if len(idx) < need:
            raise ConfigError(f"class {c} has {len(idx)} samples, needs {need} for {len(levels)} levels")
        idx = idx[rng.permutation(len(idx))]
        for j, lvl in enumerate(levels):
            chunks[lvl].append(idx[j * per_class:(j + 1) * per_class])
    parts = []
    for lvl in levels:
        sel = np.sort(np.concatenate(chunks[lvl]))
        raw = base.subset(sel)
        parts.append(Dataset(apply_level(raw.images, lvl), raw.labels, np.full(len(sel), lvl), raw.source))
    mixed = concat_datasets(parts)
    return mixed.subset(rng.permutation(len(mixed)))


# ---------------------------------------------------------------------------
# CIFAR-10 binary records
# ---------------------------------------------------------------------------


def parse_cifar_binary(blob: bytes) -> Dataset:
    """Records of 1 label byte followed by 3072 channel-major pixel bytes."""
    if len(blob) % CIFAR_RECORD:
        offset = (len(blob) // CIFAR_RECORD) * CIFAR_RECORD
        raise FormatError(f"CIFAR binary length {len(blob)} is not a multiple of {CIFAR_RECORD}; "
                          f"incomplete record at byte offset {offset}", offset=offset)
    if not blob:
        raise FormatError("empty CIFAR binary file", offset=0)
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} out of range", offset=int(bad[0]) * CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels)


def load_cifar_binary(path) -> Dataset:
    paths = sorted(Path(path).glob("*.bin")) if Path(path).is_dir() else [Path(path)]
    if not paths:
        raise ConfigError(f"no CIFAR binary files under {path}")
    return concat_datasets([parse_cifar_binary(p.read_bytes()) for p in paths])


def to_cifar_binary(ds: Dataset) -> bytes:
    pix = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    return np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1).tobytes()


def export_pnm(img, path) -> None:
    """Write one image as binary PGM (1 channel) or PPM (3 channels)."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ContractError("PNM export supports 1 or 3 channels")
    pix = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + pix.tobytes())
