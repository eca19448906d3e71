"""Dataset ingestion, preprocessing, splitting and a synthetic paired corpus.

Images are 2-D float arrays. Raw inputs may be uint8, uint16 or float in
``[0, 1]``; processed images live in ``[-1, 1]``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

SPLITS = ("train", "val", "test")


@dataclass
class ImagePair:
    cxr: np.ndarray
    soft_tissue: np.ndarray
    id: str
    split: str = "train"
    bone: np.ndarray | None = None

    def __post_init__(self):
        if self.cxr.shape != self.soft_tissue.shape:
            raise ValueError(f"pair {self.id}: shape mismatch {self.cxr.shape} vs {self.soft_tissue.shape}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class PreprocessConfig:
    target_size: int = 1024
    clahe: bool = True
    clip_limit: float = 2.0
    tile_grid: int = 8
    # "minmax": per-image min-max to [-1, 1]; "fixed": working range [0, 1] -> [-1, 1]
    normalization: str = "minmax"

    def __post_init__(self):
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if self.clip_limit <= 0:
            raise ValueError("clip_limit must be positive")
        if self.normalization not in ("minmax", "fixed"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _to_unit(raw: np.ndarray) -> np.ndarray:
    if raw.dtype == np.uint8:
        return raw.astype(np.float64) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float64) / 65535.0
    return np.clip(raw.astype(np.float64), 0.0, 1.0)


def _clahe(unit: np.ndarray, clip_limit: float, tile_grid: int) -> np.ndarray:
    if unit.max() == unit.min():
        return unit
    img16 = np.round(unit * 65535).astype(np.uint16)
    op = cv2.createCLAHE(clipLimit=clip_limit, tileGridSize=(tile_grid, tile_grid))
    return op.apply(img16).astype(np.float64) / 65535.0


def preprocess(raw: np.ndarray, config: PreprocessConfig | None = None) -> np.ndarray:
    """CLAHE, area resize to ``target_size``, then linear map into ``[-1, 1]``."""
    config = config or PreprocessConfig()
    raw = np.asarray(raw)
    if raw.ndim == 3 and raw.shape[2] == 1:
        raw = raw[..., 0]
    if raw.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {raw.shape}")
    img = _to_unit(raw)
    if config.clahe:
        img = _clahe(img, config.clip_limit, config.tile_grid)
    n = config.target_size
    if img.shape != (n, n):
        interp = cv2.INTER_AREA if min(img.shape) >= n else cv2.INTER_LINEAR
        img = cv2.resize(img, (n, n), interpolation=interp)
    if config.normalization == "fixed":
        return np.clip(2.0 * img - 1.0, -1.0, 1.0)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return np.clip(2.0 * (img - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def jsrt_to_negative(image: np.ndarray, gamma: float = 0.8) -> np.ndarray:
    """Invert a ``[0, 1]`` image and apply a gamma contrast curve (``gamma=1`` is identity)."""
    inv = 1.0 - np.asarray(image, dtype=np.float64)
    if gamma == 1.0:
        return inv
    return np.clip(inv, 0.0, 1.0) ** gamma


def split_counts(n: int, ratios=(0.8, 0.1, 0.1)) -> list[int]:
    """Floor each share, then hand the remainder out by largest fractional part."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if n <= 0:
        raise ValueError("cannot split an empty dataset")
    if np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios.tolist()}")
    exact = ratios * n
    counts = np.floor(exact + 1e-9).astype(int)
    frac = exact - counts
    order = sorted(range(len(ratios)), key=lambda i: (-round(frac[i], 9), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def split_dataset(ids, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, str]:
    """Deterministically assign each id to train/val/test."""
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty dataset")
    if len(set(ids)) != len(ids):
        raise ValueError("dataset ids must be unique")
    counts = split_counts(len(ids), ratios)
    order = np.random.default_rng(seed).permutation(len(ids))
    labels = np.repeat(SPLITS[: len(counts)], counts)
    return {ids[i]: str(lab) for i, lab in zip(order, labels)}


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticConfig:
    bone_amplitude: float = 0.35
    n_ribs: int = 6
    brightness_range: tuple = (0.25, 0.55)
    texture_amplitude: float = 0.06


def _soft_tissue(rng: np.random.Generator, size: int, cfg: SyntheticConfig) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.full((size, size), rng.uniform(*cfg.brightness_range))
    # mediastinum / body envelope
    img += 0.12 * np.exp(-((xx - 0.5) ** 2) / (2 * 0.08 ** 2))
    for cx in (0.3, 0.7):
        cx = cx + rng.normal(0, 0.02)
        cy = 0.5 + rng.normal(0, 0.03)
        rx, ry = rng.uniform(0.13, 0.18), rng.uniform(0.25, 0.32)
        d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        img -= rng.uniform(0.08, 0.15) * np.exp(-d ** 2)
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10, mode="wrap")
    field_ /= field_.std() + 1e-12
    img += cfg.texture_amplitude * field_
    return img


def _bones(rng: np.random.Generator, size: int, cfg: SyntheticConfig) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    bone = np.zeros((size, size))
    thick = 0.025
    for side in (-1, 1):
        x_mid = 0.5 + side * 0.2
        tilt = side * rng.uniform(0.25, 0.45)
        ys = np.linspace(0.22, 0.8, cfg.n_ribs) + rng.normal(0, 0.01, cfg.n_ribs)
        for y0 in ys:
            curve = y0 + tilt * (xx - x_mid) - 0.9 * (xx - x_mid) ** 2
            inside = np.clip(1 - np.abs(xx - x_mid) / 0.22, 0, 1)
            bone += np.exp(-((yy - curve) ** 2) / (2 * thick ** 2)) * (inside > 0) * np.sqrt(inside)
    bone = ndimage.gaussian_filter(bone, 0.5)
    bone /= max(bone.max(), 1e-12)
    return cfg.bone_amplitude * bone


def generate_synthetic_pairs(n: int, size: int = 64, seed: int = 0,
                             config: SyntheticConfig | None = None) -> list[ImagePair]:
    """Paired soft-tissue / radiograph images in the ``[0, 1]`` working range.

    Soft tissue is a smooth low-frequency field with a random global level;
    bone is a set of thin oriented bands. ``cxr = clip(soft_tissue + bone)``
    and the overlay bone image is kept on the pair.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(seed)
    width = len(str(n - 1))
    pairs = []
    for i in range(n):
        tissue = np.clip(_soft_tissue(rng, size, cfg), 0.0, 1.0)
        bone = _bones(rng, size, cfg)
        cxr = np.clip(tissue + bone, 0.0, 1.0)
        pairs.append(ImagePair(cxr=cxr, soft_tissue=tissue, id=f"syn{i:0{width}d}", bone=bone))
    return pairs


def bone_image(cxr: np.ndarray, soft_tissue: np.ndarray) -> np.ndarray:
    """Bone layer as the non-negative part of ``cxr - soft_tissue``."""
    return np.maximum(np.asarray(cxr) - np.asarray(soft_tissue), 0.0)


# ---------------------------------------------------------------- file IO


def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if img.ndim == 3:
        raise ValueError(f"{path}: expected grayscale, got {img.shape[2]} channels")
    return img


def write_png16(path, image: np.ndarray, value_range=(-1.0, 1.0)) -> None:
    lo, hi = value_range
    unit = np.clip((np.asarray(image, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.round(unit * 65535).astype(np.uint16)):
        raise OSError(f"failed to write {path}")


def read_processed(path) -> np.ndarray:
    """Inverse of :func:`write_png16` for processed ``[-1, 1]`` images."""
    return _to_unit(read_image(path)) * 2.0 - 1.0


def load_blacklist(path) -> set[str]:
    if path is None or not os.path.exists(path):
        return set()
    with open(path) as fh:
        return {ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")}


def discover_pairs(raw_dir, blacklist=()) -> list[tuple[str, Path, Path]]:
    """Match ``cxr/<name>`` to ``tissue/<name>`` under ``raw_dir``."""
    raw_dir = Path(raw_dir)
    cxr_dir, tis_dir = raw_dir / "cxr", raw_dir / "tissue"
    for d in (cxr_dir, tis_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory {d} (expected cxr/ and tissue/ with matching filenames)")
    cxr = {p.name: p for p in cxr_dir.iterdir() if p.suffix.lower() == ".png"}
    tis = {p.name: p for p in tis_dir.iterdir() if p.suffix.lower() == ".png"}
    unmatched = sorted(set(cxr) ^ set(tis))
    if unmatched:
        raise ValueError(f"unpaired files between cxr/ and tissue/: {unmatched[:10]}")
    out = []
    for name in sorted(cxr):
        pid = Path(name).stem
        if pid in blacklist:
            continue
        out.append((pid, cxr[name], tis[name]))
    return out


MANIFEST_FIELDS = ["id", "split", "cxr", "tissue", "bone", "fingerprint"]


def write_manifest(path, rows: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in MANIFEST_FIELDS})


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_split(manifest_path, split: str) -> list[ImagePair]:
    """Load processed pairs of one split listed in a manifest."""
    root = Path(manifest_path).parent
    pairs = []
    for r in read_manifest(manifest_path):
        if r["split"] != split:
            continue
        pairs.append(ImagePair(
            cxr=read_processed(root / r["cxr"]),
            soft_tissue=read_processed(root / r["tissue"]),
            id=r["id"], split=r["split"],
            bone=_to_unit(read_image(root / r["bone"])) if r.get("bone") else None,
        ))
    return pairs
