"""Dataset ingestion, image IO, normalisation and spatial augmentation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def _read_raw(path: Path) -> np.ndarray:
    try:
        if path.suffix.lower() in (".tif", ".tiff"):
            import tifffile
            return np.asarray(tifffile.imread(path))
        from PIL import Image
        with Image.open(path) as im:
            im.load()
            return np.asarray(im)
    except Exception as exc:  # any decoder failure means an unusable file
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def read_image(path, allow_rgb: bool = False) -> np.ndarray:
    """Read a grayscale image as float64 in its native intensity units."""
    path = Path(path)
    arr = _read_raw(path)
    if arr.ndim == 3:
        if not allow_rgb:
            raise DatasetError(f"{path}: expected a grayscale image, got shape {arr.shape}")
        arr = arr[..., :3].mean(axis=-1)
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected a 2-D image, got shape {arr.shape}")
    return arr.astype(np.float64)


def read_mask(path) -> np.ndarray:
    path = Path(path)
    arr = _read_raw(path)
    if arr.ndim != 2:
        raise DatasetError(f"{path}: label image must be single-channel, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if np.issubdtype(arr.dtype, np.floating) and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise DatasetError(f"{path}: label image must hold integers, got {arr.dtype}")
    if arr.min() < 0:
        raise DatasetError(f"{path}: negative labels")
    return arr.astype(np.int32)


def write_mask(path, labels: np.ndarray) -> None:
    path = Path(path)
    if labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("too many labels for a 16-bit label image")
    arr = labels.astype(np.uint16)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile
        tifffile.imwrite(path, arr)
    else:
        from PIL import Image
        Image.fromarray(arr).save(path)


def write_image(path, image01: np.ndarray, bits: int = 16) -> None:
    """Write an image with values in [0, 1] as 8- or 16-bit grayscale."""
    path = Path(path)
    top = 255 if bits == 8 else 65535
    arr = np.round(np.clip(image01, 0.0, 1.0) * top).astype(np.uint8 if bits == 8 else np.uint16)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile
        tifffile.imwrite(path, arr)
    else:
        from PIL import Image
        Image.fromarray(arr).save(path)


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def normalize_percentile(image: np.ndarray, lower: float = 1.0, upper: float = 99.0,
                         stats: tuple[float, float] | None = None) -> np.ndarray:
    """Map the ``lower``/``upper`` percentiles to 0/1 and clip."""
    lo, hi = stats if stats is not None else np.percentile(image, (lower, upper))
    if hi - lo <= 1e-12:
        return np.zeros_like(image, dtype=np.float64)
    return np.clip((image.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)


def to_network(image01: np.ndarray) -> np.ndarray:
    return 2.0 * image01 - 1.0


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    rotation_range: tuple[float, float] = (-180.0, 180.0)   # degrees
    scale_range: tuple[float, float] = (0.8, 1.2)
    translation_range: tuple[float, float] = (-20.0, 20.0)  # pixels, per axis
    crop: int = 224


def affine_crop(image: np.ndarray | None, mask: np.ndarray | None, angle_deg: float, scale: float,
                shift: tuple[float, float], crop: int, shape: tuple[int, int] | None = None,
                cval: float | None = None):
    """Rotate by ``angle_deg`` (counter-clockwise in array display), scale and
    translate about the image centre, then cut the central ``crop x crop``
    window.  The image is interpolated linearly, the mask by nearest
    neighbour; both share one backward mapping.
    """
    ref = image if image is not None else mask
    H, W = shape or ref.shape
    if crop > min(H, W):
        raise ValueError(f"crop {crop} exceeds image size {H}x{W}")
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    # output offset r from crop centre -> source = R(-theta) r / scale + centre - shift
    inv = np.array([[c, s], [-s, c]]) / scale
    out_centre = np.array([(crop - 1) / 2.0, (crop - 1) / 2.0])
    in_centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0]) - np.asarray(shift, dtype=np.float64)
    offset = in_centre - inv @ out_centre
    img_out = mask_out = None
    if image is not None:
        fill = float(np.percentile(image, 1)) if cval is None else cval
        img_out = ndimage.affine_transform(image.astype(np.float64), inv, offset=offset,
                                           output_shape=(crop, crop), order=1, mode="constant", cval=fill)
    if mask is not None:
        mask_out = ndimage.affine_transform(mask, inv, offset=offset, output_shape=(crop, crop),
                                            order=0, mode="constant", cval=0)
    return img_out, mask_out


def augment(image: np.ndarray | None, mask: np.ndarray | None, cfg: AugmentConfig, seed):
    """Random rotation, scale and translation followed by a centred crop."""
    rng = np.random.default_rng(seed)
    angle = rng.uniform(*cfg.rotation_range)
    scale = rng.uniform(*cfg.scale_range)
    shift = tuple(rng.uniform(*cfg.translation_range, size=2))
    return affine_crop(image, mask, angle, scale, shift, cfg.crop)


def dihedral(array: np.ndarray) -> list[np.ndarray]:
    """The 8 images reachable by 90-degree rotations and flips."""
    out = []
    for flip in (False, True):
        base = array[:, ::-1] if flip else array
        out += [np.ascontiguousarray(np.rot90(base, k)) for k in range(4)]
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    name: str
    image_dir: str
    mask_dir: str | None = None
    splits: dict[str, list[str]] = field(default_factory=dict)
    percentiles: tuple[float, float] = (1.0, 99.0)
    allow_rgb: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        d["percentiles"] = tuple(d.get("percentiles", (1.0, 99.0)))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.suffix == ".toml":
            from .config import load_toml
            return cls.from_dict(load_toml(path))
        return cls.from_dict(json.loads(path.read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _split_by_sizes(files: list[str], sizes: Sequence[int]) -> dict[str, list[str]]:
    if sum(sizes) != len(files):
        raise DatasetError(f"split sizes {tuple(sizes)} do not add up to {len(files)} images")
    out, start = {}, 0
    for name, n in zip(SPLITS, sizes):
        out[name] = files[start:start + n]
        start += n
    return out


def layout_manifest(root, name: str, image_subdir: str = "images", mask_subdir: str | None = "masks",
                    split_sizes: Sequence[int] | None = None) -> DatasetManifest:
    """Manifest for a folder with ``images/`` and optional ``masks/``.

    Split lists are taken from ``metadata/{training,validation,test}.txt``
    when present (matched by file stem), otherwise the sorted file list is
    cut by ``split_sizes`` (default: half/quarter/quarter).
    """
    root = Path(root)
    image_dir = root / image_subdir
    if not image_dir.is_dir():
        raise DatasetError(f"missing image folder {image_dir}")
    files = [p.name for p in list_images(image_dir)]
    if not files:
        raise DatasetError(f"no images in {image_dir}")
    mask_dir = root / mask_subdir if mask_subdir and (root / mask_subdir).is_dir() else None
    meta = root / "metadata"
    split_files = [meta / f for f in ("training.txt", "validation.txt", "test.txt")]
    if all(f.exists() for f in split_files):
        by_stem = {Path(f).stem: f for f in files}
        splits = {}
        for name_, f in zip(SPLITS, split_files):
            stems = [Path(line.strip()).stem for line in f.read_text().splitlines() if line.strip()]
            missing = [s for s in stems if s not in by_stem]
            if missing:
                raise DatasetError(f"{f}: {len(missing)} listed files missing, e.g. {missing[0]}")
            splits[name_] = [by_stem[s] for s in stems]
    else:
        n = len(files)
        sizes = split_sizes or (n // 2, n // 4, n - n // 2 - n // 4)
        splits = _split_by_sizes(files, sizes)
    return DatasetManifest(name=name, image_dir=str(image_dir),
                           mask_dir=str(mask_dir) if mask_dir else None, splits=splits)


def bbbc039_manifest(root) -> DatasetManifest:
    """U-2 OS layout: 200 images split 100/50/50 unless metadata lists exist."""
    return layout_manifest(root, "BBBC039", split_sizes=(100, 50, 50))


def _file_digest(path: Path) -> str:
    h = hashlib.sha1()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Dataset:
    """Validated dataset handle.

    Training code only ever sees :meth:`train_images`; annotations are
    reachable through :meth:`annotated_pairs` for the validation and test
    splits.
    """

    def __init__(self, manifest: DatasetManifest, index: dict[str, dict]):
        self.manifest = manifest
        self.index = index

    def split(self, name: str) -> list[str]:
        return list(self.manifest.splits.get(name, []))

    def split_sizes(self) -> dict[str, int]:
        return {k: len(self.split(k)) for k in SPLITS}

    def load_image(self, fname: str) -> np.ndarray:
        """Image ``fname`` normalised to [0, 1] with its cached percentiles."""
        entry = self.index[fname]
        img = read_image(Path(self.manifest.image_dir) / fname, allow_rgb=self.manifest.allow_rgb)
        return normalize_percentile(img, stats=(entry["p_low"], entry["p_high"]))

    def train_images(self) -> list[np.ndarray]:
        return [self.load_image(f) for f in self.split("train")]

    def annotated_pairs(self, split: str, limit: int | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        if split == "train":
            raise DatasetError("training annotations are never exposed")
        if self.manifest.mask_dir is None:
            raise DatasetError(f"dataset {self.manifest.name} has no mask folder")
        files = self.split(split)[:limit]
        pairs = []
        for f in files:
            mask_path = _find_mask(Path(self.manifest.mask_dir), f)
            pairs.append((self.load_image(f), read_mask(mask_path)))
        return pairs


def _find_mask(mask_dir: Path, image_name: str) -> Path:
    stem = Path(image_name).stem
    for suffix in IMAGE_SUFFIXES:
        cand = mask_dir / f"{stem}{suffix}"
        if cand.exists():
            return cand
    raise DatasetError(f"no mask for {image_name} in {mask_dir}")


def ingest(manifest: DatasetManifest, cache_dir=None) -> Dataset:
    """Validate a manifest and index its files.

    Every listed image is decoded once; content hashes and normalisation
    percentiles are cached in ``cache_dir/index.json`` when given.
    """
    listed = [f for s in SPLITS for f in manifest.splits.get(s, [])]
    if not listed:
        raise DatasetError(f"manifest {manifest.name!r} lists no images")
    seen: set[str] = set()
    for s in SPLITS:
        for f in manifest.splits.get(s, []):
            if f in seen:
                raise DatasetError(f"{f} appears in more than one split")
            seen.add(f)
    image_dir = Path(manifest.image_dir)
    cache = {}
    cache_file = Path(cache_dir) / "index.json" if cache_dir else None
    if cache_file and cache_file.exists():
        cache = json.loads(cache_file.read_text())
    index = {}
    for f in listed:
        path = image_dir / f
        if not path.exists():
            raise DatasetError(f"missing image {path}")
        digest = _file_digest(path)
        entry = cache.get(f)
        if entry is None or entry.get("sha1") != digest:
            img = read_image(path, allow_rgb=manifest.allow_rgb)
            lo, hi = np.percentile(img, manifest.percentiles)
            entry = {"sha1": digest, "p_low": float(lo), "p_high": float(hi), "shape": list(img.shape)}
        index[f] = entry
    if manifest.mask_dir is not None:
        mask_dir = Path(manifest.mask_dir)
        for s in ("val", "test"):
            for f in manifest.splits.get(s, []):
                read_mask(_find_mask(mask_dir, f))
    if cache_file:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps(index, indent=1))
    log.info("ingested %s: %s", manifest.name, {s: len(manifest.splits.get(s, [])) for s in SPLITS})
    return Dataset(manifest, index)
