"""Image and mask primitives: decoding, encoding, resizing, grayscale reduction.

GrayImage wraps a 2-D float32 array indexed [row, col].  Anything loaded from
or saved to disk lives in [0, 1]; raw filter responses (e.g. Sobel magnitude)
may exceed that range and are clamped only where an operation says so.
BinaryMask wraps a 2-D uint8 array with values in {0, 1}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DatasetEmpty,
    PairMismatch,
    UnreadableFile,
    UnsupportedFormat,
    WriteFailure,
    ZeroSizedImage,
    ZeroSizedTarget,
)

# PIL reports P5 PGM and P6 PPM files under the single "PPM" format name.
_ALLOWED_FORMATS = {"PNG", "PPM"}

GRAY_MODES = ("green-channel", "luminance")


@dataclass(frozen=True)
class GrayImage:
    """Dense 2-D float32 intensity field, row-major."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if not isinstance(d, np.ndarray) or d.ndim != 2:
            raise ValueError("GrayImage expects a 2-D numpy array")
        if d.size == 0:
            raise ZeroSizedImage("image has no pixels")
        if d.dtype != np.float32:
            d = d.astype(np.float32)
            object.__setattr__(self, "data", d)
        if not np.isfinite(d).all():
            raise ValueError("GrayImage contains non-finite values")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """Dense 2-D uint8 field with values in {0, 1}."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if not isinstance(d, np.ndarray) or d.ndim != 2:
            raise ValueError("BinaryMask expects a 2-D numpy array")
        if d.size == 0:
            raise ZeroSizedImage("mask has no pixels")
        if d.dtype != np.uint8:
            d = d.astype(np.uint8)
            object.__setattr__(self, "data", d)
        if d.max(initial=0) > 1:
            raise ValueError("BinaryMask values must be 0 or 1")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ManifestEntry:
    """One image/mask pair plus its provenance."""

    image: str
    mask: str
    origin_id: int
    transform: str


@dataclass
class DatasetManifest:
    """Ordered list of image/mask pairs."""

    entries: list[ManifestEntry]

    def __len__(self) -> int:
        return len(self.entries)


def _decode(path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
    except UnidentifiedImageError as e:
        raise UnreadableFile(f"{path}: not a decodable image ({e})") from e
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as e:
        raise UnreadableFile(f"{path}: {e}") from e
    if im.format not in _ALLOWED_FORMATS:
        raise UnsupportedFormat(
            f"{path}: format {im.format!r} not supported; convert to PNG/PGM/PPM"
        )
    if im.width == 0 or im.height == 0:
        raise ZeroSizedImage(str(path))
    return im


def _to_unit_gray(im: Image.Image, gray_mode: str) -> np.ndarray:
    """Reduce a PIL image to float64 intensities in [0, 1]."""
    if im.mode == "1":
        im = im.convert("L")
    if im.mode in ("P", "RGBA", "LA"):
        im = im.convert("RGB")
    mode = im.mode
    if mode == "L":
        return np.asarray(im, dtype=np.float64) / 255.0
    if mode in ("I", "I;16", "I;16L", "I;16B"):
        # 16-bit grayscale (PNG); PIL exposes it as I or I;16 depending on version
        return np.asarray(im, dtype=np.float64) / 65535.0
    if mode == "RGB":
        arr = np.asarray(im, dtype=np.float64)
        if gray_mode == "green-channel":
            return arr[:, :, 1] / 255.0
        # Rec.601 luminance
        return (0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]) / 255.0
    raise UnsupportedFormat(f"unsupported pixel mode {mode!r}")


def load_image(path, gray_mode: str = "green-channel") -> GrayImage:
    """Load a PNG/PGM/PPM file as unit-interval grayscale.

    RGB inputs are reduced per `gray_mode`: the green channel (default, the
    high-contrast channel for retinal vessels) or Rec.601 luminance.
    """
    if gray_mode not in GRAY_MODES:
        raise ValueError(f"gray_mode must be one of {GRAY_MODES}")
    arr = _to_unit_gray(_decode(path), gray_mode)
    return GrayImage(np.clip(arr, 0.0, 1.0).astype(np.float32))


def load_mask(path, threshold: float = 0.5, resize_to: tuple[int, int] | None = None) -> BinaryMask:
    """Load a grayscale file and binarize at `threshold` (pixel=1 iff value >= threshold).

    Optional `resize_to=(w, h)` resizes with nearest-neighbor so labels stay binary.
    """
    arr = _to_unit_gray(_decode(path), "luminance")
    mask = BinaryMask((arr >= threshold).astype(np.uint8))
    if resize_to is not None:
        mask = resize_nearest(mask, resize_to[0], resize_to[1])
    return mask


def resize_bilinear(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    """Resize with half-pixel-center bilinear sampling, output clamped to [0, 1].

    Source coordinate for destination index d is (d + 0.5) * in/out - 0.5;
    samples outside the grid replicate the border pixel.
    """
    if out_w < 1 or out_h < 1:
        raise ZeroSizedTarget(f"target {out_w}x{out_h}")
    src = img.data.astype(np.float64)
    h, w = src.shape
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    top = src[np.ix_(y0c, x0c)] * (1.0 - fx)[None, :] + src[np.ix_(y0c, x1c)] * fx[None, :]
    bot = src[np.ix_(y1c, x0c)] * (1.0 - fx)[None, :] + src[np.ix_(y1c, x1c)] * fx[None, :]
    out = top * (1.0 - fy)[:, None] + bot * fy[:, None]
    return GrayImage(np.clip(out, 0.0, 1.0).astype(np.float32))


def resize_nearest(mask: BinaryMask, out_w: int, out_h: int) -> BinaryMask:
    """Nearest-neighbor mask resize: source index = floor((d + 0.5) * in/out), clamped."""
    if out_w < 1 or out_h < 1:
        raise ZeroSizedTarget(f"target {out_w}x{out_h}")
    h, w = mask.data.shape
    ix = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), 0, w - 1)
    iy = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), 0, h - 1)
    return BinaryMask(mask.data[np.ix_(iy, ix)].copy())


def save_image(img: GrayImage | BinaryMask, path) -> None:
    """Write an 8-bit PNG or PGM (by file extension).

    GrayImage values are clamped to [0, 1] and scaled to 0..255; BinaryMask
    writes 0/255.  Round-tripping a GrayImage is accurate to 1/255 per pixel,
    a BinaryMask exactly.
    """
    suffix = Path(path).suffix.lower()
    if suffix not in (".png", ".pgm"):
        raise UnsupportedFormat(f"{path}: save supports .png and .pgm only")
    if isinstance(img, BinaryMask):
        raw = (img.data * np.uint8(255)).astype(np.uint8)
    else:
        raw = np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(raw, mode="L").save(path)
    except (OSError, ValueError) as e:
        raise WriteFailure(f"{path}: {e}") from e


def save_manifest(manifest: DatasetManifest, path) -> None:
    records = [
        {"image": e.image, "mask": e.mask, "origin_id": e.origin_id, "transform": e.transform}
        for e in manifest.entries
    ]
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    records = json.loads(Path(path).read_text())
    return DatasetManifest(
        [ManifestEntry(r["image"], r["mask"], int(r["origin_id"]), r["transform"]) for r in records]
    )


def discover_dataset(root) -> DatasetManifest:
    """Pair `<root>/images/*` with `<root>/masks/*` by sorted filename order."""
    root = Path(root)
    images = sorted(
        p for p in (root / "images").glob("*") if p.suffix.lower() in (".png", ".pgm", ".ppm")
    )
    masks = sorted(p for p in (root / "masks").glob("*") if p.suffix.lower() in (".png", ".pgm"))
    if not images:
        raise DatasetEmpty(f"no images under {root}/images")
    if len(images) != len(masks):
        raise PairMismatch(f"{len(images)} images vs {len(masks)} masks under {root}")
    entries = [
        ManifestEntry(str(img), str(msk), i, "orig")
        for i, (img, msk) in enumerate(zip(images, masks))
    ]
    return DatasetManifest(entries)
