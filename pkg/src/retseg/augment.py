"""Deterministic dataset augmentation (flips, rotation) and seeded splitting.

Each original expands to exactly three variants (hflip, vflip, rotate), which
turns 40 originals into the 120-image working set; the split is an explicit
LCG-driven Fisher-Yates shuffle so it is identical on every platform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CountMismatch, PairDimensionMismatch
from .image_core import (
    BinaryMask,
    DatasetManifest,
    GrayImage,
    ManifestEntry,
    load_image,
    load_mask,
    save_image,
)

AXES = ("horizontal", "vertical")


@dataclass
class SplitManifest:
    """Disjoint train/val/test partitions plus the seed that produced them."""

    train: list[ManifestEntry]
    val: list[ManifestEntry]
    test: list[ManifestEntry]
    seed: int


def flip(img, axis: str):
    """Reverse column order (horizontal) or row order (vertical); exact involution."""
    if axis == "horizontal":
        arr = img.data[:, ::-1]
    elif axis == "vertical":
        arr = img.data[::-1, :]
    else:
        raise ValueError(f"axis must be one of {AXES}")
    return type(img)(np.ascontiguousarray(arr))


def _rotation_coords(h: int, w: int, degrees: float):
    # Inverse mapping about the pixel-grid center ((w-1)/2, (h-1)/2).
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    sx = cx + c * xx + s * yy
    sy = cy - s * xx + c * yy
    return sx, sy


def rotate(img: GrayImage, degrees: float, interp: str = "bilinear") -> GrayImage:
    """Rotate about the image center, same output size, out-of-frame fill 0."""
    if interp != "bilinear":
        raise ValueError("only bilinear interpolation is supported for images")
    if not math.isfinite(degrees):
        raise ValueError("rotation angle must be finite")
    a = img.data.astype(np.float64)
    h, w = a.shape
    sx, sy = _rotation_coords(h, w, degrees)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((h, w), dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (0, 1, fx * (1.0 - fy)),
        (1, 0, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ):
        yi = y0 + dy
        xi = x0 + dx
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out[ok] += wgt[ok] * a[yi[ok], xi[ok]]
    return GrayImage(out.astype(np.float32))


def rotate_mask(mask: BinaryMask, degrees: float) -> BinaryMask:
    """Rotate a mask with nearest-neighbor sampling; out-of-frame fill 0."""
    if not math.isfinite(degrees):
        raise ValueError("rotation angle must be finite")
    h, w = mask.data.shape
    sx, sy = _rotation_coords(h, w, degrees)
    xi = np.rint(sx).astype(np.int64)
    yi = np.rint(sy).astype(np.int64)
    ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros((h, w), dtype=np.uint8)
    out[ok] = mask.data[yi[ok], xi[ok]]
    return BinaryMask(out)


def _variant_path(path: str, tag: str) -> str:
    p = Path(path)
    return str(p.with_name(f"{p.stem}__{tag}{p.suffix}"))


def augment_dataset(manifest: DatasetManifest, rotation_degrees: float = 15.0) -> DatasetManifest:
    """Expand every original into exactly three variants: hflip, vflip, rotate.

    The identical transform is applied to image and mask; variant files are
    written beside the originals with `__<tag>` name suffixes.  Originals are
    not part of the returned manifest (N in, 3N out).
    """
    rot_tag = f"rot{rotation_degrees:g}"
    out: list[ManifestEntry] = []
    for e in manifest.entries:
        img = load_image(e.image)
        mask = load_mask(e.mask)
        if (img.height, img.width) != (mask.height, mask.width):
            raise PairDimensionMismatch(
                f"{e.image} is {img.width}x{img.height} but {e.mask} is {mask.width}x{mask.height}"
            )
        variants = (
            ("hflip", flip(img, "horizontal"), flip(mask, "horizontal")),
            ("vflip", flip(img, "vertical"), flip(mask, "vertical")),
            (rot_tag, rotate(img, rotation_degrees), rotate_mask(mask, rotation_degrees)),
        )
        for tag, im2, mk2 in variants:
            ip = _variant_path(e.image, tag)
            mp = _variant_path(e.mask, tag)
            save_image(im2, ip)
            save_image(mk2, mp)
            out.append(ManifestEntry(ip, mp, e.origin_id, tag))
    return DatasetManifest(out)


def _lcg_permutation(n: int, seed: int) -> list[int]:
    # Fisher-Yates driven by a 64-bit LCG (Knuth MMIX multiplier/increment),
    # taking the top 31 bits per draw; identical on every platform.
    state = seed & 0xFFFFFFFFFFFFFFFF
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        state = (state * 6364136223846793005 + 1442695040888963407) & 0xFFFFFFFFFFFFFFFF
        j = (state >> 33) % (i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def split_dataset(
    manifest: DatasetManifest,
    counts: tuple[int, int, int],
    seed: int,
    grouped: bool = False,
) -> SplitManifest:
    """Deterministic shuffle then partition into (train, val, test).

    With grouped=True all variants of one original land in the same partition;
    the counts must then be multiples of the per-original variant count.
    """
    n_train, n_val, n_test = counts
    if min(counts) < 0 or n_train + n_val + n_test != len(manifest.entries):
        raise CountMismatch(
            f"counts {counts} do not partition {len(manifest.entries)} entries"
        )
    entries = manifest.entries
    if not grouped:
        order = _lcg_permutation(len(entries), seed)
        shuffled = [entries[i] for i in order]
    else:
        groups: dict[int, list[ManifestEntry]] = {}
        for e in entries:
            groups.setdefault(e.origin_id, []).append(e)
        sizes = {len(g) for g in groups.values()}
        if len(sizes) != 1:
            raise CountMismatch("grouped split needs equal-sized origin groups")
        gsize = sizes.pop()
        if any(c % gsize for c in counts):
            raise CountMismatch(
                f"grouped split counts {counts} must be multiples of group size {gsize}"
            )
        ids = sorted(groups)
        order = _lcg_permutation(len(ids), seed)
        shuffled = [e for i in order for e in groups[ids[i]]]
    train = shuffled[:n_train]
    val = shuffled[n_train : n_train + n_val]
    test = shuffled[n_train + n_val :]
    return SplitManifest(train, val, test, seed)


def save_split(split: SplitManifest, path) -> None:
    def enc(entries):
        return [
            {"image": e.image, "mask": e.mask, "origin_id": e.origin_id, "transform": e.transform}
            for e in entries
        ]

    payload = {
        "seed": split.seed,
        "train": enc(split.train),
        "val": enc(split.val),
        "test": enc(split.test),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_split(path) -> SplitManifest:
    payload = json.loads(Path(path).read_text())

    def dec(records):
        return [
            ManifestEntry(r["image"], r["mask"], int(r["origin_id"]), r["transform"])
            for r in records
        ]

    return SplitManifest(
        dec(payload["train"]), dec(payload["val"]), dec(payload["test"]), int(payload["seed"])
    )
