"""The three preprocessing approaches: Gaussian blur, Gabor filtering, and
Sobel edge detection with morphological spur pruning.

All convolutions share one direct engine with border extension.  The engine
computes true convolution, out(x, y) = sum_ij k(i, j) * img(x - i, y - j),
accumulated in float64; every kernel used here is either symmetric or consumed
through a magnitude, so the flip never shows up in results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyBank, EmptyImage
from .image_core import GrayImage

_PAD_MODE = {"replicate": "edge", "reflect": "symmetric"}


@dataclass(frozen=True)
class Kernel2D:
    """Square convolution kernel with odd side 2*radius + 1, row-major weights."""

    radius: int
    weights: np.ndarray

    def __post_init__(self):
        side = 2 * self.radius + 1
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (side, side):
            raise ValueError(f"kernel weights must be {side}x{side}, got {w.shape}")
        if not np.isfinite(w).all():
            raise ValueError("kernel weights must be finite")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class GaussianParams:
    sigma: float = 1.0
    radius: int | None = None  # None -> ceil(3 * sigma)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.radius is None:
            object.__setattr__(self, "radius", max(1, math.ceil(3.0 * self.sigma)))
        if self.radius < 1:
            raise ValueError("radius must be >= 1")


@dataclass(frozen=True)
class GaborParams:
    wavelength: float = 8.0
    theta: float = 0.0
    sigma: float = 3.0
    gamma: float = 0.5
    psi: float = 0.0
    radius: int = 9

    def __post_init__(self):
        if not (self.wavelength > 0 and self.sigma > 0 and self.gamma > 0):
            raise ValueError("wavelength, sigma and gamma must be > 0")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")


@dataclass(frozen=True)
class SobelPruneParams:
    edge_threshold: float = 0.15  # fraction of the max gradient magnitude
    spur_iterations: int = 3

    def __post_init__(self):
        if not 0.0 <= self.edge_threshold <= 1.0:
            raise ValueError("edge_threshold must lie in [0, 1]")
        if self.spur_iterations < 0:
            raise ValueError("spur_iterations must be >= 0")


def default_gabor_bank(
    orientations: int = 8,
    wavelength: float = 8.0,
    sigma: float = 3.0,
    gamma: float = 0.5,
    psi: float = 0.0,
    radius: int = 9,
) -> list[GaborParams]:
    """Bank of evenly spaced orientations theta = k*pi/orientations."""
    if orientations < 1:
        raise EmptyBank("orientations must be >= 1")
    return [
        GaborParams(wavelength, k * math.pi / orientations, sigma, gamma, psi, radius)
        for k in range(orientations)
    ]


def _convolve_arr(arr: np.ndarray, weights: np.ndarray, border: str) -> np.ndarray:
    """Direct 2-D convolution with border extension; float64 accumulation."""
    if border not in _PAD_MODE:
        raise ValueError(f"border must be one of {tuple(_PAD_MODE)}")
    r = weights.shape[0] // 2
    a = arr.astype(np.float64, copy=False)
    padded = np.pad(a, r, mode=_PAD_MODE[border]) if r else a
    win = sliding_window_view(padded, weights.shape)
    flipped = weights[::-1, ::-1].astype(np.float64)
    return np.einsum("xykl,kl->xy", win, flipped, optimize=True)


def convolve2d(img: GrayImage, k: Kernel2D, border: str = "replicate") -> GrayImage:
    """Convolve an image with a kernel.  Output is the same size, NOT clamped."""
    if img.data.size == 0:
        raise EmptyImage("empty image")
    return GrayImage(_convolve_arr(img.data, k.weights, border).astype(np.float32))


def gaussian_kernel(p: GaussianParams) -> Kernel2D:
    """Isotropic Gaussian weights exp(-(i^2+j^2)/(2 sigma^2)), normalized to sum 1."""
    d = np.arange(-p.radius, p.radius + 1, dtype=np.float64)
    g2 = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * p.sigma**2))
    return Kernel2D(p.radius, g2 / g2.sum())


def _gauss1d(p: GaussianParams) -> np.ndarray:
    d = np.arange(-p.radius, p.radius + 1, dtype=np.float64)
    g = np.exp(-(d**2) / (2.0 * p.sigma**2))
    return g / g.sum()


def _blur1d(a: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    # Symmetric paired accumulation: g[r-d]*(left+right) is invariant under
    # flipping the axis, which makes blur/flip commutation bit-exact.
    r = g.size // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    ap = np.pad(a, pad, mode="edge")
    n = a.shape[axis]

    def seg(off):
        idx = [slice(None), slice(None)]
        idx[axis] = slice(off, off + n)
        return ap[tuple(idx)]

    out = g[r] * seg(r)
    for d in range(1, r + 1):
        out += g[r - d] * (seg(r - d) + seg(r + d))
    return out


def gaussian_blur(img: GrayImage, p: GaussianParams) -> GrayImage:
    """Gaussian blur (Approach 1), clamped to [0, 1].

    Runs two separable 1-D passes with replicate borders; replicate extension
    factorizes per axis, so this equals the full 2-D convolution.
    """
    if img.data.size == 0:
        raise EmptyImage("empty image")
    g = _gauss1d(p)
    out = _blur1d(_blur1d(img.data.astype(np.float64), g, axis=1), g, axis=0)
    return GrayImage(np.clip(out, 0.0, 1.0).astype(np.float32))


def gabor_kernel(p: GaborParams) -> Kernel2D:
    """Real even Gabor kernel, unnormalized.

    With x' = x cos(theta) + y sin(theta) and y' = -x sin(theta) + y cos(theta):
    w(x, y) = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x'/lambda + psi).
    weights[radius + y, radius + x] holds w(x, y).
    """
    r = p.radius
    d = np.arange(-r, r + 1, dtype=np.float64)
    yy, xx = np.meshgrid(d, d, indexing="ij")
    c, s = math.cos(p.theta), math.sin(p.theta)
    xp = xx * c + yy * s
    yp = -xx * s + yy * c
    env = np.exp(-(xp**2 + (p.gamma**2) * yp**2) / (2.0 * p.sigma**2))
    carrier = np.cos(2.0 * math.pi * xp / p.wavelength + p.psi)
    return Kernel2D(r, env * carrier)


def gabor_response_raw(img: GrayImage, bank: list[GaborParams]) -> np.ndarray:
    """Per-pixel maximum of the bank's convolution responses, before rescaling."""
    if not bank:
        raise EmptyBank("gabor bank is empty")
    if img.data.size == 0:
        raise EmptyImage("empty image")
    best = None
    for p in bank:
        resp = _convolve_arr(img.data, gabor_kernel(p).weights, "replicate")
        best = resp if best is None else np.maximum(best, resp)
    return best


def gabor_response(img: GrayImage, bank: list[GaborParams]) -> GrayImage:
    """Approach 2: max over an orientation bank, min-max rescaled to [0, 1].

    A degenerate response (max == min) maps to all zeros.
    """
    raw = gabor_response_raw(img, bank)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return GrayImage(np.zeros_like(raw, dtype=np.float32))
    return GrayImage(((raw - lo) / (hi - lo)).astype(np.float32))


# Standard Sobel pair: SOBEL_X responds to horizontal gradients, SOBEL_Y is its
# transpose.  Signs are irrelevant downstream (only the magnitude is used).
SOBEL_X = Kernel2D(1, np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64))
SOBEL_Y = Kernel2D(1, SOBEL_X.weights.T.copy())


def sobel_magnitude(img: GrayImage) -> GrayImage:
    """Gradient magnitude sqrt(gx^2 + gy^2) with replicate borders, unclamped."""
    if img.data.size == 0:
        raise EmptyImage("empty image")
    gx = _convolve_arr(img.data, SOBEL_X.weights, "replicate")
    gy = _convolve_arr(img.data, SOBEL_Y.weights, "replicate")
    return GrayImage(np.hypot(gx, gy).astype(np.float32))


def prune_spurs(mask: np.ndarray, iterations: int) -> np.ndarray:
    """Iteratively delete spur pixels from a {0,1} map.

    Each iteration simultaneously removes every 1-pixel with at most one
    eight-connected 1-neighbor (pixels beyond the border count as 0).  Stops
    early once a pass changes nothing.
    """
    m = np.asarray(mask, dtype=np.uint8)
    for _ in range(iterations):
        if not m.any():
            break
        win = sliding_window_view(np.pad(m, 1), (3, 3))
        neighbors = win.sum(axis=(2, 3)) - m
        nxt = ((m == 1) & (neighbors >= 2)).astype(np.uint8)
        if np.array_equal(nxt, m):
            break
        m = nxt
    return m


def sobel_prune(img: GrayImage, p: SobelPruneParams) -> GrayImage:
    """Approach 3: Sobel magnitude, relative threshold, then spur pruning.

    Pixels with magnitude >= edge_threshold * max(magnitude) form the edge
    set; a zero-gradient image yields an empty set.  Returns a {0, 1}-valued
    GrayImage so it can feed the network directly.
    """
    mag = sobel_magnitude(img).data.astype(np.float64)
    peak = mag.max()
    if peak <= 0.0:
        return GrayImage(np.zeros_like(mag, dtype=np.float32))
    edges = (mag >= p.edge_threshold * peak).astype(np.uint8)
    pruned = prune_spurs(edges, p.spur_iterations)
    return GrayImage(pruned.astype(np.float32))
