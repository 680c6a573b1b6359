"""Input-purification defenses: mean filter, pixel deflection, JPEG.

Each defense maps an image in [0, 1] with layout (C, H, W), or a batch
(B, C, H, W), to an array of the same shape and range. None of them is
differentiated through, so they work on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dctn, idctn

DEFENSE_KINDS = ("mean_filter", "pixel_deflection", "jpeg")


@dataclass(frozen=True)
class DefenseConfig:
    """One configured defense.

    Defaults are stand-ins: the cited defenses' tuned settings are not
    given, so the window follows the "sigma=5" mean filter and JPEG uses the
    common quality 75.
    """

    kind: str
    name: str = ""
    window: int = 5
    deflections: int = 64
    radius: int = 4
    strength: float = 0.04
    quality: int = 75
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}; expected one of {DEFENSE_KINDS}")
        if not self.name:
            object.__setattr__(self, "name", self.kind)
        if self.kind == "mean_filter" and (self.window < 1 or self.window % 2 == 0):
            raise ValueError(f"mean_filter window must be odd and positive, got {self.window}")
        if self.kind == "jpeg" and not 1 <= self.quality <= 100:
            raise ValueError(f"jpeg quality must lie in [1, 100], got {self.quality}")
        if self.kind == "pixel_deflection":
            if self.radius < 1:
                raise ValueError("pixel_deflection radius must be at least 1")
            if self.deflections < 0 or self.strength < 0:
                raise ValueError("pixel_deflection count and strength must be nonnegative")

    def apply(self, x, seed=None):
        """Run this defense; ``seed`` overrides the configured deflection seed."""
        if self.kind == "mean_filter":
            return mean_filter(x, self.window)
        if self.kind == "jpeg":
            return jpeg_compress(x, self.quality)
        s = self.seed if seed is None else seed
        return pixel_deflection(x, self.deflections, self.radius, self.strength, s)


def _batched(fn):
    def wrapper(x, *args, **kwargs):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            return fn(x[None], *args, **kwargs)[0]
        if x.ndim != 4:
            raise ValueError(f"{fn.__name__}: expected (C, H, W) or (B, C, H, W), got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def mean_filter(x, k=5):
    """k x k box average per channel with edge-replicated borders."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"mean_filter: window must be odd, got {k}")
    if k > min(x.shape[-2:]):
        raise ValueError(f"mean_filter: window {k} exceeds image extent {x.shape[-2:]}")
    r = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.clip(win.mean(axis=(-2, -1)), 0.0, 1.0)


# pixel deflection

def deflect(x, count, radius, rng):
    """Replace ``count`` random pixels by a random neighbour within ``radius``.

    Sources are read from the undeflected input, so every output pixel
    equals some input pixel of its own window. Returns the deflected image
    and the (target, source) coordinates applied, in order.
    """
    C, H, W = x.shape
    ty = rng.integers(0, H, count)
    tx = rng.integers(0, W, count)
    sy = np.clip(ty + rng.integers(-radius, radius + 1, count), 0, H - 1)
    sx = np.clip(tx + rng.integers(-radius, radius + 1, count), 0, W - 1)
    out = x.copy()
    # sequential semantics: a later deflection of the same target wins
    for i in range(count):
        out[:, ty[i], tx[i]] = x[:, sy[i], sx[i]]
    return out, np.stack([ty, tx, sy, sx], axis=1)


def haar_soft_threshold(x, strength):
    """Single-level orthonormal 2-D Haar transform, soft-thresholded details.

    Odd extents are edge-padded to even and cropped back afterwards.
    """
    if strength <= 0:
        return x.copy()
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, H % 2), (0, W % 2)), mode="edge")
    a = xp[:, 0::2, 0::2]
    b = xp[:, 0::2, 1::2]
    c = xp[:, 1::2, 0::2]
    d = xp[:, 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2
    hh = (a - b - c + d) / 2
    lh, hl, hh = (np.sign(t) * np.maximum(np.abs(t) - strength, 0.0) for t in (lh, hl, hh))
    out = np.empty_like(xp)
    out[:, 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[:, 0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[:, 1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[:, 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out[:, :H, :W]


@_batched
def pixel_deflection(x, count=64, radius=4, strength=0.04, seed=0):
    """Random local pixel deflections followed by Haar soft-threshold denoising.

    Batch members get independent streams spawned from ``seed``.
    """
    if radius < 1:
        raise ValueError("pixel_deflection: radius must be at least 1")
    streams = np.random.SeedSequence(seed).spawn(len(x)) if len(x) > 1 else [np.random.SeedSequence(seed)]
    out = np.empty_like(x)
    for i, ss in enumerate(streams):
        deflected, _ = deflect(x[i], count, radius, np.random.default_rng(ss))
        out[i] = haar_soft_threshold(deflected, strength)
    return np.clip(out, 0.0, 1.0)


# JPEG

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def quality_tables(q):
    """IJG quality scaling of the Annex K tables; entries clipped to [1, 255]."""
    if not 1 <= q <= 100:
        raise ValueError(f"jpeg: quality must lie in [1, 100], got {q}")
    factor = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    tables = []
    for base in (LUMA_TABLE, CHROMA_TABLE):
        t = np.floor((base * factor + 50.0) / 100.0)
        tables.append(np.clip(t, 1.0, 255.0))
    return tables


def rgb_to_ycbcr(x):
    """JFIF full-range conversion on the 0-255 scale; channel axis is -3."""
    r, g, b = x[..., 0, :, :], x[..., 1, :, :], x[..., 2, :, :]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-3)


def ycbcr_to_rgb(x):
    y, cb, cr = x[..., 0, :, :], x[..., 1, :, :] - 128.0, x[..., 2, :, :] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-3)


def _blocks(plane):
    # (B, H, W) -> (B, H/8, W/8, 8, 8)
    B, H, W = plane.shape
    return plane.reshape(B, H // 8, 8, W // 8, 8).transpose(0, 1, 3, 2, 4)


def _unblocks(blocks):
    B, nh, nw, _, _ = blocks.shape
    return blocks.transpose(0, 1, 3, 2, 4).reshape(B, nh * 8, nw * 8)


def quantize_blocks(coeffs, table):
    """Round DCT coefficients to multiples of the quantisation table."""
    return np.round(coeffs / table) * table


def jpeg_plane(plane, table):
    """Level shift, 8x8 DCT, quantise/dequantise and inverse DCT of a (B, H, W) plane."""
    blocks = _blocks(plane - 128.0)
    coeffs = dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    recon = idctn(quantize_blocks(coeffs, table), type=2, axes=(-2, -1), norm="ortho")
    return _unblocks(recon) + 128.0


@_batched
def jpeg_compress(x, q=75):
    """Lossy JPEG round trip without entropy coding (4:4:4, no subsampling).

    Non-RGB inputs are treated as independent luminance planes.
    """
    luma, chroma = quality_tables(q)
    B, C, H, W = x.shape
    ph, pw = (-H) % 8, (-W) % 8
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") * 255.0
    if C == 3:
        ycc = rgb_to_ycbcr(xp)
        planes = [jpeg_plane(ycc[:, i], luma if i == 0 else chroma) for i in range(3)]
        out = ycbcr_to_rgb(np.stack(planes, axis=1))
    else:
        out = np.stack([jpeg_plane(xp[:, i], luma) for i in range(C)], axis=1)
    out = out[:, :, :H, :W] / 255.0
    return np.clip(out, 0.0, 1.0)
