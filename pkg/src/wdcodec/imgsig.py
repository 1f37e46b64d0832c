"""Deterministic image and tensor substrate.

Planes are 2-D float64 grids, Tensors stack same-shape planes along a
channel axis. Every operation here is a pure function of its arguments;
underlying arrays are marked read-only so shared buffers cannot be
mutated behind a caller's back.

Conventions fixed by this module (and relied on elsewhere):

* ``downsample2x`` convolves with the separable binomial kernel
  [1, 2, 1]/4 per axis at stride 2, mirror boundary (edge pixel not
  repeated), output dims ``ceil(h/2) x ceil(w/2)``.
* ``bilinear_resize`` samples with half-pixel centers,
  ``x_src = (x_dst + 0.5) * src/dst - 0.5``, clamped to the valid range.
  Resizing to the source shape is an exact identity.
* ``gaussian_field`` is a pure function of ``(seed, h, w, c)`` built on a
  64-bit counter generator (splitmix64) feeding a Box-Muller transform.
  The element order and bit layout are part of the codec's wire contract
  and must not change across versions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "ImageIOError",
    "Plane",
    "Tensor",
    "PixelImage",
    "downsample2x",
    "downsample2x_array",
    "bilinear_resize",
    "bilinear_resize_array",
    "conv2d",
    "conv2d_array",
    "gaussian_field",
    "uniform_field",
    "random_uniform",
    "read_image",
    "read_gray",
    "write_image",
]


class ImageIOError(Exception):
    """Raised for unreadable, truncated, or unsupported raster files."""


def _freeze(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Plane:
    """A single 2-D grid of finite real values, shape (h, w)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"Plane requires a 2-D array, got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"Plane dims must be >= 1, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("Plane values must be finite")
        object.__setattr__(self, "data", _freeze(a))

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Tensor:
    """A channel stack of same-shape planes, shape (c, h, w)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3:
            raise ValueError(f"Tensor requires a 3-D array (c, h, w), got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1 or a.shape[2] < 1:
            raise ValueError(f"Tensor dims must be >= 1, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("Tensor values must be finite")
        object.__setattr__(self, "data", _freeze(a))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]

    def plane(self, i: int) -> Plane:
        return Plane(self.data[i])


@dataclass(frozen=True)
class PixelImage(Tensor):
    """An RGB image: 3 channels, values in [0, 1]."""

    def __post_init__(self):
        super().__post_init__()
        if self.data.shape[0] != 3:
            raise ValueError(f"PixelImage requires 3 channels, got {self.data.shape[0]}")
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"PixelImage values must lie in [0, 1], got range [{lo}, {hi}]")


# ---------------------------------------------------------------------------
# Dyadic downsampling
# ---------------------------------------------------------------------------

#: Taps of the separable downsampling kernel (sum exactly 1 in binary floats).
BINOMIAL_TAPS = (0.25, 0.5, 0.25)


def _down_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """Binomial filter + stride 2 along one axis, mirror boundary."""
    n = a.shape[axis]
    if n == 1:
        return a
    n2 = (n + 1) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    ap = np.pad(a, pad, mode="reflect")

    def sl(start):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + 2 * n2 - 1, 2)
        return ap[tuple(idx)]

    return 0.25 * sl(0) + 0.5 * sl(1) + 0.25 * sl(2)


def downsample2x_array(a: np.ndarray) -> np.ndarray:
    """Downsample the trailing two axes of ``a`` by 2 (ceil dims)."""
    return _down_axis(_down_axis(a, a.ndim - 2), a.ndim - 1)


def downsample2x(p: Plane) -> Plane:
    return Plane(downsample2x_array(p.data))


# ---------------------------------------------------------------------------
# Bilinear resizing
# ---------------------------------------------------------------------------


def _axis_samples(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center sample positions: (left index, right index, frac)."""
    x = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    x = np.clip(x, 0.0, src - 1.0)
    i0 = np.floor(x).astype(np.int64)
    i0 = np.minimum(i0, src - 1)
    f = x - i0
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, f


def bilinear_resize_array(a: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Resize the trailing two axes of ``a`` to (h2, w2).

    Uses the fused form ``v0 + f * (v1 - v0)`` so constant inputs are
    reproduced bit-exactly at any target size.
    """
    if h2 < 1 or w2 < 1:
        raise ValueError(f"target dims must be >= 1, got ({h2}, {w2})")
    h, w = a.shape[-2:]
    if (h, w) == (h2, w2):
        return a.copy()
    r0, r1, fr = _axis_samples(h, h2)
    top = a[..., r0, :]
    rows = top + fr[:, None] * (a[..., r1, :] - top)
    c0, c1, fc = _axis_samples(w, w2)
    left = rows[..., :, c0]
    return left + fc * (rows[..., :, c1] - left)


def bilinear_resize(p: Plane, h2: int, w2: int) -> Plane:
    return Plane(bilinear_resize_array(p.data, h2, w2))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _pad_2d(x: np.ndarray, ph0: int, ph1: int, pw0: int, pw1: int, mode: str) -> np.ndarray:
    if max(ph0, ph1, pw0, pw1) == 0:
        return x
    spec = [(0, 0)] * (x.ndim - 2) + [(ph0, ph1), (pw0, pw1)]
    if mode == "zero":
        return np.pad(x, spec, mode="constant")
    # mirror without repeating the edge pixel; degenerate axes replicate
    h, w = x.shape[-2:]
    if (h == 1 and max(ph0, ph1) > 0) or (w == 1 and max(pw0, pw1) > 0):
        return np.pad(x, spec, mode="edge")
    return np.pad(x, spec, mode="reflect")


def _same_pads(n: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def conv2d_array(
    x: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: str = "same",
) -> np.ndarray:
    """Cross-correlate a (ci, h, w) stack with a (co, ci, kh, kw) bank.

    padding: "valid", "same" (zeros), or "same_reflect" (mirror).
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise ValueError(f"expected x (ci,h,w) and kernels (co,ci,kh,kw), got {x.shape} and {kernels.shape}")
    co, ci, kh, kw = kernels.shape
    if x.shape[0] != ci:
        raise ValueError(f"channel mismatch: input has {x.shape[0]} channels, kernels expect {ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"bias shape {bias.shape} does not match {co} output channels")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    h, w = x.shape[1:]
    if padding == "valid":
        if kh > h or kw > w:
            raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w} with valid padding")
        xp = x
    elif padding in ("same", "same_reflect"):
        ph0, ph1 = _same_pads(h, kh, stride)
        pw0, pw1 = _same_pads(w, kw, stride)
        xp = _pad_2d(x, ph0, ph1, pw0, pw1, "zero" if padding == "same" else "mirror")
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (ci, ho, wo, kh, kw)
    ho, wo = windows.shape[1], windows.shape[2]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, ci * kh * kw)
    wmat = kernels.reshape(co, ci * kh * kw)
    out = cols @ wmat.T  # (ho*wo, co)
    out = out.T.reshape(co, ho, wo)
    if bias is not None:
        out = out + bias[:, None, None]
    return out


def conv2d(
    t: Tensor,
    kernels: np.ndarray,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    return Tensor(conv2d_array(t.data, np.asarray(kernels, dtype=np.float64),
                               None if bias is None else np.asarray(bias, dtype=np.float64),
                               stride, padding))


# ---------------------------------------------------------------------------
# Seeded random fields
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def random_uniform(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Elements ``offset .. offset+n-1`` of the seeded uniform stream, in (0, 1).

    Stream element k is splitmix64 output k for the given seed, mapped to
    the open unit interval via the top 53 bits.
    """
    with np.errstate(over="ignore"):
        k = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
        state = (np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + k * _GAMMA) & _MASK
        bits = _mix64(state)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def gaussian_field(seed: int, h: int, w: int, c: int = 1) -> Tensor:
    """Deterministic i.i.d. standard-normal field of shape (c, h, w)."""
    n = c * h * w
    m = (n + 1) // 2
    u1 = random_uniform(seed, m, offset=0)
    u2 = random_uniform(seed, m, offset=m)
    r = np.sqrt(-2.0 * np.log(u1))
    ang = (2.0 * math.pi) * u2
    z = np.empty(2 * m, dtype=np.float64)
    z[0::2] = r * np.cos(ang)
    z[1::2] = r * np.sin(ang)
    return Tensor(z[:n].reshape(c, h, w))


def uniform_field(seed: int, h: int, w: int, c: int = 1) -> Tensor:
    """Deterministic i.i.d. uniform(-1/2, 1/2) field of shape (c, h, w)."""
    u = random_uniform(seed, c * h * w)
    return Tensor((u - 0.5).reshape(c, h, w))


# ---------------------------------------------------------------------------
# Raster file I/O
# ---------------------------------------------------------------------------

_16BIT_MODES = {"I;16", "I;16B", "I;16L", "I;16N", "I", "F"}


def _open_raster(path) -> Image.Image:
    p = Path(path)
    try:
        im = Image.open(p)
        im.load()
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise ImageIOError(f"cannot read image file {p}: {e}") from e
    if im.mode in _16BIT_MODES:
        raise ImageIOError(f"unsupported bit depth in {p}: mode {im.mode} (8-bit required)")
    return im


def read_image(path) -> PixelImage:
    """Read an 8-bit RGB raster file (PNG or binary PPM), scaled to [0, 1]."""
    im = _open_raster(path)
    if im.mode != "RGB":
        im = im.convert("RGB")
    arr = np.asarray(im, dtype=np.float64) / 255.0
    return PixelImage(arr.transpose(2, 0, 1))


def read_gray(path) -> Plane:
    """Read an 8-bit grayscale raster file, scaled to [0, 1]."""
    im = _open_raster(path)
    if im.mode != "L":
        im = im.convert("L")
    return Plane(np.asarray(im, dtype=np.float64) / 255.0)


def write_image(img: PixelImage, path) -> None:
    """Write as 8-bit RGB; format chosen by suffix (.png or .ppm)."""
    p = Path(path)
    arr = np.floor(img.data * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    fmt = {"png": "PNG", "ppm": "PPM"}.get(p.suffix.lower().lstrip("."))
    if fmt is None:
        raise ImageIOError(f"unsupported output format for {p} (use .png or .ppm)")
    try:
        Image.fromarray(arr, mode="RGB").save(p, format=fmt)
    except OSError as e:
        raise ImageIOError(f"cannot write image file {p}: {e}") from e


def write_gray(plane: Plane, path) -> None:
    """Write a [0, 1] plane as an 8-bit grayscale raster file."""
    p = Path(path)
    arr = np.floor(np.clip(plane.data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="L").save(p)
    except OSError as e:
        raise ImageIOError(f"cannot write image file {p}: {e}") from e
