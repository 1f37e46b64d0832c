"""Multi-feature, multi-resolution embeddings for the distortion metric.

Feature extraction applies a backend (the built-in fixed filter bank, or
a small conv net loaded from a weight container) to the image at several
dyadic scales. Every emitted channel becomes one feature with a recorded
relative resolution r (its nominal width ratio to the image). The raw
pixel channels at scale 1 are always the first features.

The filter bank is fixed and reproducible: per input channel it emits
{identity, horizontal/vertical first derivatives, Laplacian, and four
oriented odd/even 5x5 Gabor-like kernels}, each tap set divided by its
L1 norm, plus a stride-2 repeat of the same bank at half resolution.
``filterbank_kernels()`` returns the exact taps.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .imgsig import PixelImage, Tensor, conv2d_array, downsample2x_array

__all__ = [
    "BackendSpec",
    "FeatureMap",
    "FeatureSet",
    "WeightContainerError",
    "ConfigurationError",
    "extract_features",
    "filterbank_kernels",
    "filterbank_backend",
    "convnet_backend",
    "read_weight_container",
    "write_weight_container",
]


class WeightContainerError(Exception):
    """Malformed weight container file."""


class ConfigurationError(Exception):
    """Invalid or incomplete backend configuration."""


@dataclass(frozen=True)
class FeatureMap:
    """One multichannel map plus its nominal resolution ratio r."""

    id: str
    tensor: Tensor
    r: float

    def __post_init__(self):
        if not (0.0 < self.r <= 1.0):
            raise ValueError(f"relative resolution must be in (0, 1], got {self.r}")


@dataclass(frozen=True)
class FeatureSet:
    maps: tuple[FeatureMap, ...]

    def __post_init__(self):
        if not self.maps:
            raise ValueError("FeatureSet must be non-empty")

    @property
    def feature_count(self) -> int:
        return sum(m.tensor.channels for m in self.maps)

    def feature_ids(self) -> list[str]:
        out = []
        for m in self.maps:
            for c in range(m.tensor.channels):
                out.append(f"{m.id}[{c}]")
        return out


@dataclass(frozen=True)
class BackendSpec:
    """Which backend to run and at which dyadic image scales."""

    kind: str = "filterbank"
    scales: tuple[float, ...] = (1.0, 0.5, 0.25)
    weights_path: str | None = None
    layer_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("filterbank", "convnet"):
            raise ConfigurationError(f"unknown backend kind {self.kind!r}")
        if not self.scales or 1.0 not in self.scales:
            raise ConfigurationError("scale list must be non-empty and contain 1")
        for s in self.scales:
            if not (0.0 < s <= 1.0):
                raise ConfigurationError(f"scales must lie in (0, 1], got {s}")
            k = math.log2(1.0 / s)
            if abs(k - round(k)) > 1e-9:
                raise ConfigurationError(f"scales must be powers of 1/2, got {s}")

    def describe(self) -> str:
        sc = ",".join(f"{s:g}" for s in self.scales)
        return f"{self.kind}@[{sc}]"


# ---------------------------------------------------------------------------
# Fixed filter bank
# ---------------------------------------------------------------------------

_GABOR_SIGMA = 1.2
_GABOR_FREQ = math.pi / 2.0


def _gabor(theta: float, odd: bool) -> np.ndarray:
    g = np.arange(5, dtype=np.float64) - 2.0
    yy, xx = np.meshgrid(g, g, indexing="ij")
    env = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * _GABOR_SIGMA ** 2))
    phase = _GABOR_FREQ * (xx * math.cos(theta) + yy * math.sin(theta))
    carrier = np.sin(phase) if odd else np.cos(phase)
    k = env * carrier
    if not odd:
        # remove the DC response so a constant input maps to zero
        k -= env * (k.sum() / env.sum())
    return k


def _embed5(k: np.ndarray) -> np.ndarray:
    out = np.zeros((5, 5))
    kh, kw = k.shape
    r0, c0 = (5 - kh) // 2, (5 - kw) // 2
    out[r0:r0 + kh, c0:c0 + kw] = k
    return out


def filterbank_kernels() -> dict[str, np.ndarray]:
    """The 8 fixed 5x5 kernels, each divided by its L1 norm."""
    raw = {
        "id": _embed5(np.array([[1.0]])),
        "dx": _embed5(np.array([[-1.0, 0.0, 1.0]])),
        "dy": _embed5(np.array([[-1.0], [0.0], [1.0]])),
        "lap": _embed5(np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])),
        "g0e": _gabor(0.0, odd=False),
        "g0o": _gabor(0.0, odd=True),
        "g90e": _gabor(math.pi / 2.0, odd=False),
        "g90o": _gabor(math.pi / 2.0, odd=True),
    }
    return {name: k / np.abs(k).sum() for name, k in raw.items()}


def _bank_array() -> np.ndarray:
    ks = filterbank_kernels()
    return np.stack([ks[n] for n in ("id", "dx", "dy", "lap", "g0e", "g0o", "g90e", "g90o")])[:, None, :, :]


class _FilterbankBackend:
    """Applies the fixed bank per channel at stride 1 and stride 2."""

    def __init__(self):
        self._bank = _bank_array()

    def __call__(self, data: np.ndarray) -> list[tuple[np.ndarray, float]]:
        outs1 = []
        outs2 = []
        for c in range(data.shape[0]):
            chan = data[c:c + 1]
            outs1.append(conv2d_array(chan, self._bank, stride=1, padding="same_reflect"))
            outs2.append(conv2d_array(chan, self._bank, stride=2, padding="same_reflect"))
        return [
            (np.concatenate(outs1, axis=0), 1.0),
            (np.concatenate(outs2, axis=0), 0.5),
        ]


def filterbank_backend() -> _FilterbankBackend:
    return _FilterbankBackend()


class _ConvnetBackend:
    """Small conv stack with externally supplied weights.

    Expects container tensors named ``layers/<i>/weight`` (co, ci, kh, kw),
    ``layers/<i>/bias`` (co,) and ``layers/<i>/stride`` (1,). ReLU between
    layers; the outputs of ``layer_ids`` (after activation) are emitted.
    """

    def __init__(self, weights: dict[str, np.ndarray], layer_ids: tuple[int, ...]):
        self.layers = []
        i = 0
        while f"layers/{i}/weight" in weights:
            w = weights[f"layers/{i}/weight"]
            b = weights.get(f"layers/{i}/bias")
            stride = int(weights.get(f"layers/{i}/stride", np.array([1.0]))[0])
            self.layers.append((w, b, stride))
            i += 1
        if not self.layers:
            raise ConfigurationError("weight container defines no layers/<i>/weight tensors")
        self.layer_ids = layer_ids or tuple(range(len(self.layers)))
        if max(self.layer_ids) >= len(self.layers):
            raise ConfigurationError(
                f"selected layer {max(self.layer_ids)} but container has {len(self.layers)} layers"
            )

    def __call__(self, data: np.ndarray) -> list[tuple[np.ndarray, float]]:
        outs = []
        x = data
        ratio = 1.0
        for i, (w, b, stride) in enumerate(self.layers):
            x = conv2d_array(x, w, bias=b, stride=stride, padding="same")
            x = np.maximum(x, 0.0)
            ratio /= stride
            if i in self.layer_ids:
                outs.append((x, ratio))
        return outs


def convnet_backend(weights: dict[str, np.ndarray], layer_ids: tuple[int, ...] = ()) -> _ConvnetBackend:
    return _ConvnetBackend(weights, layer_ids)


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def _build_backend(spec: BackendSpec):
    if spec.kind == "filterbank":
        return filterbank_backend()
    if spec.weights_path is None:
        raise ConfigurationError("convnet backend requires weights_path")
    return convnet_backend(read_weight_container(spec.weights_path), spec.layer_ids)


def extract_features(img: PixelImage, spec: BackendSpec, backend=None) -> FeatureSet:
    """Run the backend at every configured scale; pixel channels come first."""
    if backend is None:
        backend = _build_backend(spec)
    maps = [FeatureMap("pix", Tensor(img.data), 1.0)]
    data = img.data
    current_scale = 1.0
    for s in sorted(spec.scales, reverse=True):
        while current_scale > s + 1e-12:
            data = downsample2x_array(data)
            current_scale /= 2.0
        for j, (out, ratio) in enumerate(backend(data)):
            maps.append(FeatureMap(f"s{s:g}.b{j}", Tensor(out), s * ratio))
    return FeatureSet(tuple(maps))


# ---------------------------------------------------------------------------
# Weight container ("WTC1")
# ---------------------------------------------------------------------------

_MAGIC = b"WTC1"


def write_weight_container(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors. Record: name, rank, dims, data, CRC32."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            payload = a.tobytes()
            f.write(payload)
            f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_weight_container(path) -> dict[str, np.ndarray]:
    try:
        blob = open(path, "rb").read()
    except OSError as e:
        raise WeightContainerError(f"cannot read weight container {path}: {e}") from e
    if blob[:4] != _MAGIC:
        raise WeightContainerError(f"bad magic in {path}: {blob[:4]!r}")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise WeightContainerError(f"truncated container {path} while reading {what}")
        out = blob[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4, "record count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name!r}"))
        if rank > 8:
            raise WeightContainerError(f"record {name!r}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        n = 1
        for d in dims:
            if d == 0:
                raise WeightContainerError(f"record {name!r}: zero dimension")
            n *= d
        payload = take(4 * n, f"data of {name!r}")
        (crc,) = struct.unpack("<I", take(4, f"checksum of {name!r}"))
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise WeightContainerError(f"record {name!r}: checksum mismatch")
        if name in tensors:
            raise WeightContainerError(f"duplicate name {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    return tensors
