"""Multi-scale texture-statistics distortion with a spatial pooling-width map.

The metric compares local feature statistics instead of raw feature
values. For each feature channel, local means and standard deviations
are estimated at dyadic scales by repeated binomial downsampling of the
feature map and of its square. The per-scale distance maps

    d = sqrt((mu_a - mu_b)^2 + (nu_a - nu_b)^2)

are blended according to a per-pixel pooling width sigma: each scale
alpha receives hat-function weight max(1 - |log2(sigma_adapted) -
alpha|, 0), where sigma_adapted rescales sigma by the feature's relative
resolution, resamples it to the scale's grid, and clamps it to >= 1.
Weighted maps are averaged over their own grid and summed over scales
and features. sigma == 0 therefore reduces to mean pointwise feature
distance; large sigma compares texture statistics only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import BackendSpec, FeatureMap, FeatureSet, extract_features
from .imgsig import Plane, PixelImage, bilinear_resize_array, downsample2x_array

__all__ = [
    "SigmaMap",
    "MomentPyramid",
    "WDReport",
    "constant_sigma",
    "sigma_from_saliency",
    "moment_pyramid",
    "local_wd_map",
    "adapt_sigma",
    "weight_map",
    "wasserstein_distortion",
    "mse_psnr",
]

DEFAULT_NUM_SCALES = 6
DEFAULT_P_MIN = 0.5
DEFAULT_SIGMA_MAX = 16.0


@dataclass(frozen=True)
class SigmaMap:
    """Per-pixel pooling width at image resolution; values >= 0."""

    plane: Plane
    source: str = "unspecified"

    def __post_init__(self):
        if float(self.plane.data.min()) < 0.0:
            raise ValueError("pooling widths must be >= 0")


def constant_sigma(h: int, w: int, sigma0: float) -> SigmaMap:
    if sigma0 < 0:
        raise ValueError(f"constant pooling width must be >= 0, got {sigma0}")
    return SigmaMap(Plane(np.full((h, w), float(sigma0))), source=f"const:{sigma0:g}")


def sigma_from_saliency(
    s: Plane,
    p_min: float = DEFAULT_P_MIN,
    sigma_max: float = DEFAULT_SIGMA_MAX,
) -> SigmaMap:
    """Convert a [0, 1] saliency map into a pooling-width map.

    The saliency is turned into a gaze density p = p_min +
    (1 - p_min) * s / mean(s), which is positive and averages to one
    spatially; widths are then sigma_max * p_min / p, so the most salient
    regions get the narrowest pooling.
    """
    a = s.data
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("saliency values must lie in [0, 1]")
    if not (0.0 < p_min <= 1.0):
        raise ValueError(f"p_min must be in (0, 1], got {p_min}")
    if sigma_max <= 0.0:
        raise ValueError(f"sigma_max must be > 0, got {sigma_max}")
    mean = float(a.mean())
    if mean <= 0.0:
        raise ValueError("degenerate saliency: spatial mean is zero")
    p = p_min + (1.0 - p_min) * (a / mean)
    return SigmaMap(Plane(sigma_max * p_min / p), source=f"saliency(p_min={p_min:g},max={sigma_max:g})")


def scale_sigma(sigma: SigmaMap, display_scale: float) -> SigmaMap:
    """Divide pooling widths by a display downscale factor (crop viewing)."""
    if display_scale <= 0:
        raise ValueError("display scale must be > 0")
    return SigmaMap(Plane(sigma.plane.data / display_scale), source=f"{sigma.source}/ds{display_scale:g}")


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentPyramid:
    """Per-scale local mean and standard deviation stacks for one feature map.

    mu[alpha] and nu[alpha] have shape (c, h_alpha, w_alpha) following the
    ceil-halving dimension chain. nu[0] is exactly zero.
    """

    mu: tuple[np.ndarray, ...]
    nu: tuple[np.ndarray, ...]

    @property
    def num_scales(self) -> int:
        return len(self.mu) - 1


def moment_pyramid(f: FeatureMap | np.ndarray, num_scales: int) -> MomentPyramid:
    if num_scales < 0:
        raise ValueError("scale count must be >= 0")
    data = f.tensor.data if isinstance(f, FeatureMap) else np.asarray(f)
    if data.ndim == 2:
        data = data[None]
    mu = [data]
    rho = [data * data]
    for _ in range(num_scales):
        mu.append(downsample2x_array(mu[-1]))
        rho.append(downsample2x_array(rho[-1]))
    nu = [np.zeros_like(data)]
    for a in range(1, num_scales + 1):
        nu.append(np.sqrt(np.maximum(rho[a] - mu[a] * mu[a], 0.0)))
    return MomentPyramid(tuple(mu), tuple(nu))


def local_wd_map(pa: MomentPyramid, pb: MomentPyramid, alpha: int) -> np.ndarray:
    """Elementwise distance between Gaussian approximations at one scale."""
    ma, mb = pa.mu[alpha], pb.mu[alpha]
    if ma.shape != mb.shape:
        raise ValueError(f"pyramid shape mismatch at scale {alpha}: {ma.shape} vs {mb.shape}")
    dm = ma - mb
    dn = pa.nu[alpha] - pb.nu[alpha]
    return np.sqrt(dm * dm + dn * dn)


def adapt_sigma(sigma: SigmaMap, r: float, target_hw: tuple[int, int]) -> np.ndarray:
    """Rescale widths by the feature resolution r, resample, clamp to >= 1."""
    resized = bilinear_resize_array(r * sigma.plane.data, target_hw[0], target_hw[1])
    return np.maximum(resized, 1.0)


def weight_map(sigma_adapted: np.ndarray, alpha: int, num_scales: int | None = None) -> np.ndarray:
    """Hat-function scale weight; widths beyond the top scale pin to it."""
    t = np.log2(sigma_adapted)
    if num_scales is not None:
        t = np.minimum(t, float(num_scales))
    return np.maximum(1.0 - np.abs(t - alpha), 0.0)


# ---------------------------------------------------------------------------
# Full metric
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WDReport:
    total: float
    per_feature: tuple[float, ...]
    per_scale: tuple[float, ...]
    feature_ids: tuple[str, ...]
    sigma_source: str
    backend: str
    num_scales: int

    def to_text(self) -> str:
        lines = [
            f"total={self.total!r}",
            f"backend={self.backend}",
            f"sigma={self.sigma_source}",
            f"num_scales={self.num_scales}",
        ]
        lines += [f"scale.{a}={v!r}" for a, v in enumerate(self.per_scale)]
        lines += [f"feature.{fid}={v!r}" for fid, v in zip(self.feature_ids, self.per_feature)]
        return "\n".join(lines) + "\n"


def scale_weight_plan(
    feature_maps: list[tuple[tuple[int, int], float]],
    sigma: SigmaMap,
    num_scales: int,
) -> list[list[np.ndarray]]:
    """Per-map, per-scale weight planes (resampled, clamped, hat-weighted).

    feature_maps: list of ((h, w), r) describing each map's base grid.
    Shared by the evaluation path and the training-graph construction so
    both blend scales identically.
    """
    plans = []
    for (h, w), r in feature_maps:
        dims = [(h, w)]
        for _ in range(num_scales):
            ph, pw = dims[-1]
            dims.append((-(-ph // 2), -(-pw // 2)))
        per_scale = []
        for alpha in range(num_scales + 1):
            sig = adapt_sigma(sigma, r, dims[alpha])
            per_scale.append(weight_map(sig, alpha, num_scales))
        plans.append(per_scale)
    return plans


def wasserstein_distortion(
    a: PixelImage,
    b: PixelImage,
    sigma: SigmaMap,
    spec: BackendSpec | None = None,
    num_scales: int = DEFAULT_NUM_SCALES,
    features_a: FeatureSet | None = None,
    features_b: FeatureSet | None = None,
) -> WDReport:
    """Total distortion between two images under a pooling-width map.

    Precomputed feature sets may be passed to amortize extraction.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shape mismatch: {a.data.shape} vs {b.data.shape}")
    if sigma.plane.shape != (a.h, a.w):
        raise ValueError(f"pooling map shape {sigma.plane.shape} does not match image {(a.h, a.w)}")
    spec = spec or BackendSpec()
    fa = features_a or extract_features(a, spec)
    fb = features_b or extract_features(b, spec)

    plan = scale_weight_plan([((m.tensor.h, m.tensor.w), m.r) for m in fa.maps], sigma, num_scales)
    per_feature: list[float] = []
    per_scale = np.zeros(num_scales + 1)
    for m_a, m_b, weights in zip(fa.maps, fb.maps, plan):
        pa = moment_pyramid(m_a, num_scales)
        pb = moment_pyramid(m_b, num_scales)
        d_i = np.zeros(m_a.tensor.channels)
        for alpha in range(num_scales + 1):
            wgt = weights[alpha]
            if not wgt.any():
                continue
            d = local_wd_map(pa, pb, alpha)
            contrib = (wgt[None, :, :] * d).mean(axis=(1, 2))
            d_i += contrib
            per_scale[alpha] += float(contrib.sum())
        per_feature.extend(d_i.tolist())
    total = float(sum(per_feature))
    return WDReport(
        total=total,
        per_feature=tuple(per_feature),
        per_scale=tuple(per_scale.tolist()),
        feature_ids=tuple(fa.feature_ids()),
        sigma_source=sigma.source,
        backend=spec.describe(),
        num_scales=num_scales,
    )


def mse_psnr(a: PixelImage, b: PixelImage) -> tuple[float, float]:
    """Mean squared error over all pixels/channels and PSNR for [0, 1] data."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shape mismatch: {a.data.shape} vs {b.data.shape}")
    err = a.data - b.data
    mse = float(np.mean(err * err))
    psnr = math.inf if mse == 0.0 else -10.0 * math.log10(mse)
    return mse, psnr
