"""Overfitted per-image codec with common randomness.

Per image, a stack of dyadic-resolution latent arrays, a small synthesis
net, and an autoregressive entropy net are jointly optimized for
``bits + lambda * distortion`` (distortion: pixel MSE or the
texture-statistics metric). The decoder receives, besides the entropy
coded integer latents and the quantized network parameters, nothing but
a seed: pseudo-random Gaussian arrays are regenerated at each latent
resolution and concatenated with the upsampled latents before synthesis,
so stochastic texture can be reproduced at zero bit cost.

Wire contract highlights (version 1):

* per-array Gaussian array n uses seed ``cr_seed + n`` (arrays numbered
  1 = finest .. N = coarsest) via :func:`wdcodec.imgsig.gaussian_field`;
* synthesis input channel order is latents coarse-to-fine, then the
  random arrays coarse-to-fine;
* entropy coding walks arrays coarse-to-fine, each in raster order, with
  the 7-tap causal context of :data:`wdcodec.autodiff.CONTEXT_OFFSETS`;
  per-element Laplace tables come from :func:`wdcodec.coder.laplace_cdf_table`
  over the alphabet of :func:`wdcodec.coder.alphabet_range`;
* the per-element (mu, b) computation during coding is the same scalar
  code path on both sides, so reconstructions are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import coder
from .features import BackendSpec, extract_features
from .imgsig import (
    PixelImage,
    bilinear_resize_array,
    gaussian_field,
    read_gray,
)
from .wdmetric import (
    SigmaMap,
    constant_sigma,
    moment_pyramid,
    mse_psnr,
    scale_weight_plan,
    sigma_from_saliency,
    wasserstein_distortion,
)

__all__ = [
    "CodecConfig",
    "CodecError",
    "StreamError",
    "LatentStack",
    "SynthesisNet",
    "EntropyNet",
    "EncodedImage",
    "EncodeResult",
    "DecodeStats",
    "init_state",
    "upsample_concat",
    "synthesize",
    "entropy_params",
    "rate_estimate",
    "rd_optimize",
    "quantize_networks",
    "encode",
    "decode",
    "bit_allocation_report",
    "encode_to_bpp",
    "resolve_sigma",
]

MAGIC = b"WDC3"
VERSION = 1

_LOGB_LO = -6.0
_LOGB_HI = 4.0


class CodecError(Exception):
    """Raised for invalid configurations or failed optimization."""


class StreamError(CodecError):
    """Raised for corrupt or inconsistent bitstreams."""


@dataclass(frozen=True)
class CodecConfig:
    num_arrays: int = 7
    cr_channels: int = 1
    synth_layers: tuple[tuple[int, int], ...] = ((1, 32), (1, 32), (3, 3))
    entropy_hidden: tuple[int, ...] = (16, 16)
    lam: float = 5e4
    distortion: str = "mse"
    sigma_source: str = "const:8"
    backend: BackendSpec = field(default_factory=BackendSpec)
    num_scales: int = 6
    steps: int = 600
    lr: float = 0.01
    lr_after_switch: float = 0.003
    latent_lr_scale: float = 10.0
    noise_fraction: float = 0.6
    temperature: float = 1.0
    seed: int = 0
    cr_seed: int = 42
    log_interval: int = 50
    quant_step_grid: tuple[float, ...] = (1 / 256, 1 / 128, 1 / 64, 1 / 32, 1 / 16)

    def __post_init__(self):
        if self.num_arrays < 1:
            raise CodecError(f"need at least one latent array, got {self.num_arrays}")
        if self.lam <= 0:
            raise CodecError(f"rate-distortion weight must be > 0, got {self.lam}")
        if self.distortion not in ("mse", "wd"):
            raise CodecError(f"unknown distortion kind {self.distortion!r}")
        if self.synth_layers[-1][1] != 3:
            raise CodecError("last synthesis layer must emit 3 channels")
        if not (0.0 <= self.noise_fraction <= 1.0):
            raise CodecError("noise_fraction must lie in [0, 1]")

    def digest(self) -> int:
        blob = json.dumps(
            {k: (v.describe() if isinstance(v, BackendSpec) else v)
             for k, v in sorted(self.__dict__.items())},
            sort_keys=True, default=str,
        ).encode()
        return zlib.crc32(blob) & 0xFFFFFFFF


def resolve_sigma(source: str, h: int, w: int) -> SigmaMap:
    """Parse a pooling-map source spec: ``const:V`` or ``saliency:PATH``."""
    if source.startswith("const:"):
        return constant_sigma(h, w, float(source.split(":", 1)[1]))
    if source.startswith("saliency:"):
        sal = read_gray(source.split(":", 1)[1])
        if sal.shape != (h, w):
            sal = type(sal)(bilinear_resize_array(sal.data, h, w))
        return sigma_from_saliency(sal)
    raise CodecError(f"unknown pooling-map source {source!r}")


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass
class LatentStack:
    """arrays[n-1] holds array n; array 1 is finest, array N coarsest."""

    arrays: list[np.ndarray]
    quantized: bool = False

    @staticmethod
    def dims(h: int, w: int, n: int) -> tuple[int, int]:
        return -(-h // (1 << (n - 1))), -(-w // (1 << (n - 1)))


@dataclass
class SynthesisNet:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (weights (co,ci,k,k), bias (co,))
    activation: str = "relu"


@dataclass
class EntropyNet:
    layers: list[tuple[np.ndarray, np.ndarray]]  # 1x1 conv stack ending in 2 channels
    embeddings: np.ndarray  # one learned scalar per latent array


def init_state(h: int, w: int, cfg: CodecConfig) -> tuple[LatentStack, SynthesisNet, EntropyNet]:
    """Zero latents and seeded small-random networks; pure function of cfg."""
    if h < 8 or w < 8:
        raise CodecError(f"image dims must be at least 8x8, got {h}x{w}")
    if (1 << cfg.num_arrays) > min(h, w):
        raise CodecError(
            f"{cfg.num_arrays} latent arrays need min dim >= {1 << cfg.num_arrays}, got {min(h, w)}"
        )
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    latents = LatentStack(
        [np.zeros(LatentStack.dims(h, w, n), dtype=np.float64) for n in range(1, cfg.num_arrays + 1)]
    )

    def conv_init(ci, co, k, final=False):
        fan_in = ci * k * k
        std = 0.01 if final else math.sqrt(2.0 / fan_in)
        return rng.normal(0.0, std, size=(co, ci, k, k)), np.zeros(co)

    synth_layers = []
    ci = cfg.num_arrays * (1 + cfg.cr_channels)
    for li, (k, co) in enumerate(cfg.synth_layers):
        final = li == len(cfg.synth_layers) - 1
        wgt, b = conv_init(ci, co, k, final=final)
        if final:
            b = np.full(co, 0.5)  # mid-gray starting point
        synth_layers.append((wgt, b))
        ci = co

    ent_layers = []
    ci = len(ad.CONTEXT_OFFSETS) + 1
    for co in cfg.entropy_hidden:
        ent_layers.append(conv_init(ci, co, 1))
        ci = co
    w_last, b_last = conv_init(ci, 2, 1, final=True)
    b_last = np.array([0.0, math.log(2.0)])  # start wide: mu 0, b 2
    ent_layers.append((w_last, b_last))
    emb = rng.normal(0.0, 0.1, size=cfg.num_arrays)
    return latents, SynthesisNet(synth_layers), EntropyNet(ent_layers, emb)


# ---------------------------------------------------------------------------
# Forward pieces (numpy evaluation path)
# ---------------------------------------------------------------------------


def common_randomness(cfg: CodecConfig, h: int, w: int) -> list[np.ndarray]:
    """Per-array Gaussian stacks at latent resolutions (coarse last)."""
    out = []
    for n in range(1, cfg.num_arrays + 1):
        hn, wn = LatentStack.dims(h, w, n)
        if cfg.cr_channels > 0:
            out.append(gaussian_field(cfg.cr_seed + n, hn, wn, cfg.cr_channels).data)
        else:
            out.append(np.zeros((0, hn, wn)))
    return out


def upsample_concat(latents: LatentStack, cfg: CodecConfig, h: int, w: int) -> np.ndarray:
    """(N + N*cr, h, w): latents coarse-to-fine, then randomness coarse-to-fine."""
    chans = []
    for arr in reversed(latents.arrays):
        chans.append(bilinear_resize_array(arr[None, :, :], h, w))
    cr = common_randomness(cfg, h, w)
    for stack in reversed(cr):
        if stack.shape[0]:
            chans.append(bilinear_resize_array(stack, h, w))
    return np.concatenate(chans, axis=0)


def synthesize(feats: np.ndarray, net: SynthesisNet) -> np.ndarray:
    """Raw synthesis output (3, h, w); clamp to [0, 1] only at evaluation."""
    from .imgsig import conv2d_array

    x = feats
    for li, (wgt, b) in enumerate(net.layers):
        if x.shape[0] != wgt.shape[1]:
            raise CodecError(f"synthesis layer {li}: input {x.shape[0]} channels, expected {wgt.shape[1]}")
        x = conv2d_array(x, wgt, b, stride=1, padding="same")
        if li < len(net.layers) - 1:
            x = np.maximum(x, 0.0)
    return x


def _entropy_mlp(ctx: np.ndarray, net: EntropyNet, array_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized entropy parameters from a (7, h, w) context stack."""
    from .imgsig import conv2d_array

    emb = np.full((1,) + ctx.shape[1:], net.embeddings[array_index - 1])
    x = np.concatenate([ctx, emb], axis=0)
    for li, (wgt, b) in enumerate(net.layers):
        x = conv2d_array(x, wgt, b, stride=1, padding="same")
        if li < len(net.layers) - 1:
            x = np.maximum(x, 0.0)
    mu = x[0]
    b_scale = np.exp(np.clip(x[1], _LOGB_LO, _LOGB_HI))
    return mu, b_scale


def entropy_params(z: np.ndarray, net: EntropyNet, array_index: int) -> tuple[np.ndarray, np.ndarray]:
    """(mu, b) planes for every element of latent array ``array_index``."""
    ctx = ad._context_forward(z[None, :, :].astype(np.float64))
    return _entropy_mlp(ctx, net, array_index)


def _site_params(z: np.ndarray, i: int, j: int, net: EntropyNet, array_index: int):
    """Scalar-path (mu, b) for one site; shared verbatim by encode and decode."""
    h, w = z.shape
    x = np.empty(len(ad.CONTEXT_OFFSETS) + 1, dtype=np.float64)
    for t, (di, dj) in enumerate(ad.CONTEXT_OFFSETS):
        ii, jj = i + di, j + dj
        x[t] = z[ii, jj] if (0 <= ii < h and 0 <= jj < w) else 0.0
    x[-1] = net.embeddings[array_index - 1]
    for li, (wgt, b) in enumerate(net.layers):
        x = wgt[:, :, 0, 0] @ x + b
        if li < len(net.layers) - 1:
            x = np.maximum(x, 0.0)
    mu = float(x[0])
    bs = math.exp(min(max(float(x[1]), _LOGB_LO), _LOGB_HI))
    return mu, bs


def rate_estimate(latents: LatentStack, net: EntropyNet) -> tuple[float, list[float]]:
    """Cross-entropy bits of the stack under the entropy model, per array."""
    per_array = []
    for n, arr in enumerate(latents.arrays, start=1):
        mu, b = entropy_params(arr, net, n)
        bits, _ = ad.laplace_bits(arr, mu, b)
        per_array.append(float(bits.sum()))
    return float(sum(per_array)), per_array


# ---------------------------------------------------------------------------
# Training graph
# ---------------------------------------------------------------------------


def _bank_const(g: ad.Graph):
    from .features import _bank_array

    return g.constant(_bank_array())


def _graph_features(g: ad.Graph, rgb, scales: tuple[float, ...]):
    """Mirror of features.extract_features over graph nodes."""
    bank = _bank_const(g)
    maps = [(rgb, 1.0)]
    cur = rgb
    cur_scale = 1.0
    for s in sorted(scales, reverse=True):
        while cur_scale > s + 1e-12:
            cur = g.downsample2x(cur)
            cur_scale /= 2.0
        for stride, ratio in ((1, 1.0), (2, 0.5)):
            outs = []
            for c in range(3):
                chan = g.slice_channels(cur, c, c + 1)
                outs.append(g.conv2d(chan, bank, stride=stride, padding="same_reflect"))
            maps.append((g.concat(outs), s * ratio))
    return maps


def _graph_wd_loss(g: ad.Graph, rgb, orig: PixelImage, sigma: SigmaMap, cfg: CodecConfig):
    """Texture-statistics distortion between graph node ``rgb`` and a constant."""
    spec = cfg.backend
    A = cfg.num_scales
    ref = extract_features(orig, spec)
    plan = scale_weight_plan([((m.tensor.h, m.tensor.w), m.r) for m in ref.maps], sigma, A)
    node_maps = _graph_features(g, rgb, spec.scales)
    total = None
    for (node, r), ref_map, weights in zip(node_maps, ref.maps, plan):
        ref_pyr = moment_pyramid(ref_map, A)
        c = ref_map.tensor.channels
        mu = node
        rho = g.square(node)
        for alpha in range(A + 1):
            wgt = weights[alpha]
            if alpha > 0:
                mu = g.downsample2x(mu)
                rho = g.downsample2x(rho)
            if not wgt.any():
                continue
            dmu = g.sub(mu, g.constant(ref_pyr.mu[alpha]))
            if alpha == 0:
                d = g.abs(dmu)
            else:
                nu = g.sqrt_clamped(g.sub(rho, g.square(mu)), floor=1e-12)
                dnu = g.sub(nu, g.constant(ref_pyr.nu[alpha]))
                d = g.sqrt_clamped(g.add(g.square(dmu), g.square(dnu)), floor=1e-12)
            term = g.scale(g.mean(g.mul(d, g.constant(wgt[None, :, :]))), float(c))
            total = term if total is None else g.add(total, term)
    return total


def build_train_graph(orig: PixelImage, cfg: CodecConfig, mode: str,
                      sigma: SigmaMap | None) -> ad.Graph:
    """The full optimization graph: rate + lambda * distortion."""
    h, w = orig.h, orig.w
    g = ad.Graph(dtype=np.float32)
    n_arrays = cfg.num_arrays

    zq = []
    for n in range(1, n_arrays + 1):
        hn, wn = LatentStack.dims(h, w, n)
        z = g.param(f"z{n}", (1, hn, wn))
        if mode == "noise":
            noise = g.input(f"noise{n}", (1, hn, wn))
            zq.append(g.soft_quantize(z, "noise", cfg.temperature, noise=noise))
        else:
            zq.append(g.soft_quantize(z, "ste"))

    # rate
    ent_params = []
    ci = len(ad.CONTEXT_OFFSETS) + 1
    for li, co in enumerate(list(cfg.entropy_hidden) + [2]):
        wn_ = g.param(f"ent{li}.w", (co, ci, 1, 1))
        bn_ = g.param(f"ent{li}.b", (co,))
        ent_params.append((wn_, bn_))
        ci = co
    zero = g.constant(np.zeros((1, 1, 1)))
    lo_c = g.constant(np.full((1, 1, 1), _LOGB_LO))
    hi_c = g.constant(np.full((1, 1, 1), _LOGB_HI))
    total_bits = None
    for n in range(1, n_arrays + 1):
        emb = g.param(f"emb{n}", (1, 1, 1))
        hn, wn = LatentStack.dims(h, w, n)
        ones = g.constant(np.ones((1, hn, wn)))
        x = g.concat([g.causal_context(zq[n - 1]), g.mul(ones, emb)])
        for li, (wn_, bn_) in enumerate(ent_params):
            x = g.conv2d(x, wn_, bn_, stride=1, padding="same")
            if li < len(ent_params) - 1:
                x = g.maximum(x, zero)
        mu = g.slice_channels(x, 0, 1)
        logb = g.minimum(g.maximum(g.slice_channels(x, 1, 2), lo_c), hi_c)
        bits_n = g.sum(g.laplace_rate(zq[n - 1], mu, g.exp(logb)))
        g.mark(f"bits{n}", bits_n)
        total_bits = bits_n if total_bits is None else g.add(total_bits, bits_n)
    g.mark("bits", total_bits)

    # synthesis
    ups = [g.bilinear_resize(zq[n - 1], h, w) for n in range(n_arrays, 0, -1)]
    cr = common_randomness(cfg, h, w)
    for stack in reversed(cr):
        if stack.shape[0]:
            ups.append(g.constant(bilinear_resize_array(stack, h, w)))
    x = g.concat(ups)
    ci = n_arrays * (1 + cfg.cr_channels)
    for li, (k, co) in enumerate(cfg.synth_layers):
        wn_ = g.param(f"syn{li}.w", (co, ci, k, k))
        bn_ = g.param(f"syn{li}.b", (co,))
        x = g.conv2d(x, wn_, bn_, stride=1, padding="same")
        if li < len(cfg.synth_layers) - 1:
            x = g.maximum(x, zero)
        ci = co
    g.mark("recon", x)

    if cfg.distortion == "mse":
        dist = g.mean(g.square(g.sub(x, g.constant(orig.data))))
    else:
        if sigma is None:
            raise CodecError("texture distortion requires a pooling-width map")
        dist = _graph_wd_loss(g, x, orig, sigma, cfg)
    g.mark("distortion", dist)
    g.set_output(g.add(total_bits, g.scale(dist, cfg.lam)))
    return g


def _state_params(latents: LatentStack, synth: SynthesisNet, ent: EntropyNet,
                  cfg: CodecConfig) -> ad.ParamSet:
    ps = ad.ParamSet()
    for n, arr in enumerate(latents.arrays, start=1):
        ps.add(f"z{n}", arr[None, :, :], lr_scale=cfg.latent_lr_scale)
    for li, (wgt, b) in enumerate(synth.layers):
        ps.add(f"syn{li}.w", wgt)
        ps.add(f"syn{li}.b", b)
    for li, (wgt, b) in enumerate(ent.layers):
        ps.add(f"ent{li}.w", wgt)
        ps.add(f"ent{li}.b", b)
    for n in range(1, cfg.num_arrays + 1):
        ps.add(f"emb{n}", np.full((1, 1, 1), ent.embeddings[n - 1]))
    return ps


def _params_to_state(ps: ad.ParamSet, cfg: CodecConfig) -> tuple[LatentStack, SynthesisNet, EntropyNet]:
    latents = LatentStack([ps.tensors[f"z{n}"][0] for n in range(1, cfg.num_arrays + 1)])
    synth = SynthesisNet(
        [(ps.tensors[f"syn{li}.w"], ps.tensors[f"syn{li}.b"]) for li in range(len(cfg.synth_layers))]
    )
    n_ent = len(cfg.entropy_hidden) + 1
    ent = EntropyNet(
        [(ps.tensors[f"ent{li}.w"], ps.tensors[f"ent{li}.b"]) for li in range(n_ent)],
        np.array([float(ps.tensors[f"emb{n}"].ravel()[0]) for n in range(1, cfg.num_arrays + 1)]),
    )
    return latents, synth, ent


@dataclass
class TrainedState:
    latents: LatentStack
    synth: SynthesisNet
    entropy: EntropyNet
    trace: list[dict]


def rd_optimize(img: PixelImage, cfg: CodecConfig, sigma: SigmaMap | None = None) -> TrainedState:
    """Joint quantization-aware optimization of latents and networks."""
    if cfg.distortion == "wd" and sigma is None:
        sigma = resolve_sigma(cfg.sigma_source, img.h, img.w)
    latents, synth, ent = init_state(img.h, img.w, cfg)
    params = _state_params(latents, synth, ent, cfg)
    g_noise = build_train_graph(img, cfg, "noise", sigma)
    g_ste = build_train_graph(img, cfg, "ste", sigma)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 7919))
    state = ad.AdamState()
    switch = int(round(cfg.noise_fraction * cfg.steps))
    trace: list[dict] = []
    for step in range(cfg.steps):
        if step < switch:
            g = g_noise
            inputs = {
                f"noise{n}": rng.uniform(-0.5, 0.5, size=(1,) + latents.arrays[n - 1].shape)
                for n in range(1, cfg.num_arrays + 1)
            }
            lr = cfg.lr
        else:
            g = g_ste
            inputs = {}
            lr = cfg.lr_after_switch
        loss, grads, aux = ad.backward_grad(g, params.tensors, inputs)
        if not np.isfinite(loss):
            raise CodecError(f"non-finite loss at step {step}")
        ad.adam_step(params, grads, state, lr=lr)
        if step % cfg.log_interval == 0 or step == cfg.steps - 1:
            trace.append({
                "step": step,
                "loss": float(loss),
                "bits": float(aux["bits"]),
                "distortion": float(aux["distortion"]),
            })
    latents, synth, ent = _params_to_state(params, cfg)
    return TrainedState(latents, synth, ent, trace)


# ---------------------------------------------------------------------------
# Network quantization
# ---------------------------------------------------------------------------


def _quantize_tensor(arr: np.ndarray, step: float):
    ints = np.rint(arr / step).astype(np.int64)
    mu = int(np.rint(np.median(ints)))
    b = max(float(np.mean(np.abs(ints - mu))), 1e-3)
    return ints, mu, b


def _tensor_bits(ints: np.ndarray, mu: int, b: float) -> float:
    bits, _ = ad.laplace_bits(ints.astype(np.float64), float(mu), b)
    return float(bits.sum())


def _net_tensors(synth: SynthesisNet, ent: EntropyNet):
    """(name, array) pairs in wire order."""
    out = []
    for li, (wgt, b) in enumerate(synth.layers):
        out.append((f"syn{li}.w", wgt))
        out.append((f"syn{li}.b", b))
    for li, (wgt, b) in enumerate(ent.layers):
        out.append((f"ent{li}.w", wgt))
        out.append((f"ent{li}.b", b))
    out.append(("emb", ent.embeddings))
    return out


def _rebuild_nets(tensors: dict[str, np.ndarray], cfg: CodecConfig):
    synth = SynthesisNet(
        [(tensors[f"syn{li}.w"], tensors[f"syn{li}.b"]) for li in range(len(cfg.synth_layers))]
    )
    ent = EntropyNet(
        [(tensors[f"ent{li}.w"], tensors[f"ent{li}.b"]) for li in range(len(cfg.entropy_hidden) + 1)],
        tensors["emb"],
    )
    return synth, ent


def _eval_loss(img: PixelImage, latents: LatentStack, synth: SynthesisNet,
               ent: EntropyNet, cfg: CodecConfig, sigma: SigmaMap | None) -> float:
    bits, _ = rate_estimate(latents, ent)
    feats = upsample_concat(latents, cfg, img.h, img.w)
    recon = np.clip(synthesize(feats, synth), 0.0, 1.0)
    rimg = PixelImage(recon)
    if cfg.distortion == "mse":
        dist, _ = mse_psnr(img, rimg)
    else:
        dist = wasserstein_distortion(img, rimg, sigma, cfg.backend, cfg.num_scales).total
    return bits + cfg.lam * dist


def quantize_networks(img: PixelImage, state: TrainedState, cfg: CodecConfig,
                      sigma: SigmaMap | None = None):
    """Greedy per-tensor step choice minimizing bits + lambda * loss shift.

    Returns (quantized synth, quantized entropy, {name: (step, ints, mu, b)}).
    """
    if cfg.distortion == "wd" and sigma is None:
        sigma = resolve_sigma(cfg.sigma_source, img.h, img.w)
    latents_q = LatentStack([np.rint(a) for a in state.latents.arrays], quantized=True)
    current = {name: arr.copy() for name, arr in _net_tensors(state.synth, state.entropy)}
    chosen: dict[str, tuple] = {}
    for name, arr in _net_tensors(state.synth, state.entropy):
        best = None
        for step in cfg.quant_step_grid:
            ints, mu, b = _quantize_tensor(arr, step)
            trial = dict(current)
            trial[name] = ints.astype(np.float64) * step
            synth_t, ent_t = _rebuild_nets(trial, cfg)
            score = _tensor_bits(ints, mu, b) + _eval_loss(img, latents_q, synth_t, ent_t, cfg, sigma)
            if best is None or score < best[0]:
                best = (score, step, ints, mu, b)
        _, step, ints, mu, b = best
        current[name] = ints.astype(np.float64) * step
        chosen[name] = (step, ints, mu, b)
    synth_q, ent_q = _rebuild_nets(current, cfg)
    return synth_q, ent_q, chosen


# ---------------------------------------------------------------------------
# Bitstream
# ---------------------------------------------------------------------------


@dataclass
class EncodedImage:
    h: int
    w: int
    cfg_digest: int
    num_arrays: int
    cr_channels: int
    cr_seed: int
    synth_layers: tuple[tuple[int, int], ...]
    entropy_hidden: tuple[int, ...]
    tensor_meta: list[tuple[str, float, int, float, int]]  # name, step, mu, b, count
    tensor_payloads: list[bytes]
    array_payloads: list[bytes]  # coarse first
    array_symbol_crcs: list[int]

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<BHHBB", VERSION, self.h, self.w, self.num_arrays, self.cr_channels)
        out += struct.pack("<QI", self.cr_seed, self.cfg_digest)
        out += struct.pack("<B", len(self.synth_layers))
        for k, co in self.synth_layers:
            out += struct.pack("<BH", k, co)
        out += struct.pack("<B", len(self.entropy_hidden))
        for co in self.entropy_hidden:
            out += struct.pack("<H", co)
        out += struct.pack("<H", len(self.tensor_meta))
        for (name, step, mu, b, count), payload in zip(self.tensor_meta, self.tensor_payloads):
            nb = name.encode()
            out += struct.pack("<B", len(nb)) + nb
            out += struct.pack("<fiidI", step, mu, 0, b, count)
            out += struct.pack("<I", len(payload)) + payload
        out += struct.pack("<B", len(self.array_payloads))
        for payload, scrc in zip(self.array_payloads, self.array_symbol_crcs):
            out += struct.pack("<III", len(payload), zlib.crc32(payload) & 0xFFFFFFFF, scrc)
        for payload in self.array_payloads:
            out += payload
        return bytes(out)

    @staticmethod
    def from_bytes(blob: bytes) -> "EncodedImage":
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(blob):
                raise StreamError(f"truncated stream at byte {pos} while reading {what}")
            part = blob[pos:pos + n]
            pos += n
            return part

        if take(4, "magic") != MAGIC:
            raise StreamError("bad magic")
        version, h, w, n_arrays, crch = struct.unpack("<BHHBB", take(7, "header"))
        if version != VERSION:
            raise StreamError(f"unsupported stream version {version}")
        cr_seed, digest = struct.unpack("<QI", take(12, "seeds"))
        (n_synth,) = struct.unpack("<B", take(1, "synth layer count"))
        synth_layers = tuple(struct.unpack("<BH", take(3, "synth layer")) for _ in range(n_synth))
        (n_ent,) = struct.unpack("<B", take(1, "entropy layer count"))
        entropy_hidden = tuple(struct.unpack("<H", take(2, "entropy width"))[0] for _ in range(n_ent))
        (n_tensors,) = struct.unpack("<H", take(2, "tensor count"))
        meta, payloads = [], []
        for _ in range(n_tensors):
            (nlen,) = struct.unpack("<B", take(1, "tensor name length"))
            name = take(nlen, "tensor name").decode()
            step, mu, _pad, b, count = struct.unpack("<fiidI", take(24, f"tensor meta {name}"))
            (plen,) = struct.unpack("<I", take(4, "tensor payload length"))
            payloads.append(take(plen, f"tensor payload {name}"))
            meta.append((name, step, mu, b, count))
        (n_payloads,) = struct.unpack("<B", take(1, "array count"))
        table = [struct.unpack("<III", take(12, "array entry")) for _ in range(n_payloads)]
        arrays = []
        for plen, crc, _scrc in table:
            start = pos
            data = take(plen, "array payload")
            if zlib.crc32(data) & 0xFFFFFFFF != crc:
                raise StreamError(f"array payload checksum mismatch at byte offset {start}")
            arrays.append(data)
        if pos != len(blob):
            raise StreamError(f"{len(blob) - pos} trailing bytes at offset {pos}")
        return EncodedImage(
            h=h, w=w, cfg_digest=digest, num_arrays=n_arrays, cr_channels=crch,
            cr_seed=cr_seed, synth_layers=synth_layers, entropy_hidden=entropy_hidden,
            tensor_meta=meta, tensor_payloads=payloads, array_payloads=arrays,
            array_symbol_crcs=[t[2] for t in table],
        )


def _code_tensor(ints: np.ndarray, mu: int, b: float) -> bytes:
    lo = int(min(ints.min(), mu - 1))
    hi = int(max(ints.max(), mu + 1))
    table = coder.laplace_cdf_table(float(mu), b, lo - 1, hi + 1)
    return coder.range_encode(ints.ravel().tolist(), table) + struct.pack("<ii", lo - 1, hi + 1)


def _decode_tensor(payload: bytes, mu: int, b: float, count: int) -> np.ndarray:
    lo, hi = struct.unpack("<ii", payload[-8:])
    table = coder.laplace_cdf_table(float(mu), b, lo, hi)
    return np.array(coder.range_decode(payload[:-8], table, count), dtype=np.int64)


def _code_latent_array(z_int: np.ndarray, net: EntropyNet, array_index: int):
    """Sequential raster-order coding; clamps symbols into their alphabet.

    Returns (payload bytes, clamped array). The clamped values feed later
    contexts, exactly as the decoder will see them.
    """
    z = z_int.astype(np.float64)
    h, w = z.shape
    enc = coder.RangeEncoder()
    for i in range(h):
        for j in range(w):
            mu, b = _site_params(z, i, j, net, array_index)
            lo, hi = coder.alphabet_range(mu, b)
            zv = int(min(max(z[i, j], lo), hi))
            z[i, j] = zv
            enc.encode_symbol(zv, coder.laplace_cdf_table(mu, b, lo, hi))
    return enc.finish(), z.astype(np.int64)


def _decode_latent_array(payload: bytes, shape: tuple[int, int], net: EntropyNet, array_index: int):
    h, w = shape
    z = np.zeros((h, w), dtype=np.float64)
    dec = coder.RangeDecoder(payload)
    for i in range(h):
        for j in range(w):
            mu, b = _site_params(z, i, j, net, array_index)
            lo, hi = coder.alphabet_range(mu, b)
            z[i, j] = dec.decode_symbol(coder.laplace_cdf_table(mu, b, lo, hi))
    return z.astype(np.int64)


@dataclass
class EncodeResult:
    encoded: EncodedImage
    reconstruction: PixelImage
    bpp: float
    total_bits: int
    rate_estimate_bits: float
    per_array_bits: list[int]  # finest first
    network_bits: int
    trace: list[dict]


def encode(img: PixelImage, cfg: CodecConfig, sigma: SigmaMap | None = None) -> EncodeResult:
    if cfg.distortion == "wd" and sigma is None:
        sigma = resolve_sigma(cfg.sigma_source, img.h, img.w)
    state = rd_optimize(img, cfg, sigma)
    synth_q, ent_q, chosen = quantize_networks(img, state, cfg, sigma)

    tensor_meta, tensor_payloads, network_bits = [], [], 0
    for name, _ in _net_tensors(synth_q, ent_q):
        step, ints, mu, b = chosen[name]
        payload = _code_tensor(ints, mu, b)
        tensor_meta.append((name, float(step), int(mu), float(b), int(ints.size)))
        tensor_payloads.append(payload)
        network_bits += len(payload) * 8

    # arrays coarse-to-fine, clamped progressively as they are coded
    array_payloads, symbol_crcs = [], []
    final_arrays: list[np.ndarray | None] = [None] * cfg.num_arrays
    for n in range(cfg.num_arrays, 0, -1):
        z_int = np.rint(state.latents.arrays[n - 1]).astype(np.int64)
        z_int = np.clip(z_int, coder.ALPHABET_MIN, coder.ALPHABET_MAX)
        payload, clamped = _code_latent_array(z_int, ent_q, n)
        array_payloads.append(payload)
        symbol_crcs.append(zlib.crc32(clamped.astype("<i4").tobytes()) & 0xFFFFFFFF)
        final_arrays[n - 1] = clamped

    latents_q = LatentStack([a.astype(np.float64) for a in final_arrays], quantized=True)
    est_bits, _ = rate_estimate(latents_q, ent_q)
    feats = upsample_concat(latents_q, cfg, img.h, img.w)
    recon = PixelImage(np.clip(synthesize(feats, synth_q), 0.0, 1.0))

    encoded = EncodedImage(
        h=img.h, w=img.w, cfg_digest=cfg.digest(), num_arrays=cfg.num_arrays,
        cr_channels=cfg.cr_channels, cr_seed=cfg.cr_seed,
        synth_layers=cfg.synth_layers, entropy_hidden=cfg.entropy_hidden,
        tensor_meta=tensor_meta, tensor_payloads=tensor_payloads,
        array_payloads=array_payloads, array_symbol_crcs=symbol_crcs,
    )
    blob = encoded.to_bytes()
    per_array_bits = [len(p) * 8 for p in reversed(array_payloads)]  # finest first
    return EncodeResult(
        encoded=encoded,
        reconstruction=recon,
        bpp=len(blob) * 8 / (img.h * img.w),
        total_bits=len(blob) * 8,
        rate_estimate_bits=est_bits,
        per_array_bits=per_array_bits,
        network_bits=network_bits,
        trace=state.trace,
    )


@dataclass
class DecodeStats:
    macs_per_pixel: float
    latent_bits: int
    network_bits: int


def decode(e: EncodedImage) -> tuple[PixelImage, DecodeStats]:
    """Reconstruct the image; bit-exact mirror of the encoder's final pass."""
    from .evalstats import macs_per_pixel

    tensors = {}
    for (name, step, mu, b, count), payload in zip(e.tensor_meta, e.tensor_payloads):
        ints = _decode_tensor(payload, mu, b, count)
        tensors[name] = ints.astype(np.float64) * step
    cfg = CodecConfig(
        num_arrays=e.num_arrays, cr_channels=e.cr_channels, cr_seed=e.cr_seed,
        synth_layers=e.synth_layers, entropy_hidden=e.entropy_hidden,
    )
    # restore tensor shapes from the architecture
    ci = e.num_arrays * (1 + e.cr_channels)
    for li, (k, co) in enumerate(e.synth_layers):
        tensors[f"syn{li}.w"] = tensors[f"syn{li}.w"].reshape(co, ci, k, k)
        ci = co
    ci = len(ad.CONTEXT_OFFSETS) + 1
    for li, co in enumerate(list(e.entropy_hidden) + [2]):
        tensors[f"ent{li}.w"] = tensors[f"ent{li}.w"].reshape(co, ci, 1, 1)
        ci = co
    synth, ent = _rebuild_nets(tensors, cfg)

    arrays: list[np.ndarray | None] = [None] * e.num_arrays
    latent_bits = 0
    for idx, n in enumerate(range(e.num_arrays, 0, -1)):
        shape = LatentStack.dims(e.h, e.w, n)
        z = _decode_latent_array(e.array_payloads[idx], shape, ent, n)
        if zlib.crc32(z.astype("<i4").tobytes()) & 0xFFFFFFFF != e.array_symbol_crcs[idx]:
            raise StreamError(f"decoded symbol checksum mismatch in array {n}")
        arrays[n - 1] = z.astype(np.float64)
        latent_bits += len(e.array_payloads[idx]) * 8
    latents = LatentStack(arrays, quantized=True)
    feats = upsample_concat(latents, cfg, e.h, e.w)
    recon = PixelImage(np.clip(synthesize(feats, synth), 0.0, 1.0))
    stats = DecodeStats(
        macs_per_pixel=macs_per_pixel(cfg, (e.h, e.w)),
        latent_bits=latent_bits,
        network_bits=sum(len(p) * 8 for p in e.tensor_payloads),
    )
    return recon, stats


def bit_allocation_report(e: EncodedImage) -> dict:
    """Per-array, network, and header shares of the stream, in bits/pixel."""
    px = e.h * e.w
    per_array = {}
    for idx, n in enumerate(range(e.num_arrays, 0, -1)):
        per_array[n] = len(e.array_payloads[idx]) * 8 / px
    network_bpp = sum(len(p) * 8 for p in e.tensor_payloads) / px
    total_bpp = len(e.to_bytes()) * 8 / px
    header_bpp = total_bpp - network_bpp - sum(per_array.values())
    return {
        "per_array_bpp": per_array,  # keyed by array index, 1 = finest
        "network_bpp": network_bpp,
        "header_bpp": header_bpp,
        "total_bpp": total_bpp,
    }


def encode_to_bpp(img: PixelImage, cfg: CodecConfig, target_bpp: float,
                  tol: float = 0.05, max_iters: int = 8,
                  sigma: SigmaMap | None = None) -> EncodeResult:
    """Bisection on lambda (full re-optimizations) to hit a rate target."""
    lo, hi = 1.0, 1e9  # lambda bounds: rate decreases as lambda shrinks
    lam = cfg.lam
    best = None
    for _ in range(max_iters):
        res = encode(img, replace(cfg, lam=lam), sigma)
        err = res.bpp / target_bpp - 1.0
        if best is None or abs(err) < abs(best[0]):
            best = (err, res, lam)
        if abs(err) <= tol:
            break
        if res.bpp > target_bpp:
            hi = lam  # too many bits: weight distortion less
        else:
            lo = lam
        lam = math.sqrt(lo * hi)
    return best[1]
