"""Unified command-line entry point.

Subcommands: wd, sigma, encode, decode, allocate, macs, elo-fit,
predictivity, serve, selftest. Every command that writes an output also
emits ``<output>.manifest.json`` recording the command line, config
digest, seeds, and input/output paths, so results are re-derivable.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .codec import (
    CodecConfig,
    EncodedImage,
    bit_allocation_report,
    decode,
    encode,
    encode_to_bpp,
    resolve_sigma,
)
from .evalstats import fit_elo, correlations, macs_per_pixel, percent_correct, read_ratings
from .features import BackendSpec
from .imgsig import read_image, write_gray, write_image
from .wdmetric import constant_sigma, scale_sigma, wasserstein_distortion, mse_psnr


def _emit_manifest(output_path, argv, cfg_digest=None, seeds=None, inputs=(), outputs=()):
    manifest = {
        "tool": "wdcodec",
        "version": __version__,
        "command": argv,
        "config_digest": cfg_digest,
        "seeds": seeds or {},
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = Path(str(output_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def _sigma_args(p):
    p.add_argument("--sigma", default="const:8",
                   help="pooling-width source: const:V or saliency:PATH")
    p.add_argument("--scales", type=int, default=6, help="number of dyadic pooling scales")
    p.add_argument("--display-scale", type=float, default=1.0,
                   help="divide pooling widths by this display downscale factor")


def _codec_config(args) -> CodecConfig:
    cfg = CodecConfig()
    over = {}
    if getattr(args, "lam", None) is not None:
        over["lam"] = args.lam
    for name in ("distortion", "seed", "steps", "num_arrays", "cr_channels"):
        v = getattr(args, name.replace("num_arrays", "arrays"), None)
        if v is not None:
            over[{"arrays": "num_arrays"}.get(name, name)] = v
    if getattr(args, "sigma", None):
        over["sigma_source"] = args.sigma
    if getattr(args, "scales", None):
        over["num_scales"] = args.scales
    return replace(cfg, **over)


def cmd_wd(args) -> int:
    a = read_image(args.image_a)
    b = read_image(args.image_b)
    sigma = resolve_sigma(args.sigma, a.h, a.w)
    if args.display_scale != 1.0:
        sigma = scale_sigma(sigma, args.display_scale)
    rep = wasserstein_distortion(a, b, sigma, BackendSpec(), args.scales)
    if args.report:
        Path(args.report).write_text(rep.to_text())
        _emit_manifest(args.report, sys.argv[1:], inputs=[args.image_a, args.image_b],
                       outputs=[args.report])
    mse, psnr = mse_psnr(a, b)
    print(f"total {rep.total:.6f}")
    print(f"mse {mse:.8f} psnr {psnr:.3f}")
    return 0


def cmd_sigma(args) -> int:
    ref = read_image(args.reference)
    sigma = resolve_sigma(args.sigma, ref.h, ref.w)
    if args.display_scale != 1.0:
        sigma = scale_sigma(sigma, args.display_scale)
    peak = max(float(sigma.plane.data.max()), 1e-9)
    from .imgsig import Plane

    write_gray(Plane(sigma.plane.data / peak), args.output)
    _emit_manifest(args.output, sys.argv[1:], inputs=[args.reference], outputs=[args.output])
    print(f"wrote {args.output} (widths scaled by 1/{peak:g} for display)")
    return 0


def cmd_encode(args) -> int:
    img = read_image(args.input)
    cfg = _codec_config(args)
    sigma = None
    if cfg.distortion == "wd":
        sigma = resolve_sigma(cfg.sigma_source, img.h, img.w)
    if args.bpp_target is not None:
        res = encode_to_bpp(img, cfg, args.bpp_target, sigma=sigma)
    else:
        res = encode(img, cfg, sigma=sigma)
    Path(args.output).write_bytes(res.encoded.to_bytes())
    outputs = [args.output]
    if args.recon:
        write_image(res.reconstruction, args.recon)
        outputs.append(args.recon)
    _emit_manifest(args.output, sys.argv[1:], cfg_digest=cfg.digest(),
                   seeds={"seed": cfg.seed, "cr_seed": cfg.cr_seed},
                   inputs=[args.input], outputs=outputs)
    print(f"bpp {res.bpp:.4f} (latent estimate {res.rate_estimate_bits:.0f} bits, "
          f"network {res.network_bits} bits)")
    print(f"reconstruction hash {hashlib.sha256(res.reconstruction.data.tobytes()).hexdigest()[:16]}")
    return 0


def cmd_decode(args) -> int:
    e = EncodedImage.from_bytes(Path(args.input).read_bytes())
    recon, stats = decode(e)
    write_image(recon, args.output)
    _emit_manifest(args.output, sys.argv[1:], inputs=[args.input], outputs=[args.output])
    print(f"decoded {e.w}x{e.h}, {stats.macs_per_pixel:.0f} MACs/pixel, "
          f"latent {stats.latent_bits} bits, network {stats.network_bits} bits")
    print(f"reconstruction hash {hashlib.sha256(recon.data.tobytes()).hexdigest()[:16]}")
    return 0


def cmd_allocate(args) -> int:
    e = EncodedImage.from_bytes(Path(args.input).read_bytes())
    rep = bit_allocation_report(e)
    for n in sorted(rep["per_array_bpp"]):
        print(f"array {n}: {rep['per_array_bpp'][n]:.5f} bpp")
    print(f"networks: {rep['network_bpp']:.5f} bpp")
    print(f"header: {rep['header_bpp']:.5f} bpp")
    print(f"total: {rep['total_bpp']:.5f} bpp")
    return 0


def cmd_macs(args) -> int:
    cfg = _codec_config(args)
    count = macs_per_pixel(cfg, (args.height, args.width))
    print(f"{count:.1f} MACs/pixel at {args.width}x{args.height}")
    return 0


def cmd_elo_fit(args) -> int:
    ratings = read_ratings(args.ratings)
    state = fit_elo(ratings)
    rows = sorted(state.scores.items(), key=lambda kv: -kv[1])
    for arm, score in rows:
        print(f"{arm}\t{score:.1f}\t{state.counts[arm]}")
    if state.clamped:
        print(f"warning: separable arms clamped: {', '.join(state.clamped)}", file=sys.stderr)
    if state.components > 1:
        print(f"warning: comparison graph has {state.components} components; "
              "scores are anchored per component", file=sys.stderr)
    if state.golden_summary:
        for rater, g in sorted(state.golden_summary.items()):
            print(f"golden {rater}: {g['correct']}/{g['asked']} ({g['accuracy']:.0%})")
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arm_id", "elo", "count"])
            for arm, score in rows:
                w.writerow([arm, f"{score:.3f}", state.counts[arm]])
        _emit_manifest(args.output, sys.argv[1:], inputs=[args.ratings], outputs=[args.output])
    return 0


def _read_scores_csv(path):
    """CSV with header (image, crop_y, crop_x, arm_id, metric_name, value)."""
    per_crop: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["image"], (int(row["crop_y"]), int(row["crop_x"])), row["arm_id"])
            per_crop[key] = float(row["value"])
    return per_crop


def cmd_predictivity(args) -> int:
    ratings = read_ratings(args.ratings)
    scores = _read_scores_csv(args.scores)
    frac, missing = percent_correct(scores, ratings)
    print(f"percent-correct {frac:.2%} ({missing} ratings without metric coverage)")
    state = fit_elo(ratings)
    by_arm: dict[str, list[float]] = {}
    if args.arm_scores:
        # per-arm metric means: CSV with header arm_id,bpp,metric_name,value
        with open(args.arm_scores, newline="") as fh:
            for row in csv.DictReader(fh):
                by_arm.setdefault(row["arm_id"], []).append(float(row["value"]))
    else:
        for (image, crop, arm), v in scores.items():
            by_arm.setdefault(arm, []).append(v)
    arms = sorted(set(by_arm) & set(state.scores))
    if len(arms) >= 3:
        xs = [float(np.mean(by_arm[a])) for a in arms]
        ys = [state.scores[a] for a in arms]
        pcc, srcc = correlations(xs, ys)
        print(f"PCC {pcc:.3f} SRCC {srcc:.3f} over {len(arms)} arms")
    else:
        print("PCC/SRCC skipped: fewer than 3 arms with both scores and ratings")
    return 0


def cmd_serve(args) -> int:
    from .raterd import load_study_config, run_server

    cfg = load_study_config(args.config)
    run_server(cfg, static_dir=args.static)
    return 0


def cmd_selftest(args) -> int:
    """Quick oracle checks of the numeric core; exits nonzero on any failure."""
    import math

    from . import autodiff as ad
    from .coder import laplace_cdf_table, range_decode, range_encode
    from .imgsig import PixelImage, gaussian_field

    failures = []

    def check(name, ok):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(0)
    img = PixelImage(np.clip(0.5 + 0.2 * gaussian_field(1, 16, 16, 3).data, 0, 1))
    rep = wasserstein_distortion(img, img, constant_sigma(16, 16, 4.0))
    check("metric zero on identical images", rep.total == 0.0)

    from .features import extract_features

    a = PixelImage(rng.uniform(0, 1, (3, 16, 16)))
    b = PixelImage(rng.uniform(0, 1, (3, 16, 16)))
    r0 = wasserstein_distortion(a, b, constant_sigma(16, 16, 0.0))
    fa = extract_features(a, BackendSpec()).maps
    fb = extract_features(b, BackendSpec()).maps
    ref = sum(float(np.abs(ma.tensor.data - mb.tensor.data).mean(axis=(1, 2)).sum())
              for ma, mb in zip(fa, fb))
    check("pointwise reduction at zero width", abs(r0.total - ref) < 1e-9)

    t = laplace_cdf_table(0.0, 1.2, -20, 20)
    syms = rng.integers(-20, 21, size=2000).tolist()
    check("range coder round trip", range_decode(range_encode(syms, t), t, len(syms)) == syms)

    g = ad.Graph(dtype=np.float64)
    x = g.param("x", (4, 4))
    g.set_output(g.sum(g.square(x)))
    xv = rng.normal(size=(4, 4))
    _, grads, _ = ad.backward_grad(g, {"x": xv})
    check("gradient of sum of squares", np.allclose(grads["x"], 2 * xv, rtol=1e-12))

    per_elem = -math.log2(1.0 - math.exp(-0.5))
    bits, _ = ad.laplace_bits(np.zeros(1), np.zeros(1), np.ones(1))
    check("unit Laplace rate closed form", abs(float(bits[0]) - per_elem) < 1e-9)

    print(f"{len(failures)} failures")
    return 1 if failures else 0


def _dump_config() -> int:
    cfg = CodecConfig()
    for k, v in sorted(cfg.__dict__.items()):
        if isinstance(v, BackendSpec):
            v = v.describe()
        print(f"{k} = {v}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wdcodec", description=__doc__)
    ap.add_argument("--version", action="version", version=f"wdcodec {__version__}")
    ap.add_argument("--dump-config", action="store_true", help="print defaults and exit")
    sub = ap.add_subparsers(dest="command")

    p = sub.add_parser("wd", help="distortion between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    _sigma_args(p)
    p.add_argument("--report", help="write a key=value report file")
    p.set_defaults(fn=cmd_wd)

    p = sub.add_parser("sigma", help="emit a pooling-width map image")
    p.add_argument("reference", help="image defining the output resolution")
    p.add_argument("output")
    _sigma_args(p)
    p.set_defaults(fn=cmd_sigma)

    p = sub.add_parser("encode", help="compress an image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--recon", help="also write the encoder-side reconstruction")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--bpp-target", type=float)
    group.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--distortion", choices=["mse", "wd"], default=None)
    p.add_argument("--sigma", default=None, help="const:V or saliency:PATH")
    p.add_argument("--scales", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--arrays", type=int, default=None)
    p.add_argument("--cr-channels", dest="cr_channels", type=int, default=None)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="decompress a bitstream")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("allocate", help="per-array bit allocation of a bitstream")
    p.add_argument("--input", required=True)
    p.set_defaults(fn=cmd_allocate)

    p = sub.add_parser("macs", help="analytic decoder complexity")
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--arrays", type=int, default=None)
    p.add_argument("--cr-channels", dest="cr_channels", type=int, default=None)
    p.set_defaults(fn=cmd_macs)

    p = sub.add_parser("elo-fit", help="fit scores from a ratings log")
    p.add_argument("--ratings", required=True, help="JSONL rating records")
    p.add_argument("--output", help="write arm_id,elo,count CSV")
    p.set_defaults(fn=cmd_elo_fit)

    p = sub.add_parser("predictivity", help="percent-correct and rank correlations")
    p.add_argument("--ratings", required=True)
    p.add_argument("--scores", required=True,
                   help="CSV: image,crop_y,crop_x,arm_id,metric_name,value")
    p.add_argument("--arm-scores", dest="arm_scores",
                   help="optional per-arm means CSV: arm_id,bpp,metric_name,value")
    p.set_defaults(fn=cmd_predictivity)

    p = sub.add_parser("serve", help="start the rating study service")
    p.add_argument("--config", required=True, help="key=value study file")
    p.add_argument("--static", help="directory with the rater UI bundle")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("selftest", help="run quick oracle checks")
    p.set_defaults(fn=cmd_selftest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.dump_config:
        return _dump_config()
    if not getattr(args, "fn", None):
        ap.print_usage()
        return 2
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - single reporting point for the CLI
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
