"""Command-line surface: degradation, restoration, HDR, and benchmarking.

Subcommands

  degrade      clean image -> observed.pgm/.pfm, mask.pgm, var.pfm
  restore      degraded problem files -> restored image + metrics report
  denoise      preset: add noise to a clean image, restore, report PSNR
  interpolate  preset: erase pixels (optionally noisy), restore, report PSNR
  zoom         preset: keep a coarse lattice of pixels, restore, report PSNR
  hdr-sim      linear HDR image -> simulated SVE raw capture + pattern
  hdr-restore  raw capture + pattern -> linear HDR reconstruction
  bench        PSNR table (TSV) over a synthetic corpus and optional images
  config       print every configuration key with its default

Exit codes: 0 success, 1 argument/configuration/file errors, 2 numerical
failures. All randomness is seeded; HBE_DETERMINISTIC=1 forces serial
deterministic execution regardless of --threads.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import SCHEMA, ConfigError, RunConfig, default_documentation, load_config
from .core import NumericalError
from .degrade import MaskSpec, NoiseModel, build_problem, make_texture
from .formats import ImageFormatError, read_image, write_image, write_pfm, write_pgm, write_png_preview
from .hdr import exposure_mask, generate_sve_pattern, reconstruct_hdr, simulate_sve_capture
from .metrics import compute_psnr
from .degrade import RestorationProblem
from .solver import restore_detailed


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgumentError(message)


def _parse_mask_arg(text, seed):
    kind, _, rest = text.partition(":")
    if kind == "random":
        return MaskSpec.random_uniform(float(rest), seed=seed)
    if kind == "zoom":
        return MaskSpec.zoom(int(rest))
    if kind == "explicit":
        return MaskSpec.explicit(read_image(rest) > 0)
    raise _ArgumentError(f"unknown mask spec {text!r} (random:RHO, zoom:Z, explicit:PATH)")


def _parse_noise_arg(text):
    kind, _, rest = text.partition(":")
    if kind == "none":
        return NoiseModel.constant(0.0)
    if kind == "const":
        return NoiseModel.constant(float(rest))
    if kind == "affine":
        gain, offset = (float(tok) for tok in rest.split(","))
        return NoiseModel.affine_signal(gain, offset)
    if kind == "per_pixel":
        return NoiseModel.per_pixel(read_image(rest))
    raise _ArgumentError(
        f"unknown noise spec {text!r} (none, const:S2, affine:A,B, per_pixel:PATH)"
    )


def _runconfig(args):
    rc = RunConfig(load_config(args.config) if getattr(args, "config", None) else {})
    if getattr(args, "seed", None) is not None:
        rc.set("seed", args.seed)
    if getattr(args, "threads", None) is not None:
        rc.set("threads", args.threads)
    return rc


def _float32_roundtrip(image):
    # metrics are computed on the float32 values that the PFM file stores,
    # so recomputing them from the written file reproduces them exactly
    return np.asarray(image, dtype=np.float32).astype(np.float64)


def _report_line(path, payload):
    if path:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(payload, sort_keys=True) + "\n")


def _restore_problem(problem, rc, task):
    cfg = rc.solver_config(task=task)
    t0 = time.perf_counter()
    image, report = restore_detailed(problem, cfg)
    seconds = time.perf_counter() - t0
    return _float32_roundtrip(image), seconds, report


def _preset(kind, clean, rc, noise=None):
    """Shared implementation of the denoise/interpolate/zoom presets and the
    bench rows; returns (restored, problem, row dict)."""
    seed = rc.get("seed")
    if kind == "denoise":
        spec = MaskSpec.random_uniform(0.0, seed=seed)
        noise = noise or NoiseModel.constant(rc.get("noise.sigma2"))
        task, params = "denoising", f"sigma2={rc.get('noise.sigma2'):g}"
    elif kind == "interpolate":
        spec = MaskSpec.random_uniform(rc.get("mask.rho"), seed=seed)
        if noise is None:
            noise = rc.noise_model(read_image)
        params = f"rho={rc.get('mask.rho'):g}"
        if noise.kind != "constant" or noise.sigma2 > 0:
            params += f",noise={noise.kind}"
        task = "interpolation"
    elif kind == "zoom":
        spec = MaskSpec.zoom(rc.get("mask.factor"))
        noise = noise or NoiseModel.constant(0.0)
        task, params = "interpolation", f"factor={rc.get('mask.factor')}"
    else:
        raise _ArgumentError(f"unknown preset {kind!r}")
    problem, truth = build_problem(
        clean, spec, noise, seed=seed + 1, clip=rc.get("clip")
    )
    restored, seconds, report = _restore_problem(problem, rc, task)
    metrics = compute_psnr(restored, truth)
    row = {
        "task": kind,
        "params": params,
        "psnr": metrics.psnr,
        "mse": metrics.mse,
        "seconds": seconds,
        "seed": seed,
        "config_hash": rc.digest(),
        "group_failures": report["group_failures"],
    }
    return restored, problem, row


def cmd_degrade(args):
    rc = _runconfig(args)
    clean = read_image(args.input)
    seed = rc.get("seed")
    spec = _parse_mask_arg(args.mask, seed) if args.mask else rc.mask_spec(read_image)
    noise = _parse_noise_arg(args.noise) if args.noise else rc.noise_model(read_image)
    problem, _ = build_problem(
        clean, spec, noise, seed=seed + 1, poison=args.poison, clip=rc.get("clip")
    )
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_pgm(outdir / "observed.pgm", np.nan_to_num(problem.observed), maxval=65535)
    write_pfm(outdir / "observed.pfm", np.nan_to_num(problem.observed))
    write_pgm(outdir / "mask.pgm", 255.0 * problem.mask, maxval=255)
    write_pfm(outdir / "var.pfm", problem.noise_var)
    print(f"wrote observed.pgm observed.pfm mask.pgm var.pfm to {outdir}")
    return 0


def cmd_restore(args):
    rc = _runconfig(args)
    observed = read_image(args.observed)
    mask = (read_image(args.mask) > 0).astype(np.float64)
    noise_var = read_image(args.var)
    problem = RestorationProblem(observed=observed, mask=mask, noise_var=noise_var)
    task = "denoising" if bool(np.all(mask == 1.0)) else "interpolation"
    restored, seconds, report = _restore_problem(problem, rc, task)
    write_image(args.output, restored)
    if args.pgm:
        write_pgm(args.pgm, restored, maxval=65535)
    payload = {
        "command": "restore",
        "observed": str(args.observed),
        "output": str(args.output),
        "task": task,
        "seconds": seconds,
        "seed": rc.get("seed"),
        "config_hash": rc.digest(),
        "threads": report["threads"],
        "group_failures": report["group_failures"],
    }
    if args.reference:
        metrics = compute_psnr(restored, read_image(args.reference))
        payload.update(psnr=metrics.psnr, mse=metrics.mse)
        print(f"psnr={metrics.psnr:.4f} dB mse={metrics.mse:.6g}")
    _report_line(args.report, payload)
    print(f"restored {args.observed} -> {args.output} in {seconds:.2f}s")
    return 0


def _cmd_preset(kind, args):
    rc = _runconfig(args)
    noise = None
    if getattr(args, "sigma2", None) is not None:
        rc.set("noise.sigma2", args.sigma2)
        noise = NoiseModel.constant(args.sigma2)
    if getattr(args, "missing", None) is not None:
        rc.set("mask.rho", args.missing)
    if getattr(args, "factor", None) is not None:
        rc.set("mask.factor", args.factor)
    if kind == "interpolate" and noise is None:
        if getattr(args, "noise", None) is not None:
            noise = _parse_noise_arg(args.noise)
        elif "noise.kind" not in rc.settings:
            noise = NoiseModel.constant(0.0)  # interpolation defaults noiseless
    clean = read_image(args.input)
    restored, problem, row = _preset(kind, clean, rc, noise=noise)
    if args.output:
        write_image(args.output, restored)
    row.update(command=kind, input=str(args.input))
    _report_line(args.report, row)
    print(f"{kind}: psnr={row['psnr']:.4f} dB ({row['seconds']:.2f}s)")
    return 0


def cmd_hdr_sim(args):
    rc = _runconfig(args)
    scene = np.maximum(read_image(args.input), 0.0)
    cam = rc.camera(read_image)
    seed = rc.get("seed")
    levels = rc.get("sve.levels") if args.levels is None else [float(t) for t in args.levels.split(",")]
    layout = args.layout or rc.get("sve.layout")
    h, w = scene.shape
    pattern = generate_sve_pattern(levels, layout, w, h, seed=seed)
    raw = simulate_sve_capture(scene, pattern, cam, seed=seed + 1, noiseless=args.noiseless)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_pgm(outdir / "raw.pgm", raw, maxval=65535)
    write_pfm(outdir / "raw.pfm", raw)
    write_pfm(outdir / "pattern.pfm", pattern.gains)
    usable = float(exposure_mask(np.rint(raw), cam).mean())
    print(f"wrote raw.pgm raw.pfm pattern.pfm to {outdir} (usable pixels: {100*usable:.1f}%)")
    return 0


def cmd_hdr_restore(args):
    rc = _runconfig(args)
    raw = read_image(args.raw)
    pattern_gains = read_image(args.pattern)
    from .hdr import SvePattern

    pattern = SvePattern(gains=pattern_gains)
    cam = rc.camera(read_image)
    cfg = rc.solver_config(task="interpolation")
    t0 = time.perf_counter()
    image = reconstruct_hdr(raw, pattern, cam, cfg, assume_noiseless=args.noiseless)
    seconds = time.perf_counter() - t0
    image = _float32_roundtrip(image)
    write_image(args.output, image)
    if args.preview:
        write_png_preview(args.preview, image)
    payload = {
        "command": "hdr-restore",
        "raw": str(args.raw),
        "output": str(args.output),
        "seconds": seconds,
        "seed": rc.get("seed"),
        "config_hash": rc.digest(),
    }
    if args.reference:
        ref = read_image(args.reference)
        scale = 255.0 / max(float(ref.max()), 1e-30)
        metrics = compute_psnr(image * scale, ref * scale)
        payload.update(psnr_norm255=metrics.psnr)
        print(f"psnr(0-255 normalized)={metrics.psnr:.4f} dB")
    _report_line(args.report, payload)
    print(f"reconstructed {args.raw} -> {args.output} in {seconds:.2f}s")
    return 0


def synthetic_corpus(size, seed=0):
    """The in-repo benchmark images (standard test images are user-supplied)."""
    return {
        "stripes-fine": make_texture("stripes", size, size, seed=seed, period=6.0, angle=0.3),
        "stripes-wide": make_texture("stripes", size, size, seed=seed, period=11.0, angle=1.2),
        "checker": make_texture("checker", size, size, seed=seed, cell=6),
        "blobs": make_texture("filtered-noise", size, size, seed=seed, sigma=2.5),
        "edge": make_texture("edge", size, size, seed=seed, angle=1.1),
        "scene": make_texture("scene", size, size, seed=seed),
    }


BENCH_TASKS = (
    ("denoise", {"noise.sigma2": 10.0}),
    ("denoise", {"noise.sigma2": 30.0}),
    ("interpolate", {"mask.rho": 0.5, "noise.kind": "none"}),
    ("interpolate", {"mask.rho": 0.7, "noise.kind": "none"}),
    ("zoom", {"mask.factor": 2}),
)


def cmd_bench(args):
    rc = _runconfig(args)
    corpus = {} if args.only_images else dict(synthetic_corpus(args.size, seed=rc.get("seed")))
    for path in args.images or []:
        corpus[Path(path).stem] = read_image(path)
    if not corpus:
        raise _ArgumentError("benchmark corpus is empty")
    tasks = [t for t in BENCH_TASKS if not args.tasks or t[0] in args.tasks]
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        print("image\ttask\tparams\tpsnr\truntime\tseed", file=out)
        for name, clean in corpus.items():
            for kind, overrides in tasks:
                psnrs, secs = [], []
                base = rc.get("seed")
                params = None
                for r in range(args.realizations):
                    rrc = RunConfig(dict(rc.settings))
                    for key, value in overrides.items():
                        rrc.set(key, value)
                    rrc.set("seed", base + r)
                    _, _, row = _preset(kind, clean, rrc)
                    psnrs.append(row["psnr"])
                    secs.append(row["seconds"])
                    params = row["params"]
                print(
                    f"{name}\t{kind}\t{params}\t{np.mean(psnrs):.4f}"
                    f"\t{np.mean(secs):.3f}\t{base}",
                    file=out,
                )
                out.flush()
    finally:
        if args.output:
            out.close()
    return 0


def cmd_config(args):
    print(default_documentation())
    return 0


def build_parser():
    parser = _Parser(prog="hbe", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None, help="base seed (default 0)")
        p.add_argument("--threads", type=int, default=None, help="worker threads, 0 = auto")
        if config:
            p.add_argument("--config", default=None, help="key=value configuration file")
        p.add_argument("--report", default=None, help="append a JSON-lines run record here")

    p = sub.add_parser("degrade", help="apply a synthetic degradation to a clean image")
    p.add_argument("--input", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--mask", default=None, help="random:RHO | zoom:Z | explicit:PATH")
    p.add_argument("--noise", default=None, help="none | const:S2 | affine:A,B | per_pixel:PATH")
    p.add_argument("--poison", action="store_true", help="store NaN at masked pixels (leak audit)")
    common(p)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("restore", help="restore a degraded problem (observed+mask+var)")
    p.add_argument("--observed", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--var", required=True)
    p.add_argument("--output", required=True, help="restored image (.pfm recommended)")
    p.add_argument("--pgm", default=None, help="optional additional 16-bit PGM export")
    p.add_argument("--reference", default=None, help="clean image for PSNR")
    common(p)
    p.set_defaults(func=cmd_restore)

    for kind, extra in (
        ("denoise", ("sigma2",)),
        ("interpolate", ("missing", "sigma2", "noise")),
        ("zoom", ("factor",)),
    ):
        p = sub.add_parser(kind, help=f"{kind} preset over a clean image")
        p.add_argument("--input", required=True)
        p.add_argument("--output", default=None, help="restored image path")
        if "sigma2" in extra:
            p.add_argument("--sigma2", type=float, default=None, help="noise variance")
        if "missing" in extra:
            p.add_argument("--missing", type=float, default=None, help="missing fraction")
        if "noise" in extra:
            p.add_argument("--noise", default=None, help="noise spec, default none")
        if "factor" in extra:
            p.add_argument("--factor", type=int, default=None, help="zoom factor")
        common(p)
        p.set_defaults(func=lambda a, k=kind: _cmd_preset(k, a))

    p = sub.add_parser("hdr-sim", help="simulate an SVE raw capture of a linear HDR image")
    p.add_argument("--input", required=True, help="linear irradiance image (.pfm)")
    p.add_argument("--outdir", required=True)
    p.add_argument("--levels", default=None, help="comma-separated optical gains")
    p.add_argument("--layout", default=None, choices=["regular", "nonregular"])
    p.add_argument("--noiseless", action="store_true")
    common(p)
    p.set_defaults(func=cmd_hdr_sim)

    p = sub.add_parser("hdr-restore", help="reconstruct linear HDR from a raw SVE capture")
    p.add_argument("--raw", required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--preview", default=None, help="8-bit tone-mapped PNG path")
    p.add_argument("--reference", default=None, help="ground-truth irradiance for PSNR")
    p.add_argument("--noiseless", action="store_true", help="assume a noiseless capture")
    common(p)
    p.set_defaults(func=cmd_hdr_restore)

    p = sub.add_parser("bench", help="PSNR table over the synthetic corpus (TSV)")
    p.add_argument("--size", type=int, default=64, help="synthetic image side")
    p.add_argument("--realizations", type=int, default=10, help="averaging runs per row")
    p.add_argument("--images", nargs="*", default=None, help="extra user-supplied images")
    p.add_argument("--only-images", action="store_true", help="skip the synthetic corpus")
    p.add_argument("--tasks", nargs="*", default=None, help="restrict to these task kinds")
    p.add_argument("--output", default=None, help="TSV path (default stdout)")
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("config", help="print all configuration keys and defaults")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ImageFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
