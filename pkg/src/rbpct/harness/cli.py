"""``rbpct`` command line.

Exit codes: 0 success, 1 a self-check exceeded its tolerance, 2 usage or
config error, 3 unreadable or inconsistent input data, 4 reconstruction
failed (for example divergence).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..mbir import normal_rhs
from ..metrics import snr
from ..projection import GeometryError, ParallelGeometry, adjoint_check, wedge_energy
from ..rbpdip import DivergenceError
from ..simulate import (IngestionError, NoiseSpec, load_image, load_sinogram, make_sinogram, rotate_image,
                        save_image, save_sinogram, shepp_logan, sinogram_to_csv)
from ..unet import UNetConfigError
from .checks import adjoint_suite, gradcheck_suite
from .config import ConfigFile, load_config, normalise_key, parse_bool, parse_list
from .methods import ConfigError, canonical_method, reconstruct
from .sweep import SweepSpec, run_sweep

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_INPUT, EXIT_RUN = 0, 1, 2, 3, 4


def read_array(path) -> np.ndarray:
    if str(path).endswith(".npy"):
        try:
            arr = np.load(path)
        except (OSError, ValueError) as exc:
            raise IngestionError(f"cannot read {path}: {exc}") from exc
        if arr.ndim != 2:
            raise IngestionError(f"{path}: expected a 2-D array")
        return np.asarray(arr, dtype=np.float64)
    return load_image(path)


def write_array(image, path) -> None:
    """``.npy`` keeps exact values; PGM/PNG are clipped to [0, 1]."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if str(path).endswith(".npy"):
        np.save(path, image)
    else:
        save_image(image, path)


# ---------------------------------------------------------- subcommands


def cmd_phantom(args) -> int:
    img = shepp_logan(args.size, args.height)
    if args.rotate:
        img = rotate_image(img, args.rotate)
    write_array(img, args.out)
    print(f"wrote {args.out} ({img.shape[1]}x{img.shape[0]})")
    return EXIT_OK


def _source_image(args) -> np.ndarray:
    return shepp_logan(args.size) if args.image == "shepp-logan" else read_array(args.image)


def cmd_sinogram(args) -> int:
    img = _source_image(args)
    geom = ParallelGeometry.uniform(args.views, img.shape, args.range_deg, args.detector_count,
                                    args.detector_spacing)
    factor = 1.0
    if args.max_line_integral is not None:
        factor = args.max_line_integral / float(np.max(make_sinogram(img, geom).values))
    noise = None if args.i0 is None else NoiseSpec(args.i0, args.seed)
    sino = make_sinogram(img * factor, geom, noise)
    save_sinogram(sino, args.out)
    if args.csv:
        sinogram_to_csv(sino, args.csv)
    print(f"wrote {args.out}: {geom.n_angles} views x {geom.detector_count} detectors, intensity scale {factor!r}")
    return EXIT_OK


def _method_settings(args) -> dict:
    keys = ("iters", "stop_tol", "seed") if args.method == "mbir" else (
        "iters", "nc", "ns", "beta_max", "delta", "seed", "lr", "depth", "base_channels", "rbp_base",
        "checkpoint_every")
    settings = {k: getattr(args, k) for k in keys if getattr(args, k) is not None}
    if args.method != "mbir" and settings.get("checkpoint_every"):
        settings["checkpoint_dir"] = args.checkpoint_dir or f"{args.out}.ckpt"
    return settings


def cmd_reconstruct(args) -> int:
    args.method = canonical_method(args.method)
    sino = load_sinogram(args.sino)
    gt = read_array(args.gt) if args.gt else None
    settings = _method_settings(args)
    if args.method == "mbir":
        settings.setdefault("stop_tol", 1e-6)
    rec, run = reconstruct(args.method, sino, sino.geometry, settings, ground_truth=gt,
                           resume_from=args.resume)
    write_array(rec, args.out)
    if args.curve:
        run.to_csv(args.curve)
    last = run.records[-1]
    print(f"method={args.method} status={run.status} iterations={len(run.records)} final_loss={last.loss!r}")
    ref = _atg_norm(sino)
    rel = last.residual / ref if ref > 0 else 0.0
    line = f"residual={last.residual!r} relative_residual={rel!r}"
    if args.method == "mbir":
        tol = settings["stop_tol"]
        line += f" stop_tol={tol!r} below_stop_tol={'yes' if rel <= tol else 'no'}"
    print(line)
    if gt is not None:
        print(f"snr_db={snr(rec, gt)!r}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _atg_norm(sino) -> float:
    return float(np.linalg.norm(normal_rhs(sino, sino.geometry)))


def cmd_sweep(args, cfg: ConfigFile | None) -> int:
    missing = [k for k in ("kind", "grid", "methods") if getattr(args, k) is None]
    if missing:
        raise ConfigError("sweep needs " + ", ".join(f"--{k}" for k in missing) + " (flag or config key)")
    methods = parse_list(args.methods)
    if not methods:
        raise ConfigError("sweep method list is empty")
    try:
        grid = [float(v) for v in parse_list(args.grid)]
    except ValueError as exc:
        raise ConfigError(f"bad grid: {exc}") from exc
    per_method = {}
    for name, values in (cfg.methods.items() if cfg else ()):
        per_method[canonical_method(name)] = {k.replace("-", "_"): v for k, v in values.items()}
    if args.iters is not None:
        for m in methods:
            per_method.setdefault(canonical_method(m), {}).setdefault("iters", args.iters)
    spec = SweepSpec(kind=args.kind, grid=grid, methods=methods, out_dir=args.out, image=args.image,
                     size=args.size, views=args.views, range_deg=args.range_deg, i0=args.i0,
                     max_line_integral=args.max_line_integral, detector_count=args.detector_count,
                     detector_spacing=args.detector_spacing, band_deg=args.band_deg, seed=args.seed,
                     method_settings=per_method, jobs=args.jobs, stable=args.stable)
    report = run_sweep(spec)
    failed = 0
    for row in report.rows:
        shown = row["snr_db"] if row["status"] == "ok" else row["error_code"]
        print(f"{row['kind']} {row['grid_value']:>8} {row['method']:<10} {shown}")
        failed += row["status"] != "ok"
    print(f"wrote {report.summary_path} ({len(report.rows)} rows, {failed} failed)")
    return EXIT_OK


def cmd_adjoint_test(args) -> int:
    if args.views is not None or args.size is not None:
        geom = ParallelGeometry.uniform(args.views or 180, args.size or 64, args.range_deg)
        results = [(geom.n_angles, geom.image_width, adjoint_check(geom, args.seed))]
    else:
        results = [(c.views, c.size, c.discrepancy) for c in adjoint_suite(args.trials, args.seed)]
    for views, size, disc in results:
        print(f"views={views:<4} size={size:<4} discrepancy={disc:.3e}")
    worst = max(d for _, _, d in results)
    print(f"max discrepancy {worst:.3e} (tolerance {args.tol:.1e})")
    return EXIT_OK if worst <= args.tol else EXIT_CHECK_FAILED


def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(args.coords, args.seed)
    for name, (err, n) in results.items():
        print(f"{name:<22} coords={n:<4} max_rel_error={err:.3e}")
    worst = max(err for err, _ in results.values())
    print(f"worst relative error {worst:.3e} (tolerance {args.tol:.1e})")
    return EXIT_OK if worst <= args.tol else EXIT_CHECK_FAILED


def cmd_wedge(args) -> int:
    img = read_array(args.image)
    views = args.views if args.views is not None else max(1, int(round(args.range_deg)))
    geom = ParallelGeometry.uniform(views, img.shape, args.range_deg)
    measured, unmeasured = wedge_energy(img, geom, args.band_deg)
    total = measured + unmeasured
    frac = unmeasured / total if total > 0 else 0.0
    print(f"measured={measured!r} unmeasured={unmeasured!r} unmeasured_fraction={frac!r}")
    return EXIT_OK


# --------------------------------------------------------------- parser


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="rbpct", description="CT reconstruction with MBIR, DIP and RBP-DIP.")
    parser.add_argument("--config", metavar="FILE", help="plain-text config whose keys mirror the flags")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    subs = {}

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        subs[name] = p
        return p

    p = add("phantom", "write a Shepp-Logan phantom image")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--height", type=int, default=None, help="defaults to --size")
    p.add_argument("--rotate", type=float, default=0.0, help="counter-clockwise rotation in degrees")
    p.add_argument("--out", required=True, help=".pgm, .png or .npy")
    p.set_defaults(func=cmd_phantom)

    p = add("sinogram", "forward project an image into a sinogram container")
    p.add_argument("--image", default="shepp-logan", help="image path or 'shepp-logan'")
    p.add_argument("--size", type=int, default=64, help="phantom size when --image is shepp-logan")
    p.add_argument("--views", type=int, default=180)
    p.add_argument("--range-deg", type=float, default=180.0)
    p.add_argument("--i0", type=float, default=None, help="photon count; omit for noise-free data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-line-integral", type=float, default=None,
                   help="scale the image so the largest line integral equals this")
    p.add_argument("--detector-count", type=int, default=0)
    p.add_argument("--detector-spacing", type=float, default=0.5)
    p.add_argument("--csv", default=None, help="also write the sinogram as CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sinogram)

    p = add("reconstruct", "reconstruct an image from a sinogram container")
    p.add_argument("--sino", required=True)
    p.add_argument("--out", required=True, help=".npy keeps exact values")
    p.add_argument("--method", default="mbir", choices=["mbir", "dip", "dip-fixed", "rbp-dip"])
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--stop-tol", type=float, default=None, help="mbir relative residual tolerance")
    p.add_argument("--nc", type=float, default=None)
    p.add_argument("--ns", type=float, default=None)
    p.add_argument("--beta-max", type=float, default=None)
    p.add_argument("--delta", type=float, default=None, help="Huber threshold")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--rbp-base", choices=["output", "input"], default=None)
    p.add_argument("--gt", default=None, help="ground truth image; used for SNR logging only")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--curve", default=None, help="write the loss/SNR curve CSV here")
    p.set_defaults(func=cmd_reconstruct)

    p = add("sweep", "run an experiment sweep and write a report bundle")
    p.add_argument("--kind", choices=["sparse-view", "limited-angle", "low-dose", "perturbation"])
    p.add_argument("--grid", default=None, help="comma-separated grid values")
    p.add_argument("--methods", default=None, help="comma-separated subset of mbir,dip-fixed,rbp-dip")
    p.add_argument("--image", default="shepp-logan")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--views", type=int, default=30)
    p.add_argument("--range-deg", type=float, default=180.0)
    p.add_argument("--i0", type=float, default=None)
    p.add_argument("--max-line-integral", type=float, default=2.0)
    p.add_argument("--detector-count", type=int, default=0)
    p.add_argument("--detector-spacing", type=float, default=0.5)
    p.add_argument("--band-deg", type=float, default=0.5)
    p.add_argument("--iters", type=int, default=None, help="iteration count for every method")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="sweep-out")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--stable", action="store_true", help="omit wall time from the summary")
    p.set_defaults(func=cmd_sweep)

    p = add("adjoint-test", "dot-product test of the projector pair")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=None, help="test one geometry instead of the suite")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--range-deg", type=float, default=180.0)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_adjoint_test)

    p = add("gradcheck", "finite-difference check of autodiff ops and the U-net")
    p.add_argument("--coords", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = add("wedge", "split an image's Fourier energy into measured and unmeasured parts")
    p.add_argument("--image", required=True)
    p.add_argument("--range-deg", type=float, default=180.0)
    p.add_argument("--views", type=int, default=None, help="defaults to one per degree")
    p.add_argument("--band-deg", type=float, default=0.5)
    p.set_defaults(func=cmd_wedge)
    return parser, subs


# ------------------------------------------------------ config merging


def _split_config_flag(argv: list[str]) -> tuple[str | None, list[str]]:
    path, rest, i = None, [], 0
    while i < len(argv):
        a = argv[i]
        if a == "--config":
            if i + 1 >= len(argv):
                raise ConfigError("--config needs a file name")
            path, i = argv[i + 1], i + 2
            continue
        if a.startswith("--config="):
            path = a.split("=", 1)[1]
        else:
            rest.append(a)
        i += 1
    return path, rest


def _options(p: argparse.ArgumentParser) -> dict:
    return {s[2:]: a for a in p._actions for s in a.option_strings if s.startswith("--")}


def config_tokens(cfg: ConfigFile, command: str, subs: dict) -> list[str]:
    """Turn config entries into flags placed ahead of the real ones."""
    unknown_sections = sorted(set(cfg.sections) - set(subs))
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown_sections)}")
    opts = _options(subs[command])
    known_anywhere = set().union(*(_options(p) for p in subs.values()))
    top, own = cfg.for_command(command)
    tokens = []
    for scope, values in (("top level", top), (f"[{command}]", own)):
        for key, value in values.items():
            key = normalise_key(key)
            if key in ("help", "config") or key not in opts:
                if scope == "top level" and key in known_anywhere and key not in ("help", "config"):
                    continue
                raise ConfigError(f"unknown config key {key!r} in {scope}")
            action = opts[key]
            if isinstance(action, argparse._StoreTrueAction):
                if parse_bool(value):
                    tokens.append(f"--{key}")
            else:
                tokens.append(f"--{key}={value}")
    return tokens


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    cfg = None
    try:
        path, argv = _split_config_flag(argv)
        if path is not None:
            cfg = load_config(path)
            idx = next((i for i, a in enumerate(argv) if a in subs), None)
            if idx is not None:
                argv = argv[: idx + 1] + config_tokens(cfg, argv[idx], subs) + argv[idx + 1:]
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"rbpct: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if args.func is cmd_sweep:
            return cmd_sweep(args, cfg)
        return args.func(args)
    except ConfigError as exc:
        subs[args.command].print_usage(sys.stderr)
        print(f"rbpct {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, GeometryError, UNetConfigError) as exc:
        print(f"rbpct {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DivergenceError, FloatingPointError) as exc:
        print(f"rbpct {args.command}: run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    except ValueError as exc:
        print(f"rbpct {args.command}: invalid value: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
