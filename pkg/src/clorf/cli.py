"""Command-line entry point: ``clorf <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import math
import sys

import numpy as np

from . import degrade, fuse, metrics, synth, verify
from .cube import FormatError, HsiCube, atomic_write, read_cube, write_cube

log = logging.getLogger("clorf")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _snr(text):
    v = float(text)
    if math.isnan(v):
        raise argparse.ArgumentTypeError("SNR must be a number or inf")
    return v


# SRF CSV ----------------------------------------------------------------------

def write_srf(srf: degrade.SpectralResponse, path) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in srf.weights]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_srf(path) -> degrade.SpectralResponse:
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise FormatError(f"SRF row {n}: not a list of numbers") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise FormatError("SRF rows must be nonempty and of equal length")
    try:
        return degrade.SpectralResponse(np.array(rows))
    except ValueError as exc:
        raise FormatError(f"SRF: {exc}") from None


# subcommands --------------------------------------------------------------------

def cmd_make_gt(args):
    if args.rank > min(args.bands, args.height * args.width):
        raise UsageError(f"--rank {args.rank} exceeds min(bands, height*width)")
    gt = synth.make_gt(args.height, args.width, args.bands, args.rank, args.seed)
    write_cube(gt, args.out)
    print(f"wrote {args.out}: {args.height}x{args.width}x{args.bands}, rank {args.rank}")
    return EXIT_OK


def cmd_simulate(args):
    gt = read_cube(args.gt)
    if args.msi_bands > gt.bands:
        raise UsageError(f"--msi-bands {args.msi_bands} exceeds the {gt.bands} GT bands")
    psf = degrade.gaussian_psf(args.psf_size, args.psf_sigma)
    down = degrade.DownsampleSpec(args.ratio, args.offset)
    if args.psf_size > 2 * min(gt.height, gt.width) - 1:
        raise UsageError(f"--psf-size {args.psf_size} too large for a {gt.height}x{gt.width} image")
    if down.offset >= min(gt.height, gt.width):
        raise UsageError(f"offset {down.offset} leaves no samples")
    srf = degrade.gaussian_srf(args.msi_bands, gt.bands)
    lr, hr = degrade.simulate(gt, psf, down, srf, degrade.NoiseSpec(args.snr_hsi, 2 * args.seed),
                              degrade.NoiseSpec(args.snr_msi, 2 * args.seed + 1))
    srf_path = args.out_srf or f"{args.out_msi}.srf.csv"
    write_cube(lr, args.out_hsi)
    write_cube(hr, args.out_msi)
    write_srf(srf, srf_path)
    print(f"wrote {args.out_hsi} ({lr.height}x{lr.width}x{lr.bands}), "
          f"{args.out_msi} ({hr.height}x{hr.width}x{hr.bands}), {srf_path}")
    return EXIT_OK


def cmd_fuse(args):
    preset = fuse.PRESETS[args.preset]
    lr_hsi = read_cube(args.hsi)
    hr_msi = read_cube(args.msi)
    srf = read_srf(args.srf)
    degr = degrade.DegradationSpec(degrade.gaussian_psf(args.psf_size, args.psf_sigma),
                                   degrade.DownsampleSpec(args.ratio, args.offset), srf)
    cfg = fuse.TrainConfig(
        lam=args.lam, eta=args.eta,
        lr=args.lr if args.lr is not None else preset["lr"],
        max_iters=args.iters if args.iters is not None else preset["max_iters"],
        patience=args.patience, min_rel_improve=args.min_rel_improve, seed=args.seed, log_every=args.log_every)
    dims = (hr_msi.height, hr_msi.width, lr_hsi.bands)
    if args.rank > min(dims[2], dims[0] * dims[1]):
        raise UsageError(f"--rank {args.rank} exceeds min(L, N) = {min(dims[2], dims[0] * dims[1])}")
    try:
        # shape problems surface here, before any training
        fuse.FusionProblem(lr_hsi, hr_msi, degr)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = fuse.init_model(dims, args.rank, preset["spatial_hidden"], preset["spectral_hidden"],
                            args.omega0, args.activation, args.seed)
    model, report = fuse.train(lr_hsi, hr_msi, degr, model, cfg)
    fuse.save_model(model, args.out_model)
    if args.report:
        atomic_write(args.report, report.to_csv().encode())
    if report.records:
        print(f"stop: {report.stop_reason}, best total {report.best_total:.6g} at iteration {report.best_iter}")
    else:
        print("no iterations run; saving the initialized model")
    print(f"wrote {args.out_model}")
    return EXIT_OK


def cmd_infer(args):
    model = fuse.load_model(args.model)
    cube = fuse.infer(model, (args.height, args.width, args.bands))
    write_cube(cube, args.out)
    print(f"wrote {args.out}: {args.height}x{args.width}x{args.bands}")
    return EXIT_OK


def cmd_eval(args):
    ref = read_cube(args.ref)
    if args.pred:
        pred = read_cube(args.pred)
    else:
        pred = metrics.bicubic_resample(read_cube(args.bicubic_from), ref.dims)
    if pred.dims != ref.dims:
        raise UsageError(f"dimension mismatch: pred {pred.dims} vs ref {ref.dims}")
    report = metrics.evaluate(pred, ref, args.ratio, 1.0 if args.peak == "one" else None)
    row = report.to_csv_row()
    if args.out_csv:
        atomic_write(args.out_csv, (row + "\n").encode())
    print(f"MPSNR {report.mpsnr:.4f} dB  MSSIM {report.mssim:.4f}  SAM {report.sam:.4f} deg  "
          f"ERGAS {report.ergas:.4f}  (ratio {args.ratio:g})")
    print(row)
    return EXIT_OK


def band_to_pgm(plane: np.ndarray):
    lo, hi = float(plane.min()), float(plane.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.round((plane - lo) * scale).astype(np.uint8)
    header = f"P5\n{plane.shape[1]} {plane.shape[0]}\n255\n".encode()
    return header + img.tobytes(), lo, hi


def cmd_export(args):
    cube = read_cube(args.cube)
    if args.band is not None:
        if not args.out_pgm:
            raise UsageError("--band needs --out-pgm")
        if not 0 <= args.band < cube.bands:
            raise UsageError(f"band {args.band} out of range [0, {cube.bands})")
        payload, lo, hi = band_to_pgm(cube.data[args.band])
        atomic_write(args.out_pgm, payload)
        print(f"wrote {args.out_pgm}: band {args.band}, scaled from [{lo!r}, {hi!r}] to [0, 255]")
    else:
        if not args.out_csv:
            raise UsageError("--pixel needs --out-csv")
        r, c = args.pixel
        if not (0 <= r < cube.height and 0 <= c < cube.width):
            raise UsageError(f"pixel ({r}, {c}) outside {cube.height}x{cube.width}")
        lines = ["band_index,value"] + [f"{i},{float(v)!r}" for i, v in enumerate(cube.data[:, r, c])]
        atomic_write(args.out_csv, ("\n".join(lines) + "\n").encode())
        print(f"wrote {args.out_csv}: spectrum of pixel ({r}, {c}), {cube.bands} bands")
    return EXIT_OK


def cmd_verify(args):
    checks = verify.run_suite(args.suite, args.seed)
    for chk in checks:
        print(chk.line())
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"{args.suite}: {len(failed)} of {len(checks)} checks failed: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"{args.suite}: all {len(checks)} checks passed")
    return EXIT_OK


# parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clorf", description="Continuous low-rank factorization for HSI-MSI fusion.")
    p.add_argument("--threads", type=_positive_int, help="cap BLAS worker threads")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for reproducible reductions")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-gt", help="synthesize a low-rank ground-truth cube")
    s.add_argument("--height", type=_positive_int, required=True)
    s.add_argument("--width", type=_positive_int, required=True)
    s.add_argument("--bands", type=_positive_int, required=True)
    s.add_argument("--rank", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_gt)

    s = sub.add_parser("simulate", help="degrade a GT cube into LR-HSI and HR-MSI observations")
    s.add_argument("--gt", required=True)
    s.add_argument("--ratio", type=_positive_int, default=4)
    s.add_argument("--offset", type=_nonneg_int, default=None, help="decimation phase (default ratio // 2)")
    s.add_argument("--psf-size", type=_positive_int, default=5)
    s.add_argument("--psf-sigma", type=float, default=1.0)
    s.add_argument("--msi-bands", type=_positive_int, default=4)
    s.add_argument("--snr-hsi", type=_snr, default=30.0)
    s.add_argument("--snr-msi", type=_snr, default=30.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-hsi", required=True)
    s.add_argument("--out-msi", required=True)
    s.add_argument("--out-srf", help="SRF CSV path (default: <out-msi>.srf.csv)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fuse", help="train a CLoRF model on a pair of observations")
    s.add_argument("--hsi", required=True)
    s.add_argument("--msi", required=True)
    s.add_argument("--srf", required=True)
    s.add_argument("--ratio", type=_positive_int, default=4)
    s.add_argument("--offset", type=_nonneg_int, default=None)
    s.add_argument("--psf-size", type=_positive_int, default=5)
    s.add_argument("--psf-sigma", type=float, default=1.0)
    s.add_argument("--rank", type=_positive_int, default=9)
    s.add_argument("--lambda", dest="lam", type=float, default=1.25)
    s.add_argument("--eta", type=float, default=0.0025)
    s.add_argument("--lr", type=float, default=None, help="learning rate (default from preset)")
    s.add_argument("--iters", type=_nonneg_int, default=None, help="max iterations (default from preset)")
    s.add_argument("--patience", type=_positive_int, default=10)
    s.add_argument("--min-rel-improve", type=float, default=1e-4)
    s.add_argument("--log-every", type=_positive_int, default=200)
    s.add_argument("--activation", choices=("sine", "relu", "relu_pe"), default="sine")
    s.add_argument("--omega0", type=float, default=30.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--preset", choices=tuple(fuse.PRESETS), default="paper")
    s.add_argument("--out-model", required=True)
    s.add_argument("--report", help="training log CSV")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("infer", help="evaluate a trained model at any grid size")
    s.add_argument("--model", required=True)
    s.add_argument("--height", type=_positive_int, required=True)
    s.add_argument("--width", type=_positive_int, required=True)
    s.add_argument("--bands", type=_positive_int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="quality metrics of a prediction against a reference")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred")
    src.add_argument("--bicubic-from", help="score the bicubic upsampling of this cube instead")
    s.add_argument("--ref", required=True)
    s.add_argument("--ratio", type=float, default=4.0, help="ERGAS resolution ratio")
    s.add_argument("--peak", choices=("band", "one"), default="band", help="PSNR/SSIM peak convention")
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export", help="dump a band as PGM or a pixel spectrum as CSV")
    s.add_argument("--cube", required=True)
    what = s.add_mutually_exclusive_group(required=True)
    what.add_argument("--band", type=int)
    what.add_argument("--pixel", type=int, nargs=2, metavar=("ROW", "COL"))
    s.add_argument("--out-pgm")
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("verify", help="run a built-in verification suite")
    s.add_argument("--suite", choices=verify.SUITES, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)
    return p


def _thread_limit(args):
    n = 1 if args.deterministic else args.threads
    if n is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl not installed; --threads/--deterministic ignored")
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args):
            return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
