"""Command-line entry point: ``qdm <command> ...``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 I/O failure,
4 corrupt container file, 5 too many pixels failed to fit.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from pathlib import Path

import numpy as np

from qdmtools import calibration, forward, io
from qdmtools.config import load_config
from qdmtools.errors import ConfigError, FilterError, FormatError
from qdmtools.lm import LmOptions
from qdmtools.mapping import FilterSpec, bias_reversal_decompose, bin_stack, fit_stack
from qdmtools.spectra import Mode

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_FORMAT, EXIT_NONCONVERGED = 0, 2, 3, 4, 5


class CliFailure(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _partner_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".flipped" + p.suffix)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    truth = forward.sample_field_map(cfg.sources, cfg.geometry, cfg.bias_field)
    stack = forward.synthesize_stack(
        truth, cfg.mode, cfg.lineshape, cfg.photons_per_pixel, cfg.freqs, cfg.bias_field,
        cfg.polarization, cfg.orientation, cfg.seed,
    )
    bad = stack.metadata["out_of_window"]
    if bad:
        raise CliFailure(f"{bad} pixel(s) have resonances outside the frequency window", EXIT_CONFIG)
    io.write_stack(args.out, stack)
    written = [str(args.out)]
    if cfg.mode is Mode.CPMM:
        seed2 = None if cfg.seed is None else cfg.seed + 1
        other = forward.synthesize_stack(
            truth, cfg.mode, cfg.lineshape, cfg.photons_per_pixel, cfg.freqs, cfg.bias_field,
            cfg.polarization.flipped(), cfg.orientation, seed2,
        )
        partner = args.partner_out or _partner_path(args.out)
        io.write_stack(partner, other)
        written.append(str(partner))
    if args.truth:
        io.write_map(args.truth, truth)
        written.append(str(args.truth))
    print(f"wrote {', '.join(written)} ({stack.m}x{stack.n} px, q={stack.q}, mode {stack.mode.value})")
    return EXIT_OK


def cmd_fit(args) -> int:
    stack = io.read_stack(args.stack)
    partner = None
    if stack.mode is Mode.CPMM:
        ppath = args.partner or _partner_path(args.stack)
        partner = io.read_stack(ppath)
    if args.bin > 1:
        stack = bin_stack(stack, args.bin)
        partner = None if partner is None else bin_stack(partner, args.bin)
    opts = LmOptions(max_iterations=args.max_iterations)
    t0 = time.perf_counter()
    fmap = fit_stack(stack, opts, partner=partner, threads=args.threads)
    wall = time.perf_counter() - t0
    io.write_map(args.out, fmap)
    total = fmap.m * fmap.n
    masked = int(total - fmap.mask.sum())
    conv = fmap.diagnostics.get("converged")
    unconverged = 0 if conv is None else int(np.sum(~np.asarray(conv)))
    print(f"pixels fit: {total}  masked: {masked}  unconverged: {unconverged}  wall time: {wall:.2f} s")
    if masked > args.max_masked_fraction * total:
        raise CliFailure(
            f"{masked}/{total} pixels masked, above the {args.max_masked_fraction:.0%} threshold", EXIT_NONCONVERGED
        )
    return EXIT_OK


def cmd_filter(args) -> int:
    fmap = io.read_map(args.map)
    spec = FilterSpec(
        args.lowpass_fwhm_um * 1e-6 if args.lowpass_fwhm_um > 0 else None,
        args.highpass_cutoff_um * 1e-6 if args.highpass_cutoff_um > 0 else None,
        args.order,
    )
    io.write_map(args.out, spec.apply(fmap))
    print(f"wrote {args.out}")
    return EXIT_OK


def _parse_region(text: str | None, shape):
    if text is None:
        return None
    try:
        rows, cols = text.split(",")
        r0, r1 = (int(v) for v in rows.split(":"))
        c0, c1 = (int(v) for v in cols.split(":"))
    except ValueError:
        raise ConfigError(f"region must look like i0:i1,j0:j1, got {text!r}") from None
    region = np.zeros(shape, bool)
    region[r0:r1, c0:c1] = True
    return region


def cmd_decompose(args) -> int:
    plus = io.read_map(args.map_plus)
    minus = io.read_map(args.map_minus)
    region = _parse_region(args.region, plus.mask.shape)
    dec = bias_reversal_decompose(plus, minus, region)
    io.write_map(args.remanent, dec.remanent)
    io.write_map(args.induced, dec.induced)
    report = {"remanent": str(args.remanent), "induced": str(args.induced)}
    if dec.residual_bias is not None:
        report["residual_bias_T"] = dec.residual_bias.tolist()
    print(json.dumps(report))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    geom = calibration.SolenoidGeometry(
        args.radius_mm * 1e-3, args.h0_mm * 1e-3, args.dh_mm * 1e-3, args.loops,
        args.radius_sigma_mm * 1e-3, args.h0_sigma_mm * 1e-3, args.dh_sigma_mm * 1e-3,
    )
    axial, axial_sigma = calibration.solenoid_field(geom, 1.0)
    proj = args.projection
    expected = calibration.expected_slope(geom, proj, args.current_rel_sigma)
    report = {
        "axial_slope_nT_per_mA": axial * 1e6,
        "axial_sigma_nT_per_mA": axial_sigma * 1e6,
        "expected_slope_nT_per_mA": expected[0] * 1e6,
        "expected_sigma_nT_per_mA": expected[1] * 1e6,
    }
    if args.csv:
        curve = calibration.fit_calibration(calibration.read_calibration_csv(args.csv), expected)
        report.update(
            fitted_slope_nT_per_mA=curve.fit_slope * 1e6,
            fitted_sigma_nT_per_mA=curve.fit_slope_sigma * 1e6,
            fitted_intercept_uT=curve.fit_intercept * 1e6,
            normalized_slope=curve.normalized_slope,
            normalized_sigma=curve.normalized_sigma,
            within_band=curve.within_band(),
        )
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_resolution(args) -> int:
    params = forward.ReducedProfileParams(args.tau, args.beta_s)
    rho = np.linspace(0.0, args.rho_max, args.points)
    phi = forward.peak_shift_profile(rho, params)
    if args.out:
        forward.write_profile_csv(args.out, rho, phi)
    else:
        print("rho,phi_pk")
        for r, p in zip(rho, phi):
            print(f"{float(r)!r},{float(p)!r}")
    return EXIT_OK


def export_pgm(values, valid, lo, hi) -> bytes:
    """8-bit binary PGM; values are clipped to [lo, hi] (saturating), masked pixels are 0."""
    m, n = values.shape
    if hi > lo:
        scaled = (np.clip(values, lo, hi) - lo) / (hi - lo) * 254.0 + 1.0
    else:
        scaled = np.full(values.shape, 128.0)
    img = np.where(valid, np.rint(scaled), 0).astype(np.uint8)
    return f"P5\n{n} {m}\n255\n".encode("ascii") + img.tobytes()


def cmd_export(args) -> int:
    fmap = io.read_map(args.map)
    comp = fmap.component(args.component)
    valid = fmap.mask
    if args.format == "csv":
        lines = ["i,j,value_T,valid"]
        for i in range(fmap.m):
            for j in range(fmap.n):
                lines.append(f"{i},{j},{float(comp[i, j])!r},{int(valid[i, j])}")
        Path(args.out).write_text("\n".join(lines) + "\n")
    else:
        if args.range:
            lo, hi = args.range
        elif np.any(valid):
            lo, hi = float(np.min(comp[valid])), float(np.max(comp[valid]))
        else:
            lo = hi = 0.0
        Path(args.out).write_bytes(export_pgm(np.where(valid, comp, lo), valid, lo, hi))
    print(f"wrote {args.out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Also treats scientific notation such as -2e-6 as a number, not an option."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._negative_number_matcher = re.compile(r"^-(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qdm", description="Simulate and invert quantum diamond microscope data.")
    sub = p.add_subparsers(dest="command", required=True)
    D = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("simulate", help="synthesize a stack from a JSON config", formatter_class=D)
    s.add_argument("--config", required=True, help="JSON run configuration")
    s.add_argument("--out", required=True, help="output QDMS stack")
    s.add_argument("--truth", help="also write the exact forward field map (QDMF)")
    s.add_argument("--partner-out", help="CPMM: path of the flipped-polarization stack "
                   "(default: <out>.flipped.qdms)")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a stack into a field map", formatter_class=D)
    f.add_argument("stack")
    f.add_argument("--out", required=True, help="output QDMF map")
    f.add_argument("--partner", help="CPMM: stack recorded with the opposite polarization "
                   "(default: <stack>.flipped.qdms)")
    f.add_argument("--threads", type=int, default=None, help="worker threads (default: QDM_THREADS or all cores)")
    f.add_argument("--bin", type=int, default=1, help="sum-bin pixels by this factor before fitting")
    f.add_argument("--max-iterations", type=int, default=200, help="LM iteration cap per pixel")
    f.add_argument("--max-masked-fraction", type=float, default=0.5,
                   help="exit with code 5 when more pixels than this are masked")
    f.set_defaults(func=cmd_fit)

    fl = sub.add_parser("filter", help="Gaussian low-pass and Butterworth high-pass", formatter_class=D)
    fl.add_argument("map")
    fl.add_argument("--out", required=True)
    fl.add_argument("--lowpass-fwhm-um", type=float, default=5.0, help="Gaussian FWHM in um (0 disables)")
    fl.add_argument("--highpass-cutoff-um", type=float, default=200.0,
                    help="Butterworth -3 dB wavelength in um (0 disables)")
    fl.add_argument("--order", type=int, default=3, help="Butterworth order")
    fl.set_defaults(func=cmd_filter)

    d = sub.add_parser("decompose", help="remanent/induced split of bias-reversed maps", formatter_class=D)
    d.add_argument("map_plus")
    d.add_argument("map_minus")
    d.add_argument("--remanent", required=True)
    d.add_argument("--induced", required=True)
    d.add_argument("--region", help="source-free region i0:i1,j0:j1 for the residual-bias estimate")
    d.set_defaults(func=cmd_decompose)

    c = sub.add_parser("calibrate", help="coil calibration: expected vs fitted slope", formatter_class=D)
    c.add_argument("--csv", help="measurements with columns current_mA, measured_field_uT")
    c.add_argument("--radius-mm", type=float, default=15.5, help="loop radius a")
    c.add_argument("--radius-sigma-mm", type=float, default=0.05, help="1-sigma of a")
    c.add_argument("--h0-mm", type=float, default=20.9, help="distance of the nearest loop")
    c.add_argument("--h0-sigma-mm", type=float, default=0.1, help="1-sigma of h0")
    c.add_argument("--dh-mm", type=float, default=0.48, help="loop spacing")
    c.add_argument("--dh-sigma-mm", type=float, default=0.02, help="1-sigma of the spacing")
    c.add_argument("--loops", type=int, default=10, help="number of turns")
    c.add_argument("--projection", type=float, default=float(1.0 / np.sqrt(3.0)),
                   help="factor from axial field to measured component (1/sqrt(3): one NV axis)")
    c.add_argument("--current-rel-sigma", type=float, default=calibration.CURRENT_REL_SIGMA,
                   help="relative 1-sigma of the current reading")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("resolution", help="peak-shift profile phi_pk(rho) as CSV", formatter_class=D)
    r.add_argument("--tau", type=float, required=True, help="NV layer thickness / standoff")
    r.add_argument("--beta-s", type=float, required=True, help="reduced source field")
    r.add_argument("--rho-max", type=float, default=3.0, help="largest reduced radius")
    r.add_argument("--points", type=int, default=61, help="radii sampled from 0 to rho-max")
    r.add_argument("--out", help="CSV path (default: stdout)")
    r.set_defaults(func=cmd_resolution)

    e = sub.add_parser("export", help="export one map component as CSV or PGM", formatter_class=D)
    e.add_argument("map")
    e.add_argument("--out", required=True)
    e.add_argument("--format", choices=("csv", "pgm"), default="csv")
    e.add_argument("--component", choices=("x", "y", "z"), default="z")
    e.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"),
                   help="PGM grey-scale range in tesla (default: data min/max)")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FormatError as exc:
        print(f"error: corrupt file ({exc.invariant}): {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, FilterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
