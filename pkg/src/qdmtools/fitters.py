"""Two-stage inversion of ODMR spectra into magnetic fields.

Stage one fits each pixel's spectrum with the mode's Lorentzian multiplet
model. Stage two turns resonance frequencies into fields: a closed-form
difference for single-axis modes (PMM, CPMM) and a seven-parameter
Hamiltonian fit (field vector plus four axial ZFS values) for VMM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qdmtools import _kernels
from qdmtools.constants import CONSTANTS, F_ZFS, GAMMA
from qdmtools.errors import FitError
from qdmtools.lm import BatchResult, JacobianMode, LmOptions, lm_minimize_batch
from qdmtools.nv import NV_AXES, resonance_frequencies
from qdmtools.spectra import Mode, PolarizationDrive, SpectrumParams, as_mode, polarization_weights

DEFAULT_LINEWIDTH = 0.5  # MHz
DEFAULT_STRAIN_SCALE = 0.5e-3  # GHz


@dataclass
class PixelFitResult:
    params: SpectrumParams
    residual_rms: float
    iterations: int
    converged: bool


@dataclass
class VectorFieldFit:
    b: np.ndarray  # tesla
    zfs: np.ndarray  # GHz
    residual_rms: float = 0.0  # GHz
    converged: bool = True
    low_bias_warning: bool = False


# ---------------------------------------------------------------------------
# initial guesses


def _box_smooth(y, width):
    if width <= 1:
        return y.astype(float)
    kernel = np.ones(width)
    num = np.convolve(y, kernel, mode="same")
    den = np.convolve(np.ones_like(y, dtype=float), kernel, mode="same")
    return num / den


def find_dips(spectrum, freqs, smooth_mhz: float, max_count: int):
    """Centers (GHz) and depths of the deepest separated dips of a box-smoothed spectrum.

    Returns (centers, depths, baseline), centers ascending. Dips shallower than
    five times the smoothed noise level are ignored.
    """
    y = np.asarray(spectrum, dtype=float)
    f = np.asarray(freqs, dtype=float)
    step = float(np.median(np.diff(f))) * 1e3
    width = max(1, int(round(smooth_mhz / step)))
    s = _box_smooth(y, width)
    baseline = float(np.percentile(y, 75))
    sigma = 1.4826 * float(np.median(np.abs(np.diff(y) - np.median(np.diff(y))))) / np.sqrt(2.0)
    threshold = max(5.0 * sigma / np.sqrt(width), 1e-9 * abs(baseline), np.finfo(float).tiny)

    interior = np.arange(1, len(s) - 1)
    is_min = (s[interior] < s[interior - 1]) & (s[interior] <= s[interior + 1])
    cand = interior[is_min]
    depth = baseline - s[cand]
    keep = depth > threshold
    cand, depth = cand[keep], depth[keep]
    order = np.argsort(-depth, kind="stable")
    chosen: list[int] = []
    for i in cand[order]:
        if all(abs(i - j) >= width for j in chosen):
            chosen.append(int(i))
        if len(chosen) == max_count:
            break
    chosen.sort()
    centers = []
    for i in chosen:
        # parabolic refinement on the smoothed curve
        a, b, c = s[i - 1], s[i], s[i + 1]
        den = a - 2 * b + c
        shift = 0.5 * (a - c) / den if den > 0 else 0.0
        shift = float(np.clip(shift, -0.5, 0.5))
        centers.append(f[i] + shift * (f[i + 1] - f[i - 1]) / 2.0)
    depths = np.array([baseline - s[i] for i in chosen])
    return np.array(centers), depths, baseline


def initial_guess(spectrum, freqs, mode, hyperfine: float | None = None,
                  linewidth: float = DEFAULT_LINEWIDTH) -> SpectrumParams:
    """Starting parameters for a pixel fit, from dips in a box-smoothed spectrum.

    The smoothing window spans the hyperfine multiplet (2 d_hf for 14N
    triplets, d_hf for 15N doublets) so each multiplet shows as one dip.
    CPMM groups are allowed to be unresolved: a single dip is split into two
    groups straddling it.
    """
    mode = as_mode(mode)
    y = np.asarray(spectrum, dtype=float)
    f = np.asarray(freqs, dtype=float)
    if y.shape != f.shape or y.ndim != 1:
        raise ValueError("spectrum and freqs must be 1-D arrays of equal length")
    if y.size < 4 * mode.n_params:
        raise ValueError(f"{mode.value} fits need Q >= {4 * mode.n_params} points, got {y.size}")
    hf = mode.default_hyperfine if hyperfine is None else hyperfine
    span = 2.0 * hf if mode is not Mode.CPMM else hf
    need = mode.n_groups
    centers, depths, baseline = find_dips(y, f, span, need)
    n_found = len(centers)
    if mode is Mode.CPMM and n_found == 1:
        delta = linewidth / 4.0 / 1e3
        centers = np.array([centers[0] - delta, centers[0] + delta])
        depths = np.array([depths[0], depths[0]]) / 2.0
    elif n_found < need:
        raise FitError(
            f"found {n_found} resonance dips, {mode.value} needs {need}", found=n_found, required=need
        )
    offs = np.asarray(mode.offset_units) * hf
    per_line = 1.0 / np.sum(1.0 / (offs**2 + linewidth**2))
    raw_depth = np.array([baseline - np.interp(c, f, y) for c in centers])
    raw_depth = np.where(raw_depth > 0, raw_depth, depths)
    if mode is Mode.CPMM and n_found == 1:
        raw_depth = raw_depth / 2.0
    amps = np.repeat(raw_depth * per_line, len(offs))
    return SpectrumParams(
        mode, amps, centers, np.full(need, linewidth), baseline, hf
    )


# ---------------------------------------------------------------------------
# spectral fits


def _canonical(x, mode: Mode):
    """Absolute linewidths and groups sorted by center frequency."""
    na, ng = mode.n_amplitudes, mode.n_groups
    n_off = na // ng
    x = x.copy()
    x[:, na + ng : na + 2 * ng] = np.abs(x[:, na + ng : na + 2 * ng])
    order = np.argsort(x[:, na : na + ng], axis=1, kind="stable")
    rows = np.arange(len(x))[:, None]
    amps = x[:, :na].reshape(len(x), ng, n_off)[rows, order].reshape(len(x), na)
    x[:, :na] = amps
    x[:, na : na + ng] = x[:, na : na + ng][rows, order]
    x[:, na + ng : na + 2 * ng] = x[:, na + ng : na + 2 * ng][rows, order]
    return x


def fit_spectra(data, freqs, mode, init, opts: LmOptions | None = None,
                hyperfine: float | None = None) -> BatchResult:
    """Fit many spectra at once. ``data`` (P, Q), ``init`` packed parameters (P, n).

    The model is the dip form C - sum(A L). Returned parameters are packed
    [A..., f..., G..., C] with groups sorted by frequency.
    """
    mode = as_mode(mode)
    data = np.ascontiguousarray(data, dtype=float)
    freqs = np.ascontiguousarray(freqs, dtype=float)
    hf = mode.default_hyperfine if hyperfine is None else hyperfine
    offs = np.ascontiguousarray(np.asarray(mode.offset_units) * hf)
    ng = mode.n_groups
    opts = opts or LmOptions()

    def fun(x, idx):
        x = np.ascontiguousarray(x)
        model = x[:, -1:] - _kernels.grouped_sum(freqs, x, ng, offs)
        return model - data[idx]

    def jac(x, idx):
        x = np.ascontiguousarray(x)
        out = np.empty((len(x), len(freqs), x.shape[1]))
        _kernels.dip_model_jac(freqs, x, ng, offs, out)
        return out

    analytic = opts.jacobian_mode is JacobianMode.ANALYTIC
    res = lm_minimize_batch(fun, np.asarray(init, dtype=float), opts, jac if analytic else None)
    res.x = _canonical(res.x, mode)
    return res


def fit_pixel_spectrum(spectrum, freqs, mode, opts: LmOptions | None = None,
                       init: SpectrumParams | None = None,
                       hyperfine: float | None = None) -> PixelFitResult:
    """Fit one pixel's spectrum, starting from ``init`` or from :func:`initial_guess`.

    Raises :class:`FitError` when no usable starting point can be found.
    """
    mode = as_mode(mode)
    if init is None:
        init = initial_guess(spectrum, freqs, mode, hyperfine)
    hf = init.hyperfine if hyperfine is None else hyperfine
    y = np.asarray(spectrum, dtype=float)[None, :]
    res = fit_spectra(y, freqs, mode, init.to_vector()[None, :], opts, hf)
    params = SpectrumParams.from_vector(mode, res.x[0], hf)
    rms = float(np.sqrt(np.mean(res.residuals[0] ** 2)))
    return PixelFitResult(params, rms, int(res.iterations[0]), bool(res.converged[0]))


def dominant_group_frequency(x, mode=Mode.CPMM):
    """Center of the group with the larger summed amplitude, for packed rows (P, n)."""
    mode = as_mode(mode)
    x = np.atleast_2d(x)
    na, ng = mode.n_amplitudes, mode.n_groups
    amps = x[:, :na].reshape(len(x), ng, -1).sum(axis=2)
    pick = np.argmax(amps, axis=1)
    return x[np.arange(len(x)), na + pick]


# ---------------------------------------------------------------------------
# field extraction


def projected_field_from_pair(f1, f2, bias_sign: float = 1.0):
    """Field along the NV axis (tesla) from the (dm_s=-1, dm_s=+1) resonance pair (GHz)."""
    return bias_sign * (np.asarray(f2) - np.asarray(f1)) / (2.0 * GAMMA)


def cpmm_field_from_shift(f_sigma_plus, f_sigma_minus):
    """Bz (tesla) from the fitted line centers under sigma+ and sigma- drive (GHz)."""
    return np.sqrt(3.0) * (np.asarray(f_sigma_plus) - np.asarray(f_sigma_minus)) / (2.0 * GAMMA)


def cpmm_selectivity(drive: PolarizationDrive) -> float:
    """Orientation-averaged w+ - w- of a drive: how far the line centroid follows the dm_s = +1 line."""
    w = polarization_weights(drive)
    return float(np.mean(w[:, 0] - w[:, 1]))


def cpmm_group_centroid(x):
    """Area-weighted mean of the two CPMM group centers (GHz) for packed rows (P, 9)."""
    x = np.atleast_2d(x)
    amps = x[:, :4].reshape(len(x), 2, 2).sum(axis=2)
    widths = np.abs(x[:, 6:8])
    area = amps / np.where(widths > 0, widths, np.nan)
    return np.sum(area * x[:, 4:6], axis=1) / np.sum(area, axis=1)


def cpmm_field_from_fits(x_plus, x_minus, drive_plus: PolarizationDrive | None = None,
                         drive_minus: PolarizationDrive | None = None):
    """Bz (tesla) from packed CPMM fits of the sigma+ and sigma- spectra of the same pixels.

    Where both fits resolve their two groups (separation >= mean HWHM) the
    dominant-group centers are used directly. Otherwise the two groups are
    too close to separate reliably, and the area-weighted centroid shift is
    divided by the drives' selectivity instead.
    """
    drive_plus = drive_plus or PolarizationDrive("sigma_plus")
    drive_minus = drive_minus or drive_plus.flipped()
    a, b = np.atleast_2d(x_plus), np.atleast_2d(x_minus)

    def resolved(x):
        return np.abs(x[:, 4] - x[:, 5]) * 1e3 >= 0.5 * np.abs(x[:, 6] + x[:, 7])

    direct = cpmm_field_from_shift(dominant_group_frequency(a), dominant_group_frequency(b))
    ds = cpmm_selectivity(drive_plus) - cpmm_selectivity(drive_minus)
    with np.errstate(invalid="ignore", divide="ignore"):
        delta = (cpmm_group_centroid(a) - cpmm_group_centroid(b)) / ds
    blended = np.sqrt(3.0) * delta / GAMMA
    return np.where(resolved(a) & resolved(b), direct, blended)


def assign_resonances(fitted, predicted):
    """Map frequency-sorted fitted centers (P, 8) onto the k/dm_s order of ``predicted`` (8,).

    Each predicted line takes its nearest fitted center. Rows where this is
    not a one-to-one matching come back as NaN, with ``ok`` False.
    """
    fitted = np.atleast_2d(np.asarray(fitted, dtype=float))
    predicted = np.asarray(predicted, dtype=float)
    nearest = np.argmin(np.abs(fitted[:, None, :] - predicted[None, :, None]), axis=2)
    ok = np.all(np.sort(nearest, axis=1) == np.arange(fitted.shape[1]), axis=1)
    out = np.take_along_axis(fitted, nearest, axis=1)
    out[~ok] = np.nan
    return out, ok


_B_SCALE = 1e-3  # fit the field in mT for a well-scaled parameter vector


def vector_field_fit_batch(res_freqs, b0, zfs0=F_ZFS, opts: LmOptions | None = None,
                           strain_scale: float = DEFAULT_STRAIN_SCALE):
    """Seven-parameter Hamiltonian fit for many pixels.

    ``res_freqs`` (P, 8) in nv-core order; ``b0`` (P, 3) or (3,) tesla start;
    ``zfs0`` scalar or (P, 4) GHz start. Returns (b (P, 3), zfs (P, 4),
    residual_rms (P,), converged (P,), low_bias (P,)).
    """
    f = np.atleast_2d(np.asarray(res_freqs, dtype=float))
    n = len(f)
    b0 = np.broadcast_to(np.asarray(b0, dtype=float), (n, 3))
    z0 = np.broadcast_to(np.asarray(zfs0, dtype=float), (n, 4))
    x0 = np.concatenate([b0 / _B_SCALE, z0], axis=1)
    if opts is None:
        opts = LmOptions(jacobian_mode=JacobianMode.FORWARD_DIFFERENCE)

    def fun(x, idx):
        return resonance_frequencies(x[:, :3] * _B_SCALE, x[:, 3:]) - f[idx]

    res = lm_minimize_batch(fun, x0, opts, None)
    b = res.x[:, :3] * _B_SCALE
    zfs = res.x[:, 3:]
    rms = np.sqrt(np.mean(res.residuals**2, axis=1))
    b_par = np.abs(b @ NV_AXES.T)
    low = np.any(b_par < 5.0 * strain_scale / GAMMA, axis=1)
    return b, zfs, rms, res.converged, low


def vector_field_fit(res_freqs, init: VectorFieldFit | None = None, opts: LmOptions | None = None,
                     bias=(0.0, 0.0, 0.0), strain_scale: float = DEFAULT_STRAIN_SCALE) -> VectorFieldFit:
    """Fit (Bx, By, Bz, D1..D4) to eight resonance frequencies in nv-core order.

    Without ``init`` the start is B = ``bias`` and D = 2.87 GHz for all k.
    """
    f = np.asarray(res_freqs, dtype=float)
    if f.shape != (8,) or not np.all(np.isfinite(f)):
        raise ValueError("need 8 finite resonance frequencies")
    if init is None:
        init = VectorFieldFit(np.asarray(bias, dtype=float), np.full(4, F_ZFS))
    b, zfs, rms, conv, low = vector_field_fit_batch(f[None, :], init.b, init.zfs[None, :], opts, strain_scale)
    return VectorFieldFit(b[0], zfs[0], float(rms[0]), bool(conv[0]), bool(low[0]))


# ---------------------------------------------------------------------------
# temperature


def temperature_shift_per_orientation(zfs_now, zfs_ref) -> np.ndarray:
    """Per-orientation temperature change (K) from ZFS shifts."""
    dz_khz = (np.asarray(zfs_now, dtype=float) - np.asarray(zfs_ref, dtype=float)) * 1e6
    return dz_khz / CONSTANTS.temp_coeff


def estimate_temperature_shift(zfs_now, zfs_ref) -> float:
    """Temperature change (K) from the mean ZFS shift over the four orientations."""
    dz_khz = np.mean((np.asarray(zfs_now, dtype=float) - np.asarray(zfs_ref, dtype=float)) * 1e6, axis=-1)
    return dz_khz / CONSTANTS.temp_coeff
