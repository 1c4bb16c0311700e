"""Stack and field-map containers, stack fitting, bias reversal and noise statistics."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import uniform_filter1d

from qdmtools import fitters
from qdmtools.constants import F_ZFS
from qdmtools.errors import FitError
from qdmtools.lm import LmOptions
from qdmtools.nv import NV_AXES, _check_index, resonance_frequencies
from qdmtools.spectra import Handedness, Mode, PolarizationDrive, SpectrumParams, as_mode

MASK_FACTOR = 5.0
MASK_FLOOR = 1e-6  # residual floor relative to the baseline level


@dataclass(frozen=True)
class OdmrStack:
    """Fluorescence image stack: ``data[q, i, j]`` at microwave frequency ``freqs[q]`` (GHz)."""

    freqs: np.ndarray
    data: np.ndarray
    pixel_pitch: float
    mode: Mode
    bias_field: np.ndarray = field(default_factory=lambda: np.zeros(3))
    polarization: PolarizationDrive | None = None
    averages: int = 1
    orientation: int = 1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "mode", as_mode(self.mode))
        freqs = np.array(self.freqs, dtype=float)
        data = np.asarray(self.data)
        if data.dtype.kind != "f":
            data = data.astype(float)
        bias = np.array(self.bias_field, dtype=float)
        if freqs.ndim != 1 or freqs.size < 2 or np.any(np.diff(freqs) <= 0):
            raise ValueError("freqs must be strictly increasing")
        if data.ndim != 3 or data.shape[0] != freqs.size:
            raise ValueError(f"data must have shape (q, m, n) with q = {freqs.size}, got {data.shape}")
        if not (np.isfinite(self.pixel_pitch) and self.pixel_pitch > 0):
            raise ValueError("pixel_pitch must be > 0")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValueError("fluorescence values must be finite and >= 0")
        if bias.shape != (3,):
            raise ValueError("bias_field must be a 3-vector")
        _check_index(self.orientation)
        if self.mode is Mode.CPMM and self.polarization is None:
            object.__setattr__(self, "polarization", PolarizationDrive(Handedness.SIGMA_PLUS))
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "bias_field", bias)
        object.__setattr__(self, "pixel_pitch", float(self.pixel_pitch))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def q(self) -> int:
        return self.data.shape[0]

    @property
    def m(self) -> int:
        return self.data.shape[1]

    @property
    def n(self) -> int:
        return self.data.shape[2]

    @property
    def hyperfine(self) -> float:
        return float(self.metadata.get("hyperfine_mhz", self.mode.default_hyperfine))


@dataclass(frozen=True)
class FieldMap:
    """Per-pixel field estimates, ``field[c, i, j]`` in tesla.

    One component for PMM/CPMM maps, three (Bx, By, Bz) for VMM. Masked
    pixels (``mask`` False) hold NaN in ``field`` and ``zfs_maps``.
    """

    field: np.ndarray
    pixel_pitch: float
    mask: np.ndarray | None = None
    residuals: np.ndarray | None = None
    zfs_maps: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.array(self.field, dtype=float)
        if f.ndim == 2:
            f = f[None]
        if f.ndim != 3 or f.shape[0] not in (1, 3):
            raise ValueError(f"field must have shape (1 or 3, m, n), got {f.shape}")
        shape = f.shape[1:]
        mask = np.ones(shape, bool) if self.mask is None else np.array(self.mask, dtype=bool)
        res = np.zeros(shape) if self.residuals is None else np.array(self.residuals, dtype=float)
        if mask.shape != shape or res.shape != shape:
            raise ValueError("mask and residuals must match the map dimensions")
        if not (np.isfinite(self.pixel_pitch) and self.pixel_pitch > 0):
            raise ValueError("pixel_pitch must be > 0")
        mask &= np.all(np.isfinite(f), axis=0)
        f[:, ~mask] = np.nan
        zfs = None
        if self.zfs_maps is not None:
            zfs = np.array(self.zfs_maps, dtype=float)
            if zfs.shape != (4,) + shape:
                raise ValueError("zfs_maps must have shape (4, m, n)")
            zfs[:, ~mask] = np.nan
        object.__setattr__(self, "field", f)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "residuals", res)
        object.__setattr__(self, "zfs_maps", zfs)
        object.__setattr__(self, "pixel_pitch", float(self.pixel_pitch))
        object.__setattr__(self, "diagnostics", dict(self.diagnostics))

    @property
    def components(self) -> int:
        return self.field.shape[0]

    @property
    def m(self) -> int:
        return self.field.shape[1]

    @property
    def n(self) -> int:
        return self.field.shape[2]

    def component(self, which="z") -> np.ndarray:
        """One component as an (m, n) array; scalar maps answer to any name."""
        if self.components == 1:
            return self.field[0]
        idx = {"x": 0, "y": 1, "z": 2}.get(which, which)
        return self.field[int(idx)]

    def with_field(self, new_field, mask=None) -> "FieldMap":
        return replace(self, field=new_field, mask=self.mask if mask is None else mask)


@dataclass(frozen=True)
class FilterSpec:
    lowpass_fwhm: float | None = 5e-6
    highpass_cutoff: float | None = 200e-6
    highpass_order: int = 3

    def __post_init__(self):
        for name in ("lowpass_fwhm", "highpass_cutoff"):
            v = getattr(self, name)
            if v is not None and not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be > 0 when given")
        if int(self.highpass_order) != self.highpass_order or self.highpass_order < 1:
            raise ValueError("highpass_order must be an integer >= 1")

    def apply(self, fmap: FieldMap) -> FieldMap:
        from qdmtools.filters import butterworth_highpass, gaussian_lowpass

        out = fmap
        if self.lowpass_fwhm is not None:
            out = gaussian_lowpass(out, self.lowpass_fwhm)
        if self.highpass_cutoff is not None:
            out = butterworth_highpass(out, self.highpass_cutoff, self.highpass_order)
        return out


# ---------------------------------------------------------------------------
# stack fitting


def default_threads() -> int:
    env = os.environ.get("QDM_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"QDM_THREADS must be an integer, got {env!r}") from None
        if n >= 1:
            return n
    return os.cpu_count() or 1


def has_signal(spectra, freqs, smooth_mhz: float) -> np.ndarray:
    """Cheap per-spectrum test for at least one dip above the noise; spectra (..., Q)."""
    y = np.asarray(spectra, dtype=float)
    step = float(np.median(np.diff(freqs))) * 1e3
    width = max(1, int(round(smooth_mhz / step)))
    s = uniform_filter1d(y, width, axis=-1, mode="nearest")
    baseline = np.percentile(y, 75, axis=-1)
    d = np.diff(y, axis=-1)
    sigma = 1.4826 * np.median(np.abs(d - np.median(d, axis=-1, keepdims=True)), axis=-1) / np.sqrt(2)
    depth = baseline - s.min(axis=-1)
    return depth > np.maximum(5.0 * sigma / np.sqrt(width), 1e-9 * np.abs(baseline))


def _guesses(spectra, freqs, mode, hf):
    n_par = mode.n_params
    x = np.full((len(spectra), n_par), np.nan)
    ok = np.zeros(len(spectra), bool)
    for i, y in enumerate(spectra):
        try:
            x[i] = fitters.initial_guess(y, freqs, mode, hf).to_vector()
            ok[i] = True
        except FitError:
            pass
    return x, ok


def _fit_rows(cube, freqs, mode, hf, opts, signal, warm_start):
    """Column sweep over a block of rows; returns per-pixel packed params and diagnostics."""
    m, n, _ = cube.shape
    n_par = mode.n_params
    x_out = np.full((m, n, n_par), np.nan)
    rms = np.full((m, n), np.nan)
    conv = np.zeros((m, n), bool)
    ok = np.zeros((m, n), bool)
    iters = np.zeros((m, n), int)
    for j in range(n):
        rows = np.flatnonzero(signal[:, j])
        if rows.size == 0:
            continue
        spectra = cube[rows, j]
        init = np.full((rows.size, n_par), np.nan)
        warm = np.zeros(rows.size, bool)
        if warm_start and j > 0:
            warm = conv[rows, j - 1]
            init[warm] = x_out[rows[warm], j - 1]
        cold = ~warm
        has_init = warm.copy()
        if np.any(cold):
            g, gok = _guesses(spectra[cold], freqs, mode, hf)
            init[cold] = g
            has_init[cold] = gok
        sel = np.flatnonzero(has_init)
        if sel.size == 0:
            continue
        res = fitters.fit_spectra(spectra[sel], freqs, mode, init[sel], opts, hf)
        x, cost, cv, it = res.x, res.cost, res.converged, res.iterations

        # warm starts that did not converge get a second chance from scratch
        retry = np.flatnonzero(warm[sel] & ~cv)
        if retry.size:
            g, gok = _guesses(spectra[sel[retry]], freqs, mode, hf)
            retry, g = retry[gok], g[gok]
            if retry.size:
                r2 = fitters.fit_spectra(spectra[sel[retry]], freqs, mode, g, opts, hf)
                better = (r2.converged & ~cv[retry]) | (r2.cost < cost[retry])
                b = retry[better]
                x[b], cost[b], cv[b] = r2.x[better], r2.cost[better], r2.converged[better]
                it[b] += r2.iterations[better]
        q = spectra.shape[1]
        tgt = rows[sel]
        x_out[tgt, j] = x
        rms[tgt, j] = np.sqrt(2.0 * cost / q)
        conv[tgt, j] = cv
        ok[tgt, j] = np.all(np.isfinite(x), axis=1)
        iters[tgt, j] = it
    return x_out, rms, conv, ok, iters


def fit_spectra_map(stack: OdmrStack, opts: LmOptions | None = None, threads: int | None = None,
                    warm_start: bool = True) -> dict:
    """Fit every pixel spectrum of a stack. Rows are split across threads.

    Returns a dict with ``params`` (m, n, n_params), ``rms``, ``converged``,
    ``ok`` and ``iterations`` (all (m, n)). Pixels without a detectable dip
    are not fit and come back with ``ok`` False.
    """
    mode = stack.mode
    hf = stack.hyperfine
    opts = opts or LmOptions()
    cube = np.ascontiguousarray(np.moveaxis(stack.data, 0, -1), dtype=float)
    span = hf if mode is Mode.CPMM else 2.0 * hf
    signal = has_signal(cube, stack.freqs, span)
    threads = default_threads() if threads is None else max(1, int(threads))
    blocks = [b for b in np.array_split(np.arange(stack.m), min(threads, stack.m)) if b.size]

    def work(rows):
        return _fit_rows(cube[rows], stack.freqs, mode, hf, opts, signal[rows], warm_start)

    if len(blocks) == 1:
        parts = [work(blocks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            parts = list(pool.map(work, blocks))
    names = ("params", "rms", "converged", "ok", "iterations")
    out = {k: np.concatenate([p[i] for p in parts], axis=0) for i, k in enumerate(names)}
    out["signal"] = signal
    return out


def _residual_mask(rms, ok, baseline):
    valid = ok & np.isfinite(rms)
    if not np.any(valid):
        return valid
    med = float(np.median(rms[valid]))
    limit = max(MASK_FACTOR * med, MASK_FLOOR * float(np.median(np.abs(baseline[valid]))))
    return valid & (rms <= limit)


def fit_stack(stack: OdmrStack, opts: LmOptions | None = None, partner: OdmrStack | None = None,
              threads: int | None = None, warm_start: bool = True,
              vector_opts: LmOptions | None = None) -> FieldMap:
    """Fit a stack pixel by pixel and turn the resonance frequencies into a field map.

    VMM gives (Bx, By, Bz) plus four ZFS maps; PMM gives the field along the
    stack's NV orientation; CPMM gives Bz and needs ``partner``, the same
    scene recorded with the opposite circular polarization. Per-pixel
    failures end up in the mask; they never abort the map.
    """
    mode = stack.mode
    fits = fit_spectra_map(stack, opts, threads, warm_start)
    p = fits["params"]
    na, ng = mode.n_amplitudes, mode.n_groups
    baseline = p[..., -1]
    diag = {"converged": fits["converged"], "iterations": fits["iterations"]}
    zfs = None

    if mode is Mode.CPMM:
        if partner is None:
            raise ValueError("CPMM maps need the partner stack recorded with the flipped polarization")
        if partner.data.shape != stack.data.shape or not np.array_equal(partner.freqs, stack.freqs):
            raise ValueError("partner stack must have the same frequencies and dimensions")
        if partner.polarization.handedness is not stack.polarization.handedness.flipped() or (
            stack.polarization.handedness is Handedness.LINEAR
        ):
            raise ValueError("CPMM stacks must be recorded with opposite circular polarizations")
        other = fit_spectra_map(partner, opts, threads, warm_start)
        mine = (p.reshape(-1, p.shape[-1]), stack.polarization)
        theirs = (other["params"].reshape(-1, p.shape[-1]), partner.polarization)
        if stack.polarization.handedness is Handedness.SIGMA_MINUS:
            mine, theirs = theirs, mine
        bz = fitters.cpmm_field_from_fits(mine[0], theirs[0], mine[1], theirs[1]).reshape(stack.m, stack.n)
        rms = np.sqrt(0.5 * (fits["rms"] ** 2 + other["rms"] ** 2))
        ok = fits["ok"] & other["ok"]
        fits["ok"] = ok
        diag["converged"] = fits["converged"] & other["converged"]
        field_arr = bz[None]
    elif mode is Mode.PMM:
        f1, f2 = p[..., na], p[..., na + 1]
        u = NV_AXES[stack.orientation - 1]
        s = np.sign(stack.bias_field @ u) or 1.0
        field_arr = fitters.projected_field_from_pair(f1, f2, s)[None]
        rms = fits["rms"]
        ok = fits["ok"]
        diag["zfs_mean"] = 0.5 * (f1 + f2)
    else:
        centers = p[..., na : na + ng].reshape(-1, ng)
        predicted = resonance_frequencies(stack.bias_field, F_ZFS)
        field_arr = np.full((3, stack.m * stack.n), np.nan)
        zfs_flat = np.full((4, stack.m * stack.n), np.nan)
        low = np.zeros(stack.m * stack.n, bool)
        vconv = np.zeros(stack.m * stack.n, bool)
        ok = fits["ok"].ravel().copy()
        assigned, aok = fitters.assign_resonances(centers, predicted)
        ok &= aok
        idx = np.flatnonzero(ok)
        if idx.size:
            b, z, vrms, vc, lw = fitters.vector_field_fit_batch(
                assigned[idx], stack.bias_field, F_ZFS, vector_opts
            )
            field_arr[:, idx] = b.T
            zfs_flat[:, idx] = z.T
            low[idx] = lw
            vconv[idx] = vc
            ok[idx] &= np.all(np.isfinite(b), axis=1)
        shape = (stack.m, stack.n)
        field_arr = field_arr.reshape(3, *shape)
        zfs = zfs_flat.reshape(4, *shape)
        ok = ok.reshape(shape)
        rms = fits["rms"]
        diag["low_bias_warning"] = low.reshape(shape)
        diag["vector_converged"] = vconv.reshape(shape)

    mask = _residual_mask(rms, ok, baseline)
    diag["fit_failed"] = ~ok
    return FieldMap(field_arr, stack.pixel_pitch, mask, np.where(np.isfinite(rms), rms, 0.0), zfs, diag)


def bin_stack(stack: OdmrStack, factor: int) -> OdmrStack:
    """Sum-bin a stack spatially by ``factor`` (2 or 4 typical); trailing rows/cols are dropped."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("binning factor must be >= 1")
    if factor == 1:
        return stack
    q, m, n = stack.data.shape
    mb, nb = m // factor, n // factor
    if mb == 0 or nb == 0:
        raise ValueError("binning factor larger than the image")
    d = stack.data[:, : mb * factor, : nb * factor].reshape(q, mb, factor, nb, factor).sum(axis=(2, 4))
    return replace(stack, data=d, pixel_pitch=stack.pixel_pitch * factor)


# ---------------------------------------------------------------------------
# bias reversal and statistics


@dataclass
class Decomposition:
    remanent: FieldMap
    induced: FieldMap
    residual_bias: np.ndarray | None = None  # per component, tesla

    def __iter__(self):
        return iter((self.remanent, self.induced))


def bias_reversal_decompose(map_plus: FieldMap, map_minus: FieldMap, source_free=None) -> Decomposition:
    """Split maps taken with opposite bias into remanent (half-sum) and induced (half-difference).

    ``source_free`` is an optional (m, n) boolean region far from sources;
    the remanent map's mean there is reported as the residual bias.
    """
    if map_plus.field.shape != map_minus.field.shape:
        raise ValueError(f"map dimensions differ: {map_plus.field.shape} vs {map_minus.field.shape}")
    mask = map_plus.mask & map_minus.mask
    rem = (map_plus.field + map_minus.field) / 2.0
    ind = (map_plus.field - map_minus.field) / 2.0
    pitch = map_plus.pixel_pitch
    remanent = FieldMap(rem, pitch, mask)
    induced = FieldMap(ind, pitch, mask)
    bias = None
    if source_free is not None:
        region = np.asarray(source_free, dtype=bool)
        if region.shape != mask.shape:
            raise ValueError("source_free region must match the map dimensions")
        sel = region & mask
        if not np.any(sel):
            raise ValueError("source_free region contains no valid pixels")
        bias = rem[:, sel].mean(axis=1)
    return Decomposition(remanent, induced, bias)


def noise_floor(fmap: FieldMap, source_free_mask, component="z") -> float:
    """Pixel-wise standard deviation (tesla) of one component over a source-free region."""
    region = np.asarray(source_free_mask, dtype=bool)
    if region.shape != fmap.mask.shape:
        raise ValueError("region must match the map dimensions")
    sel = region & fmap.mask
    if sel.sum() < 100:
        raise ValueError(f"noise floor needs >= 100 valid pixels, region has {int(sel.sum())}")
    return float(np.std(fmap.component(component)[sel]))


@dataclass
class SensitivityResult:
    exponent: float
    log_intercept: float
    sensitivity: float  # T m / sqrt(Hz)
    t_avg: float
    noise: float


def sensitivity_scaling(series, pixel_pitch: float) -> SensitivityResult:
    """Log-log regression of noise floor against averaging time, plus area-normalized sensitivity.

    ``series`` holds (T_avg seconds, noise tesla) pairs. The sensitivity is
    noise * sqrt(T_avg) * sqrt(pixel area), taken at the longest T_avg.
    """
    arr = np.asarray(series, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("series must be a list of (T_avg, noise) pairs")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0) or pixel_pitch <= 0:
        raise ValueError("averaging times, noise floors and pixel pitch must be > 0")
    t, s = arr[:, 0], arr[:, 1]
    if len(t) < 4 or t.max() / t.min() < 10.0:
        raise ValueError("need >= 4 points spanning at least one decade")
    slope, intercept = np.polyfit(np.log(t), np.log(s), 1)
    i = int(np.argmax(t))
    sens = s[i] * np.sqrt(t[i]) * pixel_pitch
    return SensitivityResult(float(slope), float(intercept), float(sens), float(t[i]), float(s[i]))


def uniform_stack_params(mode, linewidth=0.5, contrast=0.01, offset=1.0, hyperfine=None) -> SpectrumParams:
    """Convenience lineshape template: equal line depths ``contrast * offset``."""
    mode = as_mode(mode)
    hf = mode.default_hyperfine if hyperfine is None else hyperfine
    a = contrast * offset * linewidth**2
    return SpectrumParams(mode, np.full(mode.n_amplitudes, a), np.full(mode.n_groups, F_ZFS),
                          np.full(mode.n_groups, linewidth), offset, hf)
