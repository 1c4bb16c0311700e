"""Synthetic ground truth: dipole fields, shot-noise ODMR stacks and thick-layer line profiles."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from qdmtools import _kernels
from qdmtools.constants import F_ZFS, MU0
from qdmtools.mapping import FieldMap, OdmrStack
from qdmtools.nv import _check_index, eigvalsh3, hamiltonians, resonance_frequencies
from qdmtools.spectra import Mode, PolarizationDrive, SpectrumParams, as_mode, cpmm_lines, parallel_fields

POISSON_LIMIT = 1e6


@dataclass(frozen=True)
class DipoleSource:
    position: np.ndarray  # m, z <= 0 below the sensor
    moment: np.ndarray  # A m^2

    def __post_init__(self):
        pos = np.array(self.position, dtype=float)
        mom = np.array(self.moment, dtype=float)
        if pos.shape != (3,) or mom.shape != (3,):
            raise ValueError("position and moment must be 3-vectors")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(mom))):
            raise ValueError("dipole position and moment must be finite")
        if not np.linalg.norm(mom) > 0:
            raise ValueError("dipole moment must be nonzero")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "moment", mom)


@dataclass(frozen=True)
class SensorGeometry:
    standoff: float
    pixel_pitch: float
    grid: tuple[int, int]
    nv_layer_thickness: float = 0.0
    nv_layer_depth: float = 0.0

    def __post_init__(self):
        if not self.standoff > 0:
            raise ValueError("standoff must be > 0")
        if not self.nv_layer_thickness >= 0 or not self.nv_layer_depth >= 0:
            raise ValueError("NV layer thickness and depth must be >= 0")
        if not self.pixel_pitch > 0:
            raise ValueError("pixel_pitch must be > 0")
        m, n = (int(v) for v in self.grid)
        if m < 1 or n < 1:
            raise ValueError("grid must be at least 1x1")
        object.__setattr__(self, "grid", (m, n))

    @property
    def tau(self) -> float:
        return self.nv_layer_thickness / self.standoff

    def pixel_positions(self) -> np.ndarray:
        """Pixel centers (m, n, 3): x = i * pitch, y = j * pitch, z = standoff + layer depth."""
        m, n = self.grid
        i, j = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
        z = np.full((m, n), self.standoff + self.nv_layer_depth)
        return np.stack([i * self.pixel_pitch, j * self.pixel_pitch, z], axis=-1)


@dataclass(frozen=True)
class ReducedProfileParams:
    tau: float
    beta_s: float

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau >= 0):
            raise ValueError("tau must be >= 0")
        if not math.isfinite(self.beta_s):
            raise ValueError("beta_s must be finite")


# ---------------------------------------------------------------------------
# dipole fields


def dipole_field(src: DipoleSource, r_obs) -> np.ndarray:
    """Field (tesla) of a point dipole at observation points ``r_obs`` (..., 3)."""
    r = np.asarray(r_obs, dtype=float) - src.position
    dist = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(dist == 0):
        raise ValueError("observation point coincides with the dipole")
    rhat = r / dist
    mdotr = np.sum(rhat * src.moment, axis=-1, keepdims=True)
    return MU0 / (4.0 * np.pi) * (3.0 * mdotr * rhat - src.moment) / dist**3


def sample_field_map(sources: Sequence[DipoleSource], geom: SensorGeometry, bias=None) -> FieldMap:
    """Superposed dipole fields at every pixel center, plus an optional uniform bias."""
    pos = geom.pixel_positions()
    total = np.zeros(pos.shape)
    for s in sources:
        total += dipole_field(s, pos)
    if bias is not None:
        total += np.asarray(bias, dtype=float)
    return FieldMap(np.moveaxis(total, -1, 0), geom.pixel_pitch)


# ---------------------------------------------------------------------------
# stack synthesis


def pixel_lines(b, mode, lineshape: SpectrumParams, zfs=F_ZFS, orientation: int = 1,
                polarization: PolarizationDrive | None = None):
    """Line lists (centers GHz, amplitudes, widths MHz) for fields ``b`` (P, 3)."""
    mode = as_mode(mode)
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if lineshape.mode is not mode:
        raise ValueError(f"lineshape template is {lineshape.mode.value}, stack mode is {mode.value}")
    offs = lineshape.offsets_mhz / 1e3
    n_off = len(offs)
    if mode is Mode.CPMM:
        drive = polarization or PolarizationDrive("sigma_plus")
        # CPMM lines follow Bz alone: every orientation sees Bz/sqrt(3)
        bz_only = b * np.array([0.0, 0.0, 1.0])
        return cpmm_lines(parallel_fields(bz_only), drive, lineshape)
    zfs = np.broadcast_to(np.asarray(zfs, dtype=float), (len(b), 4))
    if mode is Mode.VMM:
        groups = np.sort(resonance_frequencies(b, zfs), axis=1)
    else:
        k = _check_index(orientation)
        e = eigvalsh3(hamiltonians(b, zfs)[:, k])
        groups = np.stack([e[:, 1] - e[:, 0], e[:, 2] - e[:, 0]], axis=1)
    centers = (groups[:, :, None] + offs).reshape(len(b), -1)
    amps = np.broadcast_to(lineshape.amplitudes, centers.shape)
    widths = np.broadcast_to(np.repeat(lineshape.linewidths, n_off), centers.shape)
    return centers, amps, widths


def synthesize_stack(field_map: FieldMap, mode, lineshape: SpectrumParams, photons_per_pixel,
                     freqs, bias_field=(0.0, 0.0, 0.0), polarization: PolarizationDrive | None = None,
                     orientation: int = 1, seed=None, averages: int = 1) -> OdmrStack:
    """Render the ODMR stack a camera would record for a (total) field map.

    ``field_map`` must be a 3-component map of the full field at the NV layer
    (bias included); ``bias_field`` is recorded in the stack for the fitter.
    Spectra are C - sum of Lorentzians. Finite ``photons_per_pixel`` scales
    the baseline to that many counts per frequency point and draws shot
    noise (Poisson below 1e6 counts, Gaussian above); the result is scaled
    back to the template's fluorescence units. ``None`` or ``inf`` gives a
    noiseless stack. Pixels whose line centers leave the frequency window
    are counted in ``metadata['out_of_window']``.

    The template's res_freqs are only used by CPMM (as the unshifted
    centers); VMM/PMM centers come from the spin Hamiltonian, with the ZFS
    taken from ``field_map.zfs_maps`` when present.
    """
    mode = as_mode(mode)
    freqs = np.asarray(freqs, dtype=float)
    if field_map.components != 3:
        raise ValueError("synthesis needs a 3-component field map")
    m, n = field_map.m, field_map.n
    b = np.moveaxis(field_map.field, 0, -1).reshape(-1, 3)
    b = np.where(np.isfinite(b), b, 0.0)
    zfs = F_ZFS
    if field_map.zfs_maps is not None:
        zfs = np.moveaxis(field_map.zfs_maps, 0, -1).reshape(-1, 4)
        zfs = np.where(np.isfinite(zfs), zfs, F_ZFS)
    centers, amps, widths = pixel_lines(b, mode, lineshape, zfs, orientation, polarization)
    centers = np.ascontiguousarray(centers)
    amps = np.ascontiguousarray(amps, dtype=float)
    widths = np.ascontiguousarray(widths, dtype=float)
    c = lineshape.offset
    s = c - _kernels.line_sum(freqs, centers, amps, widths)

    outside = np.any((centers < freqs[0]) | (centers > freqs[-1]), axis=1)
    if photons_per_pixel is not None and math.isfinite(photons_per_pixel):
        if photons_per_pixel <= 0:
            raise ValueError("photons_per_pixel must be > 0")
        rng = np.random.default_rng(seed)
        lam = np.clip(s, 0.0, None) * (photons_per_pixel / c)
        if lam.max() < POISSON_LIMIT:
            counts = rng.poisson(lam).astype(float)
        else:
            counts = rng.normal(lam, np.sqrt(lam))
            small = lam < POISSON_LIMIT
            if np.any(small):
                counts[small] = rng.poisson(lam[small])
            counts = np.clip(counts, 0.0, None)
        s = counts * (c / photons_per_pixel)
    data = np.moveaxis(s.reshape(m, n, -1), -1, 0)
    meta = {
        "out_of_window": int(outside.sum()),
        "out_of_window_pixels": np.flatnonzero(outside).tolist(),
        "photons_per_pixel": None if photons_per_pixel is None else float(photons_per_pixel),
    }
    meta["hyperfine_mhz"] = float(lineshape.hyperfine)
    if seed is not None:
        meta["seed"] = int(seed)
    return OdmrStack(freqs, data, field_map.pixel_pitch, mode, np.asarray(bias_field, dtype=float),
                     polarization if mode is Mode.CPMM else None, averages, orientation, meta)


# ---------------------------------------------------------------------------
# thick NV layer response


def integrated_fluorescence(rho, phi, params: ReducedProfileParams, rtol: float = 1e-8):
    """Depth-integrated single-Lorentzian response in reduced units (S0 = 1).

    Integrates 1 / ([phi - beta_s / (rho^2 + xi^2)^(3/2)]^2 + 1) over
    xi in [1, 1 + tau] by adaptive Simpson. tau = 0 returns the integrand at
    xi = 1.
    """
    rho, phi = np.broadcast_arrays(np.asarray(rho, dtype=float), np.asarray(phi, dtype=float))
    out = _kernels.reduced_profile(
        np.ascontiguousarray(rho.ravel()), np.ascontiguousarray(phi.ravel()),
        float(params.beta_s), float(params.tau), float(rtol)
    )
    out = out.reshape(rho.shape)
    return out if out.ndim else float(out)


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _peak_phi(rho: float, params: ReducedProfileParams, n_scan: int = 401) -> float:
    span = 2.0 * abs(params.beta_s)
    if span == 0:
        return 0.0
    grid = np.linspace(-span, span, n_scan)
    vals = integrated_fluorescence(np.full_like(grid, rho), grid, params)
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_scan - 1)]
    tol = 1e-6 * span

    def f(x):
        return float(integrated_fluorescence(rho, x, params))

    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f(x1)
    return 0.5 * (a + b)


def peak_shift_profile(rho_grid, params: ReducedProfileParams) -> np.ndarray:
    """phi_pk(rho): the detuning of maximal integrated response at each radius."""
    rho = np.asarray(rho_grid, dtype=float)
    if not np.all(np.isfinite(rho)):
        raise ValueError("rho grid must be finite")
    return np.array([_peak_phi(float(r), params) for r in rho.ravel()]).reshape(rho.shape)


def half_max_radius(params: ReducedProfileParams, rho_max: float = 10.0, tol: float = 1e-4) -> float:
    """Smallest rho where phi_pk falls to half its on-axis value (NaN if not reached)."""
    peak0 = _peak_phi(0.0, params)
    if peak0 == 0:
        return float("nan")

    def above(r):
        return _peak_phi(r, params) / peak0 > 0.5

    grid = np.linspace(0.0, rho_max, 101)
    lo = 0.0
    hi = None
    for r in grid[1:]:
        if not above(r):
            hi = float(r)
            break
        lo = float(r)
    if hi is None:
        return float("nan")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if above(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def write_profile_csv(path, rho, phi_pk) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho", "phi_pk"])
        for r, p in zip(np.ravel(rho), np.ravel(phi_pk)):
            w.writerow([repr(float(r)), repr(float(p))])
