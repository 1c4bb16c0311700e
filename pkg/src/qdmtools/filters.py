"""Spatial post-processing filters for field maps."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from qdmtools.errors import FilterError
from qdmtools.mapping import FieldMap

FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))
TRUNCATE = 4.0


def gaussian_lowpass(fmap: FieldMap, fwhm: float) -> FieldMap:
    """Real-space Gaussian blur of every component (kernel cut at 4 sigma, mirrored edges).

    Masked pixels get zero weight and the kernel is renormalized over the
    valid ones. A FWHM under one pixel leaves the map unchanged and warns.
    """
    if not (np.isfinite(fwhm) and fwhm > 0):
        raise FilterError("Gaussian FWHM must be > 0")
    if fwhm < fmap.pixel_pitch:
        warnings.warn("low-pass FWHM is below one pixel; map left unchanged", stacklevel=2)
        return fmap
    sigma = fwhm / FWHM_PER_SIGMA / fmap.pixel_pitch

    def blur(a):
        return gaussian_filter(a, sigma, mode="reflect", truncate=TRUNCATE)

    out = np.empty_like(fmap.field)
    if np.all(fmap.mask):
        for c in range(fmap.components):
            out[c] = blur(fmap.field[c])
        return fmap.with_field(out)
    den = blur(fmap.mask.astype(float))
    for c in range(fmap.components):
        num = blur(np.where(fmap.mask, fmap.field[c], 0.0))
        with np.errstate(invalid="ignore", divide="ignore"):
            out[c] = np.where(fmap.mask, num / den, np.nan)
    return fmap.with_field(out)


def butterworth_gain(k, k_cut, order: int):
    """Amplitude gain sqrt(1 / (1 + (k_c/k)^(2 order))); zero at k = 0."""
    k = np.asarray(k, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        ratio = np.where(k > 0, k_cut / np.where(k > 0, k, 1.0), np.inf)
        return np.where(k > 0, 1.0 / np.sqrt(1.0 + ratio ** (2 * order)), 0.0)


def _infill(values, mask, size=5):
    """Replace masked pixels by the mean of valid neighbours (global mean as last resort)."""
    if np.all(mask):
        return values
    w = mask.astype(float)
    v = np.where(mask, values, 0.0)
    num = uniform_filter(v, size, mode="reflect")
    den = uniform_filter(w, size, mode="reflect")
    glob = v.sum() / max(w.sum(), 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        local = np.where(den > 1e-12, num / den, glob)
    return np.where(mask, values, local)


def butterworth_highpass(fmap: FieldMap, cutoff: float, order: int = 3) -> FieldMap:
    """Frequency-domain Butterworth high-pass with the -3 dB point at wavelength ``cutoff``.

    The map is treated as periodic; masked pixels are filled with local
    means before the transform and masked again afterwards. The mean is
    removed exactly.
    """
    pitch = fmap.pixel_pitch
    if not np.isfinite(cutoff) or cutoff <= 2.0 * pitch:
        raise FilterError(f"high-pass cutoff {cutoff!r} m must exceed two pixels ({2 * pitch} m)")
    if int(order) != order or order < 1:
        raise FilterError("Butterworth order must be an integer >= 1")
    m, n = fmap.m, fmap.n
    kx = 2.0 * np.pi * np.fft.fftfreq(m, d=pitch)
    ky = 2.0 * np.pi * np.fft.rfftfreq(n, d=pitch)
    k = np.hypot(kx[:, None], ky[None, :])
    gain = butterworth_gain(k, 2.0 * np.pi / cutoff, int(order))
    out = np.empty_like(fmap.field)
    for c in range(fmap.components):
        filled = _infill(fmap.field[c], fmap.mask)
        spec = np.fft.rfft2(filled) * gain
        res = np.fft.irfft2(spec, s=(m, n))
        res -= res.mean()
        out[c] = np.where(fmap.mask, res, np.nan)
    return fmap.with_field(out)
