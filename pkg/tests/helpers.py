"""Shared synthetic-data builders for the test-suite."""

import numpy as np

from qdmtools.nv import resonance_frequencies
from qdmtools.spectra import SpectrumParams, dip_spectrum

# 2 mT bias that separates all eight VMM lines by >= 13.8 MHz
VMM_BIAS = 2e-3 * np.array([0.92769, 0.30414, 0.21653])
VMM_FREQS = np.linspace(2.81, 2.93, 600)


def vmm_pixel(b=VMM_BIAS, zfs=2.87, contrast=0.01, width=0.5, offset=1.0):
    fr = np.sort(resonance_frequencies(np.asarray(b), zfs))
    a = np.full(24, contrast * offset * width**2)
    return SpectrumParams("VMM", a, fr, np.full(8, width), offset)


def vmm_spectrum(p, freqs=VMM_FREQS):
    return dip_spectrum(freqs, p)


def uniform_field_map(b, shape=(6, 6), pitch=1e-6):
    from qdmtools.mapping import FieldMap

    f = np.broadcast_to(np.asarray(b, float)[:, None, None], (3,) + shape)
    return FieldMap(f.copy(), pitch)


def vmm_stack(field_map, photons=None, seed=None):
    from qdmtools.forward import synthesize_stack
    from qdmtools.mapping import uniform_stack_params

    return synthesize_stack(field_map, "VMM", uniform_stack_params("VMM"), photons, VMM_FREQS,
                            bias_field=VMM_BIAS, seed=seed)
