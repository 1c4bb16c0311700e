import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qdmtools import _kernels
from qdmtools.constants import GAMMA
from qdmtools.nv import NV_AXES
from qdmtools.spectra import (
    Handedness,
    Mode,
    PolarizationDrive,
    SpectrumParams,
    as_mode,
    cpmm_polarized_spectrum,
    dip_spectrum,
    eval_spectrum,
    parallel_fields,
    polarization_weights,
)


def test_mode_parameter_counts():
    assert (Mode.VMM.n_amplitudes, Mode.VMM.n_params) == (24, 41)
    assert (Mode.PMM.n_amplitudes, Mode.PMM.n_params) == (6, 11)
    assert (Mode.CPMM.n_amplitudes, Mode.CPMM.n_params) == (4, 9)
    assert Mode.VMM.default_hyperfine == 2.16 and Mode.CPMM.default_hyperfine == 3.03
    assert as_mode("pmm") is Mode.PMM
    with pytest.raises(ValueError):
        as_mode("XYZ")


def test_wrong_lengths_rejected():
    with pytest.raises(ValueError):
        SpectrumParams("PMM", [1.0] * 5, [2.8, 2.9], [0.5, 0.5], 1.0)
    with pytest.raises(ValueError):
        SpectrumParams("CPMM", [1.0] * 4, [2.8], [0.5], 1.0)


def test_validate_rejects_nonpositive_width():
    p = SpectrumParams("PMM", [1.0] * 6, [2.8, 2.9], [0.5, 0.0], 1.0)
    with pytest.raises(ValueError):
        p.validate()


def _reference(f, mode, a, c, g, off, hf):
    # direct transcription of the multiplet sum, one term at a time
    units = {"VMM": (-1, 0, 1), "PMM": (-1, 0, 1), "CPMM": (-0.5, 0.5)}[mode]
    total = np.full_like(f, off)
    i = 0
    for j in range(len(c)):
        for u in units:
            total += a[i] / (((f - c[j]) * 1e3 - u * hf) ** 2 + g[j] ** 2)
            i += 1
    return total


@pytest.mark.parametrize("mode", ["VMM", "PMM", "CPMM"])
def test_eval_matches_reference(mode, rng):
    m = Mode(mode)
    a = rng.uniform(0.001, 0.01, m.n_amplitudes)
    c = np.sort(rng.uniform(2.82, 2.92, m.n_groups))
    g = rng.uniform(0.3, 1.0, m.n_groups)
    p = SpectrumParams(m, a, c, g, 1.0)
    f = np.linspace(2.8, 2.94, 777)
    assert np.allclose(eval_spectrum(f, p), _reference(f, mode, a, c, g, 1.0, m.default_hyperfine), rtol=1e-14)
    assert np.allclose(dip_spectrum(f, p), 2.0 - eval_spectrum(f, p), rtol=1e-15)


def test_line_depth_and_fwhm():
    p = SpectrumParams("PMM", [0.0, 0.25, 0.0, 0.0, 0.0, 0.0], [2.87, 2.95], [0.5, 0.5], 0.0)
    assert p.line_depths()[1] == pytest.approx(1.0)
    assert eval_spectrum(2.87, p) == pytest.approx(1.0)
    # half maximum one half-width away (in MHz)
    assert eval_spectrum(2.87 + 0.5e-3, p) == pytest.approx(0.5)


def test_vector_round_trip():
    p = SpectrumParams("VMM", np.arange(24.0), np.linspace(2.8, 2.9, 8), np.full(8, 0.4), 3.0, 2.2)
    q = SpectrumParams.from_vector("VMM", p.to_vector(), 2.2)
    assert np.array_equal(q.to_vector(), p.to_vector())


def test_grouped_kernel_matches_eval(rng):
    m = Mode.VMM
    p = SpectrumParams(m, rng.uniform(0, 0.01, 24), np.sort(rng.uniform(2.82, 2.92, 8)),
                       rng.uniform(0.3, 1, 8), 1.0)
    f = np.linspace(2.8, 2.94, 300)
    got = 1.0 + _kernels.grouped_sum(f, p.to_vector()[None], 8, p.offsets_mhz)[0]
    assert np.allclose(got, eval_spectrum(f, p), rtol=1e-13)


@pytest.mark.parametrize("mode", ["VMM", "PMM", "CPMM"])
def test_analytic_jacobian_matches_forward_differences(mode):
    m = Mode(mode)
    rng = np.random.default_rng(7)
    f = np.linspace(2.80, 2.94, 400)
    offs = np.asarray(m.offset_units) * m.default_hyperfine
    worst = 0.0
    for _ in range(100):
        x = np.concatenate([
            rng.uniform(0.001, 0.01, m.n_amplitudes),
            np.sort(rng.uniform(2.82, 2.92, m.n_groups)),
            rng.uniform(0.3, 1.0, m.n_groups),
            [rng.uniform(0.5, 2.0)],
        ])[None]
        jac = np.empty((1, f.size, x.shape[1]))
        model = _kernels.dip_model_jac(f, x, m.n_groups, offs, jac)
        na, ng = m.n_amplitudes, m.n_groups
        for i in range(x.shape[1]):
            # step sizes per parameter kind: centres in GHz need a much finer step
            h = 1e-8 if na <= i < na + ng else 1e-5 if i < na + 2 * ng else 1e-6
            xp, xm = x.copy(), x.copy()
            xp[0, i] += h
            xm[0, i] -= h
            num = (_kernels.dip_model_jac(f, xp, m.n_groups, offs, jac.copy())
                   - _kernels.dip_model_jac(f, xm, m.n_groups, offs, jac.copy())) / (2 * h)
            scale = np.max(np.abs(num)) + 1e-300
            worst = max(worst, np.max(np.abs(num[0] - jac[0, :, i])) / scale)
        assert np.allclose(model[0], 2 * x[0, -1] - eval_spectrum(f, SpectrumParams.from_vector(m, x[0])))
    assert worst < 1e-6


# --- polarization-selective spectra ------------------------------------------

def test_linear_drive_weights_are_even():
    assert np.allclose(polarization_weights(PolarizationDrive("linear")), 0.5)


def test_sigma_plus_along_nv_axis_is_fully_selective():
    w = polarization_weights(PolarizationDrive("sigma_plus", NV_AXES[2]))
    assert np.allclose(w[2], [1.0, 0.0], atol=1e-15)


def test_z_drive_weights_equal_for_all_orientations():
    w = polarization_weights(PolarizationDrive("sigma_plus"))
    # |eps_-|^2 for a z drive: ((1 + cos t)/2)^2 with cos t = 1/sqrt(3), normalized
    a = ((1 + 1 / np.sqrt(3)) / 2) ** 2
    b = ((1 - 1 / np.sqrt(3)) / 2) ** 2
    assert np.allclose(w, [a / (a + b), b / (a + b)])
    assert np.allclose(polarization_weights(PolarizationDrive("sigma_minus")), w[:, ::-1])


def test_bad_drive_axis():
    with pytest.raises(ValueError):
        PolarizationDrive("sigma_plus", [1.0, 1.0, 0.0])


def test_drive_dict_round_trip():
    d = PolarizationDrive("sigma_minus", [0.0, 1.0, 0.0])
    back = PolarizationDrive.from_dict(d.to_dict())
    assert back.handedness is d.handedness and np.array_equal(back.axis, d.axis)
    assert d.flipped().handedness is Handedness.SIGMA_PLUS
    assert PolarizationDrive("linear").flipped().handedness is Handedness.LINEAR


_BASE = SpectrumParams("CPMM", [0.004, 0.005, 0.006, 0.007], [2.8695, 2.8705], [0.5, 0.6], 1.0)


def test_cpmm_lines_shift_by_projected_zeeman_term():
    bz = 10e-6
    only_up = SpectrumParams("CPMM", [0, 0, 0.01, 0.01], [2.87, 2.87], [0.5, 0.5], 0.0)
    drive = PolarizationDrive("sigma_plus")
    s = cpmm_polarized_spectrum(parallel_fields([0, 0, bz]), drive, only_up)
    w_plus = polarization_weights(drive)[0, 0]
    shifted = only_up.with_(res_freqs=only_up.res_freqs + GAMMA * bz / np.sqrt(3),
                            amplitudes=only_up.amplitudes * w_plus)
    f = np.linspace(2.86, 2.88, 2001)
    assert np.max(np.abs(s(f) - eval_spectrum(f, shifted))) < 1e-13


_SYM = SpectrumParams("CPMM", [0.004, 0.005, 0.004, 0.005], [2.87, 2.87], [0.5, 0.5], 1.0)


@given(st.floats(-50e-6, 50e-6))
def test_cpmm_handedness_swap_equals_z_negation(bz):
    f = np.linspace(2.86, 2.88, 301)
    p = cpmm_polarized_spectrum(parallel_fields([0, 0, bz]), PolarizationDrive("sigma_plus"), _SYM)
    m = cpmm_polarized_spectrum(parallel_fields([0, 0, -bz]), PolarizationDrive("sigma_minus"), _SYM)
    assert np.max(np.abs(p(f) - m(f))) < 1e-12


@given(st.floats(-50e-6, 50e-6), st.floats(-50e-6, 50e-6), st.floats(-50e-6, 50e-6))
def test_cpmm_handedness_swap_equals_field_reversal(bx, by, bz):
    # with transverse components the symmetry needs the whole vector reversed
    f = np.linspace(2.86, 2.88, 301)
    b = np.array([bx, by, bz])
    p = cpmm_polarized_spectrum(parallel_fields(b), PolarizationDrive("sigma_plus"), _SYM)
    m = cpmm_polarized_spectrum(parallel_fields(-b), PolarizationDrive("sigma_minus"), _SYM)
    assert np.max(np.abs(p(f) - m(f))) < 1e-12


def test_cpmm_requires_four_projections():
    with pytest.raises(ValueError):
        cpmm_polarized_spectrum([0.0, 0.0], PolarizationDrive("sigma_plus"), _BASE)
