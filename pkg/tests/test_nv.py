import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qdmtools.constants import F_ZFS, GAMMA
from qdmtools.nv import (
    NV_AXES,
    check_zfs,
    eigvalsh3,
    nv_orientations,
    projected_field,
    resonance_frequencies,
    spin1_hamiltonian,
    transverse_frame,
)


def test_axes_are_unit_with_one_third_overlaps():
    u = nv_orientations()
    assert np.allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-15)
    g = u @ u.T
    off = g[~np.eye(4, dtype=bool)]
    assert np.allclose(np.abs(off), 1.0 / 3.0, atol=1e-15)
    assert np.allclose(u[:, 2], np.sqrt(1.0 / 3.0))


def test_nv_axes_read_only():
    with pytest.raises(ValueError):
        NV_AXES[0, 0] = 1.0


def test_projection_of_z_field_is_one_over_sqrt3():
    for k in range(1, 5):
        assert projected_field([0, 0, 1e-3], k) == pytest.approx(1e-3 / np.sqrt(3), rel=1e-15)


@pytest.mark.parametrize("k", [0, 5, -1])
def test_bad_orientation_index(k):
    with pytest.raises(ValueError):
        projected_field([0, 0, 1], k)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_transverse_frame_right_handed(k):
    f = transverse_frame(k)
    assert np.allclose(f @ f.T, np.eye(3), atol=1e-15)
    assert np.linalg.det(f) == pytest.approx(1.0)
    assert np.allclose(f[2], NV_AXES[k - 1])


def test_hamiltonian_is_hermitian():
    h = spin1_hamiltonian([1e-3, -2e-3, 0.5e-3], F_ZFS, 2)
    assert np.allclose(h, h.conj().T)


def test_zero_field_all_at_zfs():
    assert np.allclose(resonance_frequencies(np.zeros(3)), F_ZFS, atol=1e-15)


def test_axial_field_splits_linearly():
    # field exactly along u_1: no mixing, f = D -/+ gamma B
    b = 1e-3 * NV_AXES[0]
    f = resonance_frequencies(b)
    assert f[0] == pytest.approx(F_ZFS - GAMMA * 1e-3, abs=1e-12)
    assert f[1] == pytest.approx(F_ZFS + GAMMA * 1e-3, abs=1e-12)


def test_one_millitesla_along_z_matches_dense_solver():
    f = resonance_frequencies([0, 0, 1e-3])
    assert f[0] == pytest.approx(2.85408865, abs=1e-8)
    assert f[1] == pytest.approx(2.88645900, abs=1e-8)
    assert np.allclose(f.reshape(4, 2), f[:2])  # all four orientations equivalent


def test_frame_choice_does_not_change_eigenvalues(rng):
    b = rng.normal(size=3) * 2e-3
    h1 = spin1_hamiltonian(b, 2.87, 3)
    f = transverse_frame(3)
    angle = 0.7
    e1 = np.cos(angle) * f[0] + np.sin(angle) * f[1]
    e2 = np.cross(f[2], e1)
    h2 = spin1_hamiltonian(b, 2.87, 3, frame=np.stack([e1, e2, f[2]]))
    assert np.allclose(np.linalg.eigvalsh(h1), np.linalg.eigvalsh(h2), atol=1e-13)


def _random_hermitian(rng, n):
    a = rng.normal(size=(n, 3, 3)) + 1j * rng.normal(size=(n, 3, 3))
    return 0.5 * (a + np.conj(np.swapaxes(a, 1, 2)))


def test_eigvalsh3_matches_lapack_generic(rng):
    h = _random_hermitian(rng, 5000)
    assert np.max(np.abs(eigvalsh3(h) - np.linalg.eigvalsh(h))) < 1e-12


def test_eigvalsh3_near_degenerate(rng):
    n = 3000
    q, _ = np.linalg.qr(rng.normal(size=(n, 3, 3)) + 1j * rng.normal(size=(n, 3, 3)))
    gaps = 10.0 ** rng.uniform(-14, -2, size=n)
    lam = np.stack([np.full(n, 2.87), 2.87 + gaps, np.full(n, 3.5)], axis=1)
    lam[::2, 2] = 2.87 - gaps[::2] * 0.5  # also triple-ish clusters
    h = np.einsum("pij,pj,pkj->pik", q, lam, q.conj())
    assert np.max(np.abs(eigvalsh3(h) - np.linalg.eigvalsh(h))) < 1e-12


def test_eigvalsh3_exact_degeneracies():
    assert np.allclose(eigvalsh3(np.eye(3) * 2.0), 2.0)
    h = np.diag([1.0, 1.0, 3.0]).astype(complex)
    assert np.allclose(eigvalsh3(h), [1.0, 1.0, 3.0], atol=1e-15)
    assert np.allclose(eigvalsh3(np.zeros((3, 3))), 0.0)


@given(
    st.lists(st.floats(-20e-3, 20e-3), min_size=3, max_size=3),
    st.lists(st.floats(2.8, 2.95), min_size=4, max_size=4),
)
def test_resonances_match_dense_diagonalization(b, d):
    f = resonance_frequencies(np.array(b), np.array(d))
    for k in range(1, 5):
        e = np.linalg.eigvalsh(spin1_hamiltonian(b, d[k - 1], k))
        assert abs(f[2 * k - 2] - (e[1] - e[0])) < 1e-11
        assert abs(f[2 * k - 1] - (e[2] - e[0])) < 1e-11


def test_batched_shapes():
    b = np.zeros((5, 7, 3))
    assert resonance_frequencies(b).shape == (5, 7, 8)
    assert resonance_frequencies(b, np.full((5, 7, 4), 2.88)).shape == (5, 7, 8)


def test_check_zfs():
    assert np.allclose(check_zfs([2.87] * 4), 2.87)
    with pytest.raises(ValueError):
        check_zfs([2.87] * 3)
    with pytest.raises(ValueError):
        check_zfs([2.5, 2.87, 2.87, 2.87])
    with pytest.raises(ValueError):
        check_zfs([np.nan, 2.87, 2.87, 2.87])
