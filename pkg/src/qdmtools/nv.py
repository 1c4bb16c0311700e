"""NV-center geometry and ground-state spin physics.

The four NV orientations are expressed in the sensor frame (x, y in the
sensor plane, z along the diamond [100] normal). All four share the same
positive z-projection, so a drive circularly polarized about z addresses the
same m_s = +1 / -1 labeling for every orientation.
"""

from __future__ import annotations

import numpy as np

from qdmtools.constants import F_ZFS, GAMMA

_S23 = np.sqrt(2.0 / 3.0)
_S13 = np.sqrt(1.0 / 3.0)

NV_AXES = np.array(
    [
        [-_S23, 0.0, _S13],
        [_S23, 0.0, _S13],
        [0.0, _S23, _S13],
        [0.0, -_S23, _S13],
    ]
)
NV_AXES.setflags(write=False)


def nv_orientations() -> np.ndarray:
    """Return the four NV unit vectors as a (4, 3) array, rows k = 1..4."""
    return NV_AXES.copy()


def _check_index(k: int) -> int:
    if k not in (1, 2, 3, 4):
        raise ValueError(f"NV orientation index must be in 1..4, got {k!r}")
    return k - 1


def projected_field(b, k: int) -> float | np.ndarray:
    """Signed projection of field ``b`` (tesla, shape (..., 3)) on NV axis ``k``."""
    return np.asarray(b, dtype=float) @ NV_AXES[_check_index(k)]


def transverse_frame(k: int) -> np.ndarray:
    """Right-handed frame (e1, e2, u_k) for orientation ``k`` as rows of a 3x3 array.

    e1 is the component of x-hat orthogonal to u_k (y-hat if u_k is along x),
    e2 = u_k x e1.
    """
    u = NV_AXES[_check_index(k)]
    e1 = np.array([1.0, 0.0, 0.0]) - u[0] * u
    if np.linalg.norm(e1) < 1e-12:
        e1 = np.array([0.0, 1.0, 0.0]) - u[1] * u
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return np.stack([e1, e2, u])


_FRAMES = np.stack([transverse_frame(k) for k in (1, 2, 3, 4)])  # (4, 3, 3)
_FRAMES.setflags(write=False)

_R2 = 1.0 / np.sqrt(2.0)
SX = _R2 * np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex)
SY = _R2 * np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex)
SZ = np.diag([1.0, 0.0, -1.0]).astype(complex)


def _hamiltonian_from_local(b_local, d_zfs):
    """Build H = D Sz^2 + gamma (b1 Sx + b2 Sy + b3 Sz) from NV-frame field components."""
    b_local = np.asarray(b_local, dtype=float)
    d_zfs = np.asarray(d_zfs, dtype=float)
    shape = np.broadcast_shapes(b_local.shape[:-1], d_zfs.shape)
    h = np.zeros(shape + (3, 3), dtype=complex)
    z = GAMMA * b_local[..., 2]
    t = GAMMA * _R2 * (b_local[..., 0] - 1j * b_local[..., 1])
    h[..., 0, 0] = d_zfs + z
    h[..., 2, 2] = d_zfs - z
    h[..., 0, 1] = t
    h[..., 1, 2] = t
    h[..., 1, 0] = np.conj(t)
    h[..., 2, 1] = np.conj(t)
    return h


def spin1_hamiltonian(b, d_zfs: float, k: int, frame: np.ndarray | None = None) -> np.ndarray:
    """Spin-1 Hamiltonian (GHz) for orientation ``k`` in field ``b`` (tesla).

    ``frame`` overrides the transverse frame (rows e1, e2, u_k); eigenvalues do
    not depend on it.
    """
    idx = _check_index(k)
    fr = _FRAMES[idx] if frame is None else np.asarray(frame, dtype=float)
    return _hamiltonian_from_local(fr @ np.asarray(b, dtype=float), d_zfs)


def eigvalsh3(h) -> np.ndarray:
    """Ascending eigenvalues of Hermitian 3x3 matrices, shape (..., 3, 3) -> (..., 3).

    Closed form: trigonometric roots of the characteristic cubic, then the
    closest pair is recomputed from the 2x2 block orthogonal to the isolated
    eigenvector. The second step keeps near-degenerate pairs at machine
    precision, where the trigonometric roots alone lose about half the digits.
    """
    h = np.asarray(h)
    h = h.astype(complex, copy=False)
    m = np.trace(h, axis1=-2, axis2=-1).real / 3.0
    eye = np.eye(3)
    k = h - m[..., None, None] * eye
    p = np.sum(np.abs(k) ** 2, axis=(-2, -1)) / 6.0
    q = np.linalg.det(k).real / 2.0

    sp = np.sqrt(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(p > 0, q / np.where(p > 0, p * sp, 1.0), 0.0)
    # Discriminant negligible relative to p^3: treat as an exact double root.
    # (An absolute threshold would misfire on narrow eigenvalue clusters.)
    disc = p**3 - q**2
    r = np.where(np.abs(disc) <= 1e-30 * p**3, np.sign(r), r)
    phi = np.arccos(np.clip(r, -1.0, 1.0)) / 3.0
    lam = np.stack(
        [
            m + 2.0 * sp * np.cos(phi + 2.0 * np.pi / 3.0),
            m + 2.0 * sp * np.cos(phi - 2.0 * np.pi / 3.0),
            m + 2.0 * sp * np.cos(phi),
        ],
        axis=-1,
    )
    lam = np.sort(lam, axis=-1)

    spread = lam[..., 2] - lam[..., 0]
    low_isolated = (lam[..., 1] - lam[..., 0]) >= (lam[..., 2] - lam[..., 1])
    far = np.where(low_isolated, lam[..., 0], lam[..., 2])

    a = h - far[..., None, None] * eye
    rows = [a[..., 0, :], a[..., 1, :], a[..., 2, :]]
    cands = [np.cross(rows[0], rows[1]), np.cross(rows[0], rows[2]), np.cross(rows[1], rows[2])]
    norms = np.stack([np.sum(np.abs(c) ** 2, axis=-1) for c in cands], axis=-1)
    best = np.argmax(norms, axis=-1)
    v = np.choose(best[..., None], cands)
    vn = np.sqrt(np.max(norms, axis=-1))
    ok = (spread > 0) & (vn > 0)
    v = v / np.where(ok, vn, 1.0)[..., None]

    # Orthonormal complement of v: pick the basis vector least aligned with v.
    basis = np.argmin(np.abs(v), axis=-1)
    w = np.zeros(v.shape, dtype=complex)
    np.put_along_axis(w, basis[..., None], 1.0, axis=-1)
    e1 = w - np.sum(np.conj(v) * w, axis=-1, keepdims=True) * v
    e2 = np.conj(np.cross(v, e1))
    with np.errstate(invalid="ignore", divide="ignore"):  # rows where ok is False are discarded
        e1 = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
        e2 = e2 / np.linalg.norm(e2, axis=-1, keepdims=True)

    def _form(x, y):
        return np.einsum("...i,...ij,...j->...", np.conj(x), h, y)

    h11 = _form(e1, e1).real
    h22 = _form(e2, e2).real
    h12 = _form(e1, e2)
    t = 0.5 * (h11 + h22)
    rad = np.sqrt((0.5 * (h11 - h22)) ** 2 + np.abs(h12) ** 2)
    lf = _form(v, v).real
    lo, hi = t - rad, t + rad
    refined = np.where(
        low_isolated[..., None],
        np.stack([lf, lo, hi], axis=-1),
        np.stack([lo, hi, lf], axis=-1),
    )
    return np.where(ok[..., None], refined, lam)


def hamiltonians(b, zfs) -> np.ndarray:
    """All four orientation Hamiltonians, (..., 3) field and (..., 4) ZFS -> (..., 4, 3, 3)."""
    b = np.asarray(b, dtype=float)
    zfs = np.asarray(zfs, dtype=float)
    b_local = np.einsum("kij,...j->...ki", _FRAMES, b)
    return _hamiltonian_from_local(b_local, zfs)


def resonance_frequencies(b, zfs=F_ZFS) -> np.ndarray:
    """Eight ODMR frequencies (GHz) ordered k = 1..4, (dm_s = -1, dm_s = +1) per k.

    ``b`` has shape (..., 3) in tesla; ``zfs`` is a scalar or (..., 4) array of
    per-orientation zero-field splittings in GHz. Returns shape (..., 8).
    """
    b = np.asarray(b, dtype=float)
    zfs = np.broadcast_to(np.asarray(zfs, dtype=float), b.shape[:-1] + (4,))
    e = eigvalsh3(hamiltonians(b, zfs))  # (..., 4, 3)
    pairs = np.stack([e[..., 1] - e[..., 0], e[..., 2] - e[..., 0]], axis=-1)
    return pairs.reshape(b.shape[:-1] + (8,))


def check_zfs(zfs) -> np.ndarray:
    """Validate a ZFS vector: four finite values inside the 2.6-3.1 GHz window."""
    z = np.asarray(zfs, dtype=float)
    if z.shape != (4,):
        raise ValueError(f"ZFS vector needs 4 entries, got shape {z.shape}")
    if not np.all(np.isfinite(z)) or np.any((z < 2.6) | (z > 3.1)):
        raise ValueError(f"ZFS values outside [2.6, 3.1] GHz: {z}")
    return z
