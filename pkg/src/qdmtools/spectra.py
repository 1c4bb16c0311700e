"""ODMR lineshape models for the three acquisition modes.

Each resonance group j is a hyperfine multiplet of Lorentzians sharing one
center f_j (GHz) and one half-width G_j (MHz):

    S(f) = sum_j sum_o A_jo / ((f - f_j - o)^2 + G_j^2) + C

with offsets o in {-d_hf, 0, +d_hf} (14N triplets, VMM and PMM) or
{-d_hf/2, +d_hf/2} (15N doublets, CPMM). A line's depth is A / G^2 and its
FWHM is 2 G. Camera-like spectra are dips, C - sum(...); :func:`dip_spectrum`
gives that form and is what the fitters model.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from qdmtools import _kernels
from qdmtools.constants import CONSTANTS, GAMMA
from qdmtools.nv import NV_AXES, _FRAMES


class Mode(str, enum.Enum):
    VMM = "VMM"
    PMM = "PMM"
    CPMM = "CPMM"

    @property
    def n_groups(self) -> int:
        return 8 if self is Mode.VMM else 2

    @property
    def offset_units(self) -> tuple[float, ...]:
        """Hyperfine line positions relative to the group center, in units of d_hf."""
        return (-0.5, 0.5) if self is Mode.CPMM else (-1.0, 0.0, 1.0)

    @property
    def n_amplitudes(self) -> int:
        return self.n_groups * len(self.offset_units)

    @property
    def n_params(self) -> int:
        return self.n_amplitudes + 2 * self.n_groups + 1

    @property
    def default_hyperfine(self) -> float:
        return CONSTANTS.d_hf_15n if self is Mode.CPMM else CONSTANTS.d_hf_14n


def as_mode(mode) -> Mode:
    if isinstance(mode, Mode):
        return mode
    try:
        return Mode(str(mode).upper())
    except ValueError:
        raise ValueError(f"unknown mode {mode!r}; expected VMM, PMM or CPMM") from None


@dataclass(frozen=True)
class SpectrumParams:
    """Lorentzian multiplet parameters for one pixel.

    Units: amplitudes in fluorescence * MHz^2, res_freqs in GHz, linewidths
    (HWHM) in MHz, offset in fluorescence units, hyperfine in MHz.
    """

    mode: Mode
    amplitudes: np.ndarray
    res_freqs: np.ndarray
    linewidths: np.ndarray
    offset: float
    hyperfine: float | None = None

    def __post_init__(self):
        mode = as_mode(self.mode)
        object.__setattr__(self, "mode", mode)
        for name in ("amplitudes", "res_freqs", "linewidths"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        if self.hyperfine is None:
            object.__setattr__(self, "hyperfine", mode.default_hyperfine)
        expected = {
            "amplitudes": mode.n_amplitudes,
            "res_freqs": mode.n_groups,
            "linewidths": mode.n_groups,
        }
        for name, n in expected.items():
            got = getattr(self, name).shape
            if got != (n,):
                raise ValueError(f"{mode.value} needs {n} {name}, got shape {got}")

    def validate(self) -> "SpectrumParams":
        """Raise if linewidths are not positive or amplitudes are negative."""
        if np.any(self.linewidths <= 0):
            raise ValueError("linewidths must be > 0")
        if np.any(self.amplitudes < 0):
            raise ValueError("amplitudes must be >= 0")
        return self

    @property
    def offsets_mhz(self) -> np.ndarray:
        return np.asarray(self.mode.offset_units) * self.hyperfine

    def to_vector(self) -> np.ndarray:
        """Pack as [A..., f..., G..., C]."""
        return np.concatenate([self.amplitudes, self.res_freqs, self.linewidths, [self.offset]])

    @classmethod
    def from_vector(cls, mode, vec, hyperfine: float | None = None) -> "SpectrumParams":
        mode = as_mode(mode)
        vec = np.asarray(vec, dtype=float)
        na, ng = mode.n_amplitudes, mode.n_groups
        return cls(
            mode,
            vec[:na],
            vec[na : na + ng],
            vec[na + ng : na + 2 * ng],
            float(vec[-1]),
            hyperfine,
        )

    def line_depths(self) -> np.ndarray:
        widths = np.repeat(self.linewidths, len(self.mode.offset_units))
        return self.amplitudes / widths**2

    def with_(self, **changes) -> "SpectrumParams":
        return replace(self, **changes)


def eval_spectrum(f, p: SpectrumParams) -> np.ndarray:
    """Evaluate the mode's multiplet sum plus offset at frequencies ``f`` (GHz)."""
    f = np.asarray(f, dtype=float)
    out = np.full(f.shape, p.offset, dtype=float)
    n_off = len(p.mode.offset_units)
    for j in range(p.mode.n_groups):
        g2 = p.linewidths[j] ** 2
        for o, off in enumerate(p.offsets_mhz):
            dx = (f - p.res_freqs[j]) * 1e3 - off
            out += p.amplitudes[j * n_off + o] / (dx * dx + g2)
    return out


def dip_spectrum(f, p: SpectrumParams) -> np.ndarray:
    """Camera-like dip form: offset minus the Lorentzian sum."""
    return 2.0 * p.offset - eval_spectrum(f, p)


class Handedness(str, enum.Enum):
    SIGMA_PLUS = "sigma_plus"
    SIGMA_MINUS = "sigma_minus"
    LINEAR = "linear"

    def flipped(self) -> "Handedness":
        if self is Handedness.SIGMA_PLUS:
            return Handedness.SIGMA_MINUS
        if self is Handedness.SIGMA_MINUS:
            return Handedness.SIGMA_PLUS
        return self


@dataclass(frozen=True, eq=False)
class PolarizationDrive:
    handedness: Handedness = Handedness.LINEAR
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        object.__setattr__(self, "handedness", Handedness(self.handedness))
        axis = np.array(self.axis, dtype=float)
        if axis.shape != (3,) or not np.isclose(np.linalg.norm(axis), 1.0, atol=1e-9):
            raise ValueError(f"drive axis must be a unit 3-vector, got {axis}")
        axis.setflags(write=False)
        object.__setattr__(self, "axis", axis)

    def __eq__(self, other):
        if not isinstance(other, PolarizationDrive):
            return NotImplemented
        return self.handedness is other.handedness and np.array_equal(self.axis, other.axis)

    def __hash__(self):
        return hash((self.handedness, tuple(self.axis)))

    def flipped(self) -> "PolarizationDrive":
        return PolarizationDrive(self.handedness.flipped(), self.axis)

    def to_dict(self) -> dict:
        return {"handedness": self.handedness.value, "axis": self.axis.tolist()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "PolarizationDrive":
        if d is None:
            return cls()
        return cls(d.get("handedness", "linear"), d.get("axis", [0.0, 0.0, 1.0]))


def polarization_weights(drive: PolarizationDrive) -> np.ndarray:
    """Relative strengths (w+, w-) of the dm_s = +1 / -1 transitions per orientation.

    The drive's complex polarization vector is decomposed into circular
    components about each NV axis; weights are their normalized squared
    magnitudes. A sigma+ drive about u_k gives (1, 0) for that orientation;
    linear drive gives (1/2, 1/2) everywhere. Returns shape (4, 2).
    """
    if drive.handedness is Handedness.LINEAR:
        return np.full((4, 2), 0.5)
    v = drive.axis
    trial = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a1 = trial - (trial @ v) * v
    a1 /= np.linalg.norm(a1)
    a2 = np.cross(v, a1)
    sign = 1.0 if drive.handedness is Handedness.SIGMA_PLUS else -1.0
    eps = (a1 + sign * 1j * a2) / np.sqrt(2.0)
    c1 = _FRAMES[:, 0, :] @ eps
    c2 = _FRAMES[:, 1, :] @ eps
    plus = np.abs((c1 - 1j * c2) / np.sqrt(2.0)) ** 2
    minus = np.abs((c1 + 1j * c2) / np.sqrt(2.0)) ** 2
    total = plus + minus
    return np.stack([plus / total, minus / total], axis=-1)


def cpmm_lines(
    b_parallel,
    drive: PolarizationDrive,
    base: SpectrumParams,
    orientations: Sequence[int] = (1, 2, 3, 4),
):
    """Explicit line list of the superposed CPMM spectrum.

    ``b_parallel`` has shape (..., 4) (tesla, per orientation). Returns
    (centers GHz, amplitudes, widths MHz), each of shape (..., L). Every
    orientation contributes its dm_s = -1 doublet (amplitudes A1, A2) at
    f1 - gamma*b_par and its dm_s = +1 doublet (A3, A4) at f2 + gamma*b_par,
    scaled by the transition weights and by 1/len(orientations).
    """
    if base.mode is not Mode.CPMM:
        raise ValueError("cpmm lines need CPMM base parameters")
    b_par = np.asarray(b_parallel, dtype=float)
    w = polarization_weights(drive)
    scale = 1.0 / len(orientations)
    half = base.hyperfine / 2.0e3  # GHz
    centers, amps, widths = [], [], []
    for k in orientations:
        shift = GAMMA * b_par[..., k - 1]
        for grp, sgn, wt in ((0, -1.0, w[k - 1, 1]), (1, 1.0, w[k - 1, 0])):
            c = base.res_freqs[grp] + sgn * shift
            for o, off in enumerate((-half, half)):
                centers.append(c + off)
                amps.append(np.broadcast_to(base.amplitudes[2 * grp + o] * wt * scale, c.shape))
                widths.append(np.broadcast_to(base.linewidths[grp], c.shape))
    return np.stack(centers, -1), np.stack(amps, -1), np.stack(widths, -1)


def cpmm_polarized_spectrum(
    b_parallel_per_k,
    drive: PolarizationDrive,
    base: SpectrumParams,
    orientations: Sequence[int] = (1, 2, 3, 4),
) -> Callable[[np.ndarray], np.ndarray]:
    """Return S(f) for a CPMM ensemble under the given drive polarization.

    The result has the same sign convention as :func:`eval_spectrum`
    (Lorentzian sum plus offset).
    """
    b_par = np.asarray(b_parallel_per_k, dtype=float)
    if b_par.shape != (4,):
        raise ValueError("need one parallel field per orientation (4 values)")
    centers, amps, widths = cpmm_lines(b_par, drive, base, orientations)

    def spectrum(f):
        f = np.asarray(f, dtype=float)
        flat = np.atleast_1d(f).ravel()
        s = _kernels.line_sum(flat, centers[None, :], amps[None, :], widths[None, :])[0]
        return (s + base.offset).reshape(f.shape)

    return spectrum


def vmm_lines(res_freqs, base: SpectrumParams):
    """Line list for VMM/PMM multiplets at the given group centers, shape (..., G) -> (..., 3G)."""
    res = np.asarray(res_freqs, dtype=float)
    n_off = len(base.mode.offset_units)
    centers = (res[..., :, None] + base.offsets_mhz / 1e3).reshape(res.shape[:-1] + (-1,))
    amps = np.broadcast_to(base.amplitudes, centers.shape)
    widths = np.broadcast_to(np.repeat(base.linewidths, n_off), centers.shape)
    return centers, amps, widths


def parallel_fields(b) -> np.ndarray:
    """Projections of fields (..., 3) on all four NV axes -> (..., 4)."""
    return np.asarray(b, dtype=float) @ NV_AXES.T
