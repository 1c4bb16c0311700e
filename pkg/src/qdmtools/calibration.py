"""Absolute field calibration against a multi-turn coil."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from qdmtools.constants import MU0

CURRENT_REL_SIGMA = 0.006  # ammeter accuracy
BAND_SIGMAS = 2.0


def loop_field_on_axis(a, h, i):
    """On-axis field (tesla) of a circular loop of radius ``a`` at axial distance ``h`` carrying ``i``."""
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise ValueError("loop radius must be > 0")
    h = np.asarray(h, dtype=float)
    return MU0 / (4.0 * np.pi) * 2.0 * np.pi * a**2 * np.asarray(i, dtype=float) / (a**2 + h**2) ** 1.5


@dataclass(frozen=True)
class SolenoidGeometry:
    """Coil of ``n_loops`` coaxial loops at h0, h0 + dh, ...; lengths in meters with 1-sigma errors."""

    radius_a: float
    h0: float
    delta_h: float
    n_loops: int = 10
    sigma_a: float = 0.0
    sigma_h0: float = 0.0
    sigma_delta_h: float = 0.0

    def __post_init__(self):
        if not (self.radius_a > 0 and self.h0 > 0 and self.delta_h > 0):
            raise ValueError("coil lengths must be > 0")
        if int(self.n_loops) != self.n_loops or self.n_loops < 1:
            raise ValueError("n_loops must be an integer >= 1")
        if min(self.sigma_a, self.sigma_h0, self.sigma_delta_h) < 0:
            raise ValueError("uncertainties must be >= 0")

    @classmethod
    def reference(cls) -> "SolenoidGeometry":
        """The ten-turn coil used for the reference calibration (a = 15.5 mm, h0 = 20.9 mm)."""
        return cls(15.5e-3, 20.9e-3, 0.48e-3, 10, 0.05e-3, 0.1e-3, 0.02e-3)


def _coil_gradient(a, h0, dh, n):
    """Analytic partial derivatives of the per-amp coil field w.r.t. (a, h0, dh)."""
    k = np.arange(n)
    h = h0 + dh * k
    c = MU0 / 2.0
    s = a**2 + h**2
    d_a = c * (2.0 * a * s**-1.5 - 3.0 * a**3 * s**-2.5)
    d_h = c * (-3.0 * a**2 * h * s**-2.5)
    return np.array([d_a.sum(), d_h.sum(), (d_h * k).sum()])


def solenoid_field(geom: SolenoidGeometry, i) -> tuple:
    """Axial coil field at the NV layer for current ``i`` and its 1-sigma geometric uncertainty.

    Returns (B, sigma_B) in tesla; sigma_B is first-order propagation of the
    a, h0 and dh errors combined in quadrature (current error excluded).
    """
    grad = _coil_gradient(geom.radius_a, geom.h0, geom.delta_h, geom.n_loops)
    sig = np.array([geom.sigma_a, geom.sigma_h0, geom.sigma_delta_h])
    sigma_slope = float(np.sqrt(np.sum((grad * sig) ** 2)))
    i = np.asarray(i, dtype=float)
    h = geom.h0 + geom.delta_h * np.arange(geom.n_loops)
    b = loop_field_on_axis(geom.radius_a, h, i[..., None]).sum(axis=-1)
    sb = sigma_slope * np.abs(i)
    if b.ndim == 0:
        return float(b), float(sb)
    return b, sb


def expected_slope(geom: SolenoidGeometry, projection: float = 1.0,
                   current_rel_sigma: float = CURRENT_REL_SIGMA) -> tuple[float, float]:
    """Expected slope (T/A) and its 1-sigma, geometry and current terms in quadrature."""
    b, sb = solenoid_field(geom, 1.0)
    return b * projection, float(np.hypot(sb, current_rel_sigma * b)) * abs(projection)


@dataclass
class CalibrationCurve:
    currents: np.ndarray  # A
    fields: np.ndarray  # T
    fit_slope: float
    fit_slope_sigma: float
    fit_intercept: float
    fit_intercept_sigma: float
    expected_slope: float | None = None
    expected_sigma: float | None = None

    @property
    def residuals(self) -> np.ndarray:
        return self.fields - (self.fit_slope * self.currents + self.fit_intercept)

    @property
    def normalized_slope(self) -> float | None:
        if self.expected_slope is None:
            return None
        return self.fit_slope / self.expected_slope

    @property
    def normalized_sigma(self) -> float | None:
        if self.expected_slope is None:
            return None
        r = self.normalized_slope
        return abs(r) * float(np.hypot(self.fit_slope_sigma / self.fit_slope if self.fit_slope else 0.0,
                                       (self.expected_sigma or 0.0) / self.expected_slope))

    def slope_interval(self, z: float = 1.959963984540054) -> tuple[float, float]:
        return self.fit_slope - z * self.fit_slope_sigma, self.fit_slope + z * self.fit_slope_sigma

    def within_band(self, n_sigma: float = BAND_SIGMAS) -> bool | None:
        """Whether the normalized slope sits within n_sigma of unity (the expected band)."""
        if self.expected_slope is None:
            return None
        return abs(self.normalized_slope - 1.0) <= n_sigma * self.normalized_sigma

    def report(self) -> dict:
        out = {
            "fit_slope_T_per_A": self.fit_slope,
            "fit_slope_sigma_T_per_A": self.fit_slope_sigma,
            "fit_intercept_T": self.fit_intercept,
            "fit_intercept_sigma_T": self.fit_intercept_sigma,
        }
        if self.expected_slope is not None:
            out.update(
                expected_slope_T_per_A=self.expected_slope,
                expected_sigma_T_per_A=self.expected_sigma,
                normalized_slope=self.normalized_slope,
                normalized_sigma=self.normalized_sigma,
                within_band=self.within_band(),
            )
        return out


def fit_calibration(points, expected: tuple[float, float] | None = None) -> CalibrationCurve:
    """Ordinary least-squares line through (current A, field T) points.

    Standard errors come from the residual scatter. ``expected`` is an
    optional (slope, sigma) used for the normalized-slope comparison.
    """
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("points must be (current, field) pairs")
    if len(arr) < 3:
        raise ValueError("calibration needs >= 3 points")
    x, y = arr[:, 0], arr[:, 1]
    xm = x.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if not sxx > 0:
        raise ValueError("currents are all identical; slope undefined")
    slope = float(np.sum((x - xm) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * xm)
    resid = y - slope * x - intercept
    s2 = float(np.sum(resid**2) / (len(x) - 2))
    se_slope = float(np.sqrt(s2 / sxx))
    se_int = float(np.sqrt(s2 * (1.0 / len(x) + xm**2 / sxx)))
    exp_s, exp_sig = (None, None) if expected is None else (float(expected[0]), float(expected[1]))
    return CalibrationCurve(x, y, slope, se_slope, intercept, se_int, exp_s, exp_sig)


def read_calibration_csv(path) -> np.ndarray:
    """Read ``current_mA,measured_field_uT`` rows into SI (A, T) pairs."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"current_mA", "measured_field_uT"} <= set(reader.fieldnames):
            raise ValueError("calibration CSV needs columns current_mA, measured_field_uT")
        rows = [(float(r["current_mA"]) * 1e-3, float(r["measured_field_uT"]) * 1e-6) for r in reader]
    return np.array(rows).reshape(-1, 2)


def write_calibration_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["current_mA", "measured_field_uT"])
        for i, b in np.asarray(points, dtype=float):
            w.writerow([repr(float(i) * 1e3), repr(float(b) * 1e6)])
