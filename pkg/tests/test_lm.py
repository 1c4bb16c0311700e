import numpy as np
import pytest

from qdmtools.lm import JacobianMode, LmOptions, lm_minimize, lm_minimize_batch


def test_options_validation():
    with pytest.raises(ValueError):
        LmOptions(cost_tolerance=0)
    with pytest.raises(ValueError):
        LmOptions(damping_up=1.0)
    assert LmOptions.from_dict({"jacobian_mode": "forward_difference"}).jacobian_mode is JacobianMode.FORWARD_DIFFERENCE


def test_linear_problem_exact_solution(rng):
    m = rng.normal(size=(20, 4))
    y = rng.normal(size=20)
    p, d = lm_minimize(lambda p: m @ p - y, np.zeros(4), jacobian=lambda p: m)
    ref = np.linalg.lstsq(m, y, rcond=None)[0]
    assert np.max(np.abs(p - ref)) < 1e-10
    # damping 1e-3 shrinking by 10 per step needs a third step to reach 1e-10
    assert d.converged and d.iterations <= 3


def test_scalar_quartic_cost():
    p, d = lm_minimize(lambda p: np.array([(p[0] - 3.0) ** 2]), [0.0],
                       jacobian=lambda p: np.array([[2.0 * (p[0] - 3.0)]]))
    assert abs(p[0] - 3.0) < 1e-8
    p_fd, _ = lm_minimize(lambda p: np.array([(p[0] - 3.0) ** 2]), [0.0])
    assert abs(p_fd[0] - 3.0) < 1e-8


def test_rosenbrock():
    def r(p):
        return np.array([10.0 * (p[1] - p[0] ** 2), 1.0 - p[0]])

    def j(p):
        return np.array([[-20.0 * p[0], 10.0], [-1.0, 0.0]])

    p, d = lm_minimize(r, [-1.2, 1.0], jacobian=j)
    assert np.allclose(p, [1.0, 1.0], atol=1e-6)
    p2, _ = lm_minimize(r, [-1.2, 1.0])
    assert np.allclose(p2, [1.0, 1.0], atol=1e-6)
    assert d.converged


def test_rosenbrock_grid_refinement_oracle():
    # brute-force: the cost minimum over successively refined grids sits at (1, 1)
    c = np.array([0.0, 0.0])
    span = 2.0
    for _ in range(12):
        g = np.linspace(-span, span, 41)
        x, y = np.meshgrid(c[0] + g, c[1] + g, indexing="ij")
        cost = 100 * (y - x**2) ** 2 + (1 - x) ** 2
        i = np.unravel_index(np.argmin(cost), cost.shape)
        c = np.array([x[i], y[i]])
        span /= 4
    assert np.allclose(c, [1.0, 1.0], atol=1e-6)


def test_non_finite_initial_residuals_raise():
    with pytest.raises(ValueError):
        lm_minimize(lambda p: np.array([np.nan]), [0.0])


def test_singular_problem_reports_instead_of_crashing():
    # residual independent of the second parameter: singular normal equations
    p, d = lm_minimize(lambda p: np.array([p[0] - 1.0, p[0] - 1.0]), [0.0, 5.0],
                       jacobian=lambda p: np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert abs(p[0] - 1.0) < 1e-8
    assert isinstance(d.converged, bool)


def test_unreachable_zero_stops_without_crash():
    p, d = lm_minimize(lambda p: np.array([p[0] ** 2 + 1.0]), [2.0], LmOptions(max_iterations=50))
    assert abs(p[0]) < 1e-2
    assert d.cost == pytest.approx(1.0, abs=1e-3)


def test_deterministic(rng):
    m = rng.normal(size=(30, 3))
    y = rng.normal(size=30)

    def r(p):
        return np.tanh(m @ p) - y * 0.1

    a = lm_minimize(r, [0.1, 0.2, 0.3])
    b = lm_minimize(r, [0.1, 0.2, 0.3])
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_batch_matches_individual_runs(rng):
    targets = rng.uniform(-2, 2, size=(6, 2))

    def fun(x, idx):
        t = targets[idx]
        return np.stack([np.exp(x[:, 0]) - np.exp(t[:, 0]), x[:, 1] ** 3 - t[:, 1] ** 3], axis=1)

    res = lm_minimize_batch(fun, np.full((6, 2), 0.5))
    assert np.allclose(res.x, targets, atol=1e-7)
    assert res.converged.all()
    for k in range(6):
        single = lm_minimize(lambda p: fun(p[None], np.array([k]))[0], [0.5, 0.5])
        assert np.allclose(single[0], res.x[k], atol=1e-12)


def test_max_iterations_reported():
    p, d = lm_minimize(lambda p: np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]]), [-1.2, 1.0],
                       LmOptions(max_iterations=3))
    assert not d.converged and d.iterations == 3 and d.reason == "max_iterations"
