"""Levenberg-Marquardt least squares, vectorized over independent problems.

Every problem in a batch carries its own damping and convergence state, so a
stack of pixel spectra is solved as one array computation. The single-problem
:func:`lm_minimize` is a thin wrapper over the batched solver.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np


class JacobianMode(str, enum.Enum):
    ANALYTIC = "analytic"
    FORWARD_DIFFERENCE = "forward_difference"


@dataclass(frozen=True)
class LmOptions:
    max_iterations: int = 200
    cost_tolerance: float = 1e-12
    param_tolerance: float = 1e-10
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    jacobian_mode: JacobianMode = JacobianMode.ANALYTIC
    fd_step: float = 1e-7

    def __post_init__(self):
        object.__setattr__(self, "jacobian_mode", JacobianMode(self.jacobian_mode))
        if self.cost_tolerance <= 0 or self.param_tolerance <= 0 or self.fd_step <= 0:
            raise ValueError("tolerances and fd_step must be > 0")
        if self.damping_up <= 1 or self.damping_down <= 1:
            raise ValueError("damping factors must be > 1")
        if self.initial_damping <= 0 or self.max_iterations < 1:
            raise ValueError("initial_damping must be > 0 and max_iterations >= 1")

    @classmethod
    def from_dict(cls, d: dict | None) -> "LmOptions":
        return cls(**(d or {}))


@dataclass
class LmDiagnostics:
    cost: float
    iterations: int
    converged: bool
    reason: str


@dataclass
class BatchResult:
    x: np.ndarray  # (P, n)
    cost: np.ndarray  # (P,) half sum of squared residuals
    residuals: np.ndarray  # (P, m)
    iterations: np.ndarray  # (P,)
    converged: np.ndarray  # (P,) bool
    reason: np.ndarray  # (P,) object


_MAX_DAMPING = 1e32


def forward_difference_jacobian(fun, x, idx, step):
    """Forward-difference Jacobian of fun(x, idx) -> (p, m) with relative step."""
    r0 = fun(x, idx)
    p, n = x.shape
    jac = np.empty((p, r0.shape[1], n))
    for i in range(n):
        h = step * np.maximum(np.abs(x[:, i]), 1.0)
        xp = x.copy()
        xp[:, i] += h
        jac[:, :, i] = (fun(xp, idx) - r0) / (xp[:, i] - x[:, i])[:, None]
    return jac


def _solve(h, g, lam, dscale):
    a = h + (lam[:, None] * dscale**2)[:, :, None] * np.eye(h.shape[-1])
    try:
        return -np.linalg.solve(a, g[..., None])[..., 0], np.ones(len(g), bool)
    except np.linalg.LinAlgError:
        out = np.zeros_like(g)
        ok = np.ones(len(g), bool)
        for i in range(len(g)):
            try:
                out[i] = -np.linalg.solve(a[i], g[i])
            except np.linalg.LinAlgError:
                ok[i] = False
        return out, ok


def lm_minimize_batch(
    fun: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x0,
    opts: LmOptions | None = None,
    jac: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> BatchResult:
    """Minimize 0.5 * |fun(x)|^2 independently for each row of ``x0``.

    ``fun(x, idx)`` returns residuals (p, m) for the parameter rows ``x`` (p, n)
    belonging to problems ``idx``; ``jac(x, idx)`` returns (p, m, n). When
    ``jac`` is None, or the options ask for it, forward differences are used.

    Damping is Marquardt-scaled by the running maximum of the Jacobian column
    norms. A problem converges when an accepted step lowers the cost by at most
    ``cost_tolerance`` relative, when the predicted reduction falls below that
    level, or when the scaled step is below ``param_tolerance`` relative to the
    scaled parameters. Failures never raise; they come back unconverged.
    """
    opts = opts or LmOptions()
    x = np.array(x0, dtype=float, copy=True)
    if x.ndim != 2:
        raise ValueError("x0 must have shape (problems, params)")
    n_prob, n_par = x.shape
    all_idx = np.arange(n_prob)
    r = np.asarray(fun(x, all_idx), dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals are not finite at the initial point")

    use_fd = jac is None or opts.jacobian_mode is JacobianMode.FORWARD_DIFFERENCE
    if use_fd:
        def jac_fn(xx, ii):
            return forward_difference_jacobian(fun, xx, ii, opts.fd_step)
    else:
        jac_fn = jac

    cost = 0.5 * np.sum(r * r, axis=1)
    lam = np.full(n_prob, opts.initial_damping)
    iters = np.zeros(n_prob, dtype=int)
    done = np.zeros(n_prob, bool)
    conv = np.zeros(n_prob, bool)
    reason = np.full(n_prob, "max_iterations", dtype=object)
    hess = np.zeros((n_prob, n_par, n_par))
    grad = np.zeros((n_prob, n_par))
    dscale = np.zeros((n_prob, n_par))
    stale = np.ones(n_prob, bool)

    zero = cost == 0
    done[zero] = conv[zero] = True
    reason[zero] = "zero_cost"

    for _ in range(opts.max_iterations):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        upd = act[stale[act]]
        if upd.size:
            jm = np.asarray(jac_fn(x[upd], upd), dtype=float)
            hess[upd] = np.matmul(np.swapaxes(jm, 1, 2), jm)
            grad[upd] = np.einsum("pmn,pm->pn", jm, r[upd])
            colnorm = np.sqrt(np.maximum(np.diagonal(hess[upd], axis1=1, axis2=2), 0.0))
            dscale[upd] = np.maximum(dscale[upd], colnorm)
            stale[upd] = False
        ds = np.where(dscale[act] > 0, dscale[act], 1.0)
        step, solved = _solve(hess[act], grad[act], lam[act], ds)
        iters[act] += 1
        x_try = x[act] + step
        finite_step = solved & np.all(np.isfinite(x_try), axis=1)
        r_try = np.full((act.size, r.shape[1]), np.inf)
        if np.any(finite_step):
            r_try[finite_step] = fun(x_try[finite_step], act[finite_step])
        c_try = 0.5 * np.sum(r_try * r_try, axis=1)
        c_try[~np.isfinite(c_try)] = np.inf

        c_old = cost[act]
        accepted = c_try < c_old
        # Predicted reduction of the local quadratic model.
        pred = 0.5 * np.einsum("pn,pn->p", step, lam[act][:, None] * ds**2 * step - grad[act])
        step_norm = np.linalg.norm(ds * step, axis=1)
        x_norm = np.linalg.norm(ds * x[act], axis=1)

        acc = act[accepted]
        x[acc] = x_try[accepted]
        r[acc] = r_try[accepted]
        cost[acc] = c_try[accepted]
        stale[acc] = True
        lam[acc] = lam[acc] / opts.damping_down
        rej = act[~accepted]
        lam[rej] = lam[rej] * opts.damping_up

        f_conv = accepted & ((c_old - c_try) <= opts.cost_tolerance * c_old)
        p_conv = finite_step & (pred <= opts.cost_tolerance * c_old)
        x_conv = finite_step & (step_norm <= opts.param_tolerance * (x_norm + opts.param_tolerance))
        z_conv = accepted & (c_try == 0)
        newly = f_conv | p_conv | x_conv | z_conv
        for mask, why in (
            (z_conv, "zero_cost"),
            (x_conv, "param_tolerance"),
            (p_conv, "predicted_reduction"),
            (f_conv, "cost_tolerance"),
        ):
            reason[act[mask & newly]] = why
        conv[act[newly]] = True
        done[act[newly]] = True

        stuck = ~newly & ((lam[act] > _MAX_DAMPING) | ~solved)
        done[act[stuck]] = True
        reason[act[stuck]] = "damping_overflow"

    return BatchResult(x, cost, r, iters, conv, reason)


def lm_minimize(
    residuals: Callable[[np.ndarray], np.ndarray],
    init,
    opts: LmOptions | None = None,
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, LmDiagnostics]:
    """Levenberg-Marquardt minimization of sum(residuals(p)**2) from ``init``.

    Returns the parameters and an :class:`LmDiagnostics`. Deterministic for
    identical inputs; non-convergence is reported, never raised.
    """
    x0 = np.atleast_1d(np.asarray(init, dtype=float))

    def fun(x, idx):
        return np.atleast_1d(np.asarray(residuals(x[0]), dtype=float))[None, :]

    jac = None
    if jacobian is not None:
        def jac(x, idx):
            j = np.asarray(jacobian(x[0]), dtype=float)
            return j.reshape(1, -1, x.shape[1])

    res = lm_minimize_batch(fun, x0[None, :], opts, jac)
    diag = LmDiagnostics(
        cost=float(2.0 * res.cost[0]),
        iterations=int(res.iterations[0]),
        converged=bool(res.converged[0]),
        reason=str(res.reason[0]),
    )
    return res.x[0], diag
