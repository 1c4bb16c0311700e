"""Compiled inner loops for Lorentzian line sums and their Jacobians.

Detunings are formed as (f - center) * 1000 - offset, i.e. in MHz, to match
the MHz linewidth/hyperfine convention of the fit parameters.
"""

import numba
import numpy as np

_JIT = dict(cache=True, nogil=True)


@numba.njit(**_JIT)
def line_sum(freqs, centers, amps, widths):
    """Sum of Lorentzians A / (dx^2 + G^2); inputs (P, L) in GHz / MHz^2 / MHz -> (P, Q)."""
    p_count, n_lines = centers.shape
    q_count = freqs.size
    out = np.zeros((p_count, q_count))
    for p in range(p_count):
        for l in range(n_lines):
            a = amps[p, l]
            if a == 0.0:
                continue
            c = centers[p, l]
            g2 = widths[p, l] * widths[p, l]
            for q in range(q_count):
                dx = (freqs[q] - c) * 1000.0
                out[p, q] += a / (dx * dx + g2)
    return out


@numba.njit(**_JIT)
def grouped_sum(freqs, params, n_groups, offsets):
    """Line sum for packed parameter rows [A..., f..., G..., C] (offsets in MHz)."""
    p_count = params.shape[0]
    n_off = offsets.size
    q_count = freqs.size
    f0 = n_groups * n_off
    g0 = f0 + n_groups
    out = np.zeros((p_count, q_count))
    for p in range(p_count):
        for j in range(n_groups):
            c = params[p, f0 + j]
            g = params[p, g0 + j]
            g2 = g * g
            for o in range(n_off):
                a = params[p, j * n_off + o]
                off = offsets[o]
                for q in range(q_count):
                    dx = (freqs[q] - c) * 1000.0 - off
                    out[p, q] += a / (dx * dx + g2)
    return out


@numba.njit(**_JIT)
def dip_model_jac(freqs, params, n_groups, offsets, jac):
    """Dip model C - sum(A L) and its Jacobian (written into ``jac``, shape (P, Q, n))."""
    p_count = params.shape[0]
    n_off = offsets.size
    q_count = freqs.size
    f0 = n_groups * n_off
    g0 = f0 + n_groups
    ci = g0 + n_groups
    model = np.empty((p_count, q_count))
    for p in range(p_count):
        cval = params[p, ci]
        for q in range(q_count):
            model[p, q] = cval
            jac[p, q, ci] = 1.0
        for j in range(n_groups):
            c = params[p, f0 + j]
            g = params[p, g0 + j]
            g2 = g * g
            for q in range(q_count):
                sc = 0.0
                sg = 0.0
                base = (freqs[q] - c) * 1000.0
                for o in range(n_off):
                    a = params[p, j * n_off + o]
                    dx = base - offsets[o]
                    lor = 1.0 / (dx * dx + g2)
                    al2 = a * lor * lor
                    model[p, q] -= a * lor
                    jac[p, q, j * n_off + o] = -lor
                    sc -= 2000.0 * dx * al2
                    sg += 2.0 * g * al2
                jac[p, q, f0 + j] = sc
                jac[p, q, g0 + j] = sg
    return model


@numba.njit(**_JIT)
def _profile_integrand(xi, rho, phi, beta):
    d = phi - beta / (rho * rho + xi * xi) ** 1.5
    return 1.0 / (d * d + 1.0)


@numba.njit(**_JIT)
def _adaptive_simpson(rho, phi, beta, a, b, rtol, max_depth):
    # coarse composite Simpson sets the absolute tolerance scale
    n0 = 16
    h = (b - a) / n0
    coarse = _profile_integrand(a, rho, phi, beta) + _profile_integrand(b, rho, phi, beta)
    for i in range(1, n0):
        coarse += (4.0 if i % 2 else 2.0) * _profile_integrand(a + i * h, rho, phi, beta)
    coarse *= h / 3.0
    tol = rtol * max(abs(coarse), 1e-300)

    size = 2 * max_depth + 8
    st_a = np.empty(size)
    st_b = np.empty(size)
    st_fa = np.empty(size)
    st_fm = np.empty(size)
    st_fb = np.empty(size)
    st_s = np.empty(size)
    st_tol = np.empty(size)
    st_d = np.empty(size, dtype=np.int64)
    fa = _profile_integrand(a, rho, phi, beta)
    fb = _profile_integrand(b, rho, phi, beta)
    fm = _profile_integrand(0.5 * (a + b), rho, phi, beta)
    top = 0
    st_a[0], st_b[0], st_fa[0], st_fm[0], st_fb[0] = a, b, fa, fm, fb
    st_s[0] = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    st_tol[0] = tol
    st_d[0] = 0
    total = 0.0
    while top >= 0:
        lo, hi = st_a[top], st_b[top]
        f_lo, f_mid, f_hi = st_fa[top], st_fm[top], st_fb[top]
        whole, eps, depth = st_s[top], st_tol[top], st_d[top]
        top -= 1
        mid = 0.5 * (lo + hi)
        f_l = _profile_integrand(0.5 * (lo + mid), rho, phi, beta)
        f_r = _profile_integrand(0.5 * (mid + hi), rho, phi, beta)
        left = (mid - lo) / 6.0 * (f_lo + 4.0 * f_l + f_mid)
        right = (hi - mid) / 6.0 * (f_mid + 4.0 * f_r + f_hi)
        diff = left + right - whole
        if abs(diff) <= 15.0 * eps or depth >= max_depth:
            total += left + right + diff / 15.0
        else:
            top += 1
            st_a[top], st_b[top], st_fa[top], st_fm[top], st_fb[top] = lo, mid, f_lo, f_l, f_mid
            st_s[top], st_tol[top], st_d[top] = left, 0.5 * eps, depth + 1
            top += 1
            st_a[top], st_b[top], st_fa[top], st_fm[top], st_fb[top] = mid, hi, f_mid, f_r, f_hi
            st_s[top], st_tol[top], st_d[top] = right, 0.5 * eps, depth + 1
    return total


@numba.njit(**_JIT)
def reduced_profile(rho, phi, beta, tau, rtol):
    """z-integrated single-Lorentzian response for flat arrays ``rho``, ``phi``."""
    out = np.empty(rho.size)
    for i in range(rho.size):
        if tau == 0.0:
            out[i] = _profile_integrand(1.0, rho[i], phi[i], beta)
        else:
            out[i] = _adaptive_simpson(rho[i], phi[i], beta, 1.0, 1.0 + tau, rtol, 50)
    return out
