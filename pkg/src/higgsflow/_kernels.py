"""Fused rank-2 stepping kernels for the flows.

These apply exactly the same linear operators as the vectorized numpy path
(both sides multiply by the grid's dense derivative matrix), specialized to
r = 2 so a whole RK4 step runs in a few fused passes.  `flow` falls back to
the numpy reference when numba is unavailable or r != 2; a unit test pins the
two paths against each other.

Layout: complex128 arrays (N, N, 2, 2); derivatives contract the real
derivative matrix D against axis 0 (x) directly (one real GEMM on the float64
view) and against axis 1 (y) via an explicit transpose pass.
"""
from __future__ import annotations

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - environment without numba
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _transpose01_into(f, out):
    N = f.shape[0]
    for x in range(N):
        for y in range(N):
            out[y, x, 0, 0] = f[x, y, 0, 0]
            out[y, x, 0, 1] = f[x, y, 0, 1]
            out[y, x, 1, 0] = f[x, y, 1, 0]
            out[y, x, 1, 1] = f[x, y, 1, 1]


@njit(cache=True)
def _dx_apply(Dre, f):
    """d/dx via one real GEMM on the float64 view (D is real)."""
    N = f.shape[0]
    fv = f.reshape(N, N * 4).view(np.float64)
    g = np.dot(Dre, fv)
    return g.view(np.complex128).reshape(N, N, 2, 2)


@njit(cache=True)
def _dy_apply(Dre, f, tbuf):
    N = f.shape[0]
    _transpose01_into(f, tbuf)
    g = _dx_apply(Dre, tbuf)
    out = np.empty_like(f)
    _transpose01_into(g, out)
    return out


@njit(cache=True)
def _mu1_pass(ax, ay, a, p, m, want_stats):
    """m = -2i( d'a + (d'a)^H + [a,a^H] + [p,p^H] ); returns (sum|m|^2, max|m|^2)."""
    N = a.shape[0]
    total = 0.0
    supsq = 0.0
    for x in range(N):
        for y in range(N):
            pa00 = 0.5 * (ax[x, y, 0, 0] - 1j * ay[x, y, 0, 0])
            pa01 = 0.5 * (ax[x, y, 0, 1] - 1j * ay[x, y, 0, 1])
            pa10 = 0.5 * (ax[x, y, 1, 0] - 1j * ay[x, y, 1, 0])
            pa11 = 0.5 * (ax[x, y, 1, 1] - 1j * ay[x, y, 1, 1])
            a00 = a[x, y, 0, 0]
            a01 = a[x, y, 0, 1]
            a10 = a[x, y, 1, 0]
            a11 = a[x, y, 1, 1]
            p00 = p[x, y, 0, 0]
            p01 = p[x, y, 0, 1]
            p10 = p[x, y, 1, 0]
            p11 = p[x, y, 1, 1]
            b00 = np.conj(a00)
            b01 = np.conj(a10)
            b10 = np.conj(a01)
            b11 = np.conj(a11)
            ca00 = a00 * b00 + a01 * b10 - (b00 * a00 + b01 * a10)
            ca01 = a00 * b01 + a01 * b11 - (b00 * a01 + b01 * a11)
            ca10 = a10 * b00 + a11 * b10 - (b10 * a00 + b11 * a10)
            ca11 = a10 * b01 + a11 * b11 - (b10 * a01 + b11 * a11)
            q00 = np.conj(p00)
            q01 = np.conj(p10)
            q10 = np.conj(p01)
            q11 = np.conj(p11)
            cp00 = p00 * q00 + p01 * q10 - (q00 * p00 + q01 * p10)
            cp01 = p00 * q01 + p01 * q11 - (q00 * p01 + q01 * p11)
            cp10 = p10 * q00 + p11 * q10 - (q10 * p00 + q11 * p10)
            cp11 = p10 * q01 + p11 * q11 - (q10 * p01 + q11 * p11)
            m00 = -2j * (pa00 + np.conj(pa00) + ca00 + cp00)
            m01 = -2j * (pa01 + np.conj(pa10) + ca01 + cp01)
            m10 = -2j * (pa10 + np.conj(pa01) + ca10 + cp10)
            m11 = -2j * (pa11 + np.conj(pa11) + ca11 + cp11)
            m[x, y, 0, 0] = m00
            m[x, y, 0, 1] = m01
            m[x, y, 1, 0] = m10
            m[x, y, 1, 1] = m11
            if want_stats:
                sq = (
                    m00.real * m00.real + m00.imag * m00.imag
                    + m01.real * m01.real + m01.imag * m01.imag
                    + m10.real * m10.real + m10.imag * m10.imag
                    + m11.real * m11.real + m11.imag * m11.imag
                )
                total += sq
                if sq > supsq:
                    supsq = sq
    return total, supsq


@njit(cache=True)
def _stage_pass(mx, my, a, p, m, base_a, base_p, acc_a, acc_p, w, c,
                out_a, out_p, fixed_det, want_stats):
    """Velocity k = (i(dbar m + [a,m]), i[p,m]) fused with the RK4 updates:

        acc += w k,   out = base + c k   (skipped when c == 0).

    Returns sum |k|^2 when want_stats (the gradient-norm tracker).
    """
    N = a.shape[0]
    gn2 = 0.0
    for x in range(N):
        for y in range(N):
            db00 = 0.5 * (mx[x, y, 0, 0] + 1j * my[x, y, 0, 0])
            db01 = 0.5 * (mx[x, y, 0, 1] + 1j * my[x, y, 0, 1])
            db10 = 0.5 * (mx[x, y, 1, 0] + 1j * my[x, y, 1, 0])
            db11 = 0.5 * (mx[x, y, 1, 1] + 1j * my[x, y, 1, 1])
            a00 = a[x, y, 0, 0]
            a01 = a[x, y, 0, 1]
            a10 = a[x, y, 1, 0]
            a11 = a[x, y, 1, 1]
            m00 = m[x, y, 0, 0]
            m01 = m[x, y, 0, 1]
            m10 = m[x, y, 1, 0]
            m11 = m[x, y, 1, 1]
            ka00 = 1j * (db00 + a00 * m00 + a01 * m10 - (m00 * a00 + m01 * a10))
            ka01 = 1j * (db01 + a00 * m01 + a01 * m11 - (m00 * a01 + m01 * a11))
            ka10 = 1j * (db10 + a10 * m00 + a11 * m10 - (m10 * a00 + m11 * a10))
            ka11 = 1j * (db11 + a10 * m01 + a11 * m11 - (m10 * a01 + m11 * a11))
            p00 = p[x, y, 0, 0]
            p01 = p[x, y, 0, 1]
            p10 = p[x, y, 1, 0]
            p11 = p[x, y, 1, 1]
            kp00 = 1j * (p00 * m00 + p01 * m10 - (m00 * p00 + m01 * p10))
            kp01 = 1j * (p00 * m01 + p01 * m11 - (m00 * p01 + m01 * p11))
            kp10 = 1j * (p10 * m00 + p11 * m10 - (m10 * p00 + m11 * p10))
            kp11 = 1j * (p10 * m01 + p11 * m11 - (m10 * p01 + m11 * p11))
            if fixed_det:
                tra = 0.5 * (ka00 + ka11)
                ka00 -= tra
                ka11 -= tra
                trp = 0.5 * (kp00 + kp11)
                kp00 -= trp
                kp11 -= trp
            acc_a[x, y, 0, 0] += w * ka00
            acc_a[x, y, 0, 1] += w * ka01
            acc_a[x, y, 1, 0] += w * ka10
            acc_a[x, y, 1, 1] += w * ka11
            acc_p[x, y, 0, 0] += w * kp00
            acc_p[x, y, 0, 1] += w * kp01
            acc_p[x, y, 1, 0] += w * kp10
            acc_p[x, y, 1, 1] += w * kp11
            if c != 0.0:
                out_a[x, y, 0, 0] = base_a[x, y, 0, 0] + c * ka00
                out_a[x, y, 0, 1] = base_a[x, y, 0, 1] + c * ka01
                out_a[x, y, 1, 0] = base_a[x, y, 1, 0] + c * ka10
                out_a[x, y, 1, 1] = base_a[x, y, 1, 1] + c * ka11
                out_p[x, y, 0, 0] = base_p[x, y, 0, 0] + c * kp00
                out_p[x, y, 0, 1] = base_p[x, y, 0, 1] + c * kp01
                out_p[x, y, 1, 0] = base_p[x, y, 1, 0] + c * kp10
                out_p[x, y, 1, 1] = base_p[x, y, 1, 1] + c * kp11
            if want_stats:
                gn2 += (
                    ka00.real * ka00.real + ka00.imag * ka00.imag
                    + ka01.real * ka01.real + ka01.imag * ka01.imag
                    + ka10.real * ka10.real + ka10.imag * ka10.imag
                    + ka11.real * ka11.real + ka11.imag * ka11.imag
                    + kp00.real * kp00.real + kp00.imag * kp00.imag
                    + kp01.real * kp01.real + kp01.imag * kp01.imag
                    + kp10.real * kp10.real + kp10.imag * kp10.imag
                    + kp11.real * kp11.real + kp11.imag * kp11.imag
                )
    return gn2


@njit(cache=True)
def velocity_r2(Dre, a, p, fixed_det):
    """Flow velocity and diagnostics: (va, vp, m, ymh_sum, sup_sq, gn2_sum)."""
    tbuf = np.empty_like(a)
    m = np.empty_like(a)
    ax = _dx_apply(Dre, a)
    ay = _dy_apply(Dre, a, tbuf)
    ymh_sum, supsq = _mu1_pass(ax, ay, a, p, m, True)
    mx = _dx_apply(Dre, m)
    my = _dy_apply(Dre, m, tbuf)
    acc_a = np.zeros_like(a)
    acc_p = np.zeros_like(a)
    gn2 = _stage_pass(mx, my, a, p, m, a, p, acc_a, acc_p, 1.0, 0.0,
                      tbuf, tbuf, fixed_det, True)
    return acc_a, acc_p, m, ymh_sum, supsq, gn2


@njit(cache=True)
def rk4_pair_step(Dre, a, p, dt, fixed_det):
    """One fused RK4 step; diagnostics at the start state.

    Returns (a_new, p_new, ymh_sum, sup_mu_sq, gn2_sum); the sums are raw
    site sums (multiply by h^2 outside).
    """
    N = a.shape[0]
    tbuf = np.empty_like(a)
    m = np.empty_like(a)
    sa = np.empty_like(a)
    sp = np.empty_like(a)
    sa2 = np.empty_like(a)
    sp2 = np.empty_like(a)
    acc_a = np.zeros_like(a)
    acc_p = np.zeros_like(a)

    # stage 1 (diagnostics here)
    ax = _dx_apply(Dre, a)
    ay = _dy_apply(Dre, a, tbuf)
    ymh_sum, supsq = _mu1_pass(ax, ay, a, p, m, True)
    mx = _dx_apply(Dre, m)
    my = _dy_apply(Dre, m, tbuf)
    gn2 = _stage_pass(mx, my, a, p, m, a, p, acc_a, acc_p, 1.0, 0.5 * dt,
                      sa, sp, fixed_det, True)
    # stage 2
    ax = _dx_apply(Dre, sa)
    ay = _dy_apply(Dre, sa, tbuf)
    _mu1_pass(ax, ay, sa, sp, m, False)
    mx = _dx_apply(Dre, m)
    my = _dy_apply(Dre, m, tbuf)
    _stage_pass(mx, my, sa, sp, m, a, p, acc_a, acc_p, 2.0, 0.5 * dt,
                sa2, sp2, fixed_det, False)
    # stage 3
    ax = _dx_apply(Dre, sa2)
    ay = _dy_apply(Dre, sa2, tbuf)
    _mu1_pass(ax, ay, sa2, sp2, m, False)
    mx = _dx_apply(Dre, m)
    my = _dy_apply(Dre, m, tbuf)
    _stage_pass(mx, my, sa2, sp2, m, a, p, acc_a, acc_p, 2.0, dt,
                sa, sp, fixed_det, False)
    # stage 4
    ax = _dx_apply(Dre, sa)
    ay = _dy_apply(Dre, sa, tbuf)
    _mu1_pass(ax, ay, sa, sp, m, False)
    mx = _dx_apply(Dre, m)
    my = _dy_apply(Dre, m, tbuf)
    _stage_pass(mx, my, sa, sp, m, a, p, acc_a, acc_p, 1.0, 0.0,
                sa2, sp2, fixed_det, False)

    w = dt / 6.0
    an = np.empty_like(a)
    pn = np.empty_like(a)
    for x in range(N):
        for y in range(N):
            for i in range(2):
                for j in range(2):
                    an[x, y, i, j] = a[x, y, i, j] + w * acc_a[x, y, i, j]
                    pn[x, y, i, j] = p[x, y, i, j] + w * acc_p[x, y, i, j]
    return an, pn, ymh_sum, supsq, gn2


@njit(cache=True)
def euler_pair_step(Dre, a, p, dt, fixed_det):
    va, vp, _, ymh_sum, supsq, gn2 = velocity_r2(Dre, a, p, fixed_det)
    return a + dt * va, p + dt * vp, ymh_sum, supsq, gn2


# --- Simpson metric flow ---------------------------------------------------------


@njit(cache=True)
def _simpson_rhs_r2(Dre, a0, p0, m0, hfield, rhs, tbuf):
    """RHS of dh/dt = -2i h (Lam F_H - lambda id), lambda = (1/2) tr Lam F_H
    pointwise, rank 2.  Returns (sum |LamF_perp|^2, max site |LamF_perp|^2)."""
    N = a0.shape[0]
    hx = _dx_apply(Dre, hfield)
    hy = _dy_apply(Dre, hfield, tbuf)
    w = np.empty_like(hfield)
    for x in range(N):
        for y in range(N):
            d00 = 0.5 * (hx[x, y, 0, 0] - 1j * hy[x, y, 0, 0])
            d01 = 0.5 * (hx[x, y, 0, 1] - 1j * hy[x, y, 0, 1])
            d10 = 0.5 * (hx[x, y, 1, 0] - 1j * hy[x, y, 1, 0])
            d11 = 0.5 * (hx[x, y, 1, 1] - 1j * hy[x, y, 1, 1])
            b00 = np.conj(a0[x, y, 0, 0])
            b01 = np.conj(a0[x, y, 1, 0])
            b10 = np.conj(a0[x, y, 0, 1])
            b11 = np.conj(a0[x, y, 1, 1])
            h00 = hfield[x, y, 0, 0]
            h01 = hfield[x, y, 0, 1]
            h10 = hfield[x, y, 1, 0]
            h11 = hfield[x, y, 1, 1]
            t00 = d00 - (b00 * h00 + b01 * h10 - (h00 * b00 + h01 * b10))
            t01 = d01 - (b00 * h01 + b01 * h11 - (h00 * b01 + h01 * b11))
            t10 = d10 - (b10 * h00 + b11 * h10 - (h10 * b00 + h11 * b10))
            t11 = d11 - (b10 * h01 + b11 * h11 - (h10 * b01 + h11 * b11))
            det = h00 * h11 - h01 * h10
            i00 = h11 / det
            i01 = -h01 / det
            i10 = -h10 / det
            i11 = h00 / det
            w[x, y, 0, 0] = i00 * t00 + i01 * t10
            w[x, y, 0, 1] = i00 * t01 + i01 * t11
            w[x, y, 1, 0] = i10 * t00 + i11 * t10
            w[x, y, 1, 1] = i10 * t01 + i11 * t11
    wx = _dx_apply(Dre, w)
    wy = _dy_apply(Dre, w, tbuf)
    total = 0.0
    supsq = 0.0
    for x in range(N):
        for y in range(N):
            e00 = 0.5 * (wx[x, y, 0, 0] + 1j * wy[x, y, 0, 0])
            e01 = 0.5 * (wx[x, y, 0, 1] + 1j * wy[x, y, 0, 1])
            e10 = 0.5 * (wx[x, y, 1, 0] + 1j * wy[x, y, 1, 0])
            e11 = 0.5 * (wx[x, y, 1, 1] + 1j * wy[x, y, 1, 1])
            a00 = a0[x, y, 0, 0]
            a01 = a0[x, y, 0, 1]
            a10 = a0[x, y, 1, 0]
            a11 = a0[x, y, 1, 1]
            w00 = w[x, y, 0, 0]
            w01 = w[x, y, 0, 1]
            w10 = w[x, y, 1, 0]
            w11 = w[x, y, 1, 1]
            e00 += a00 * w00 + a01 * w10 - (w00 * a00 + w01 * a10)
            e01 += a00 * w01 + a01 * w11 - (w00 * a01 + w01 * a11)
            e10 += a10 * w00 + a11 * w10 - (w10 * a00 + w11 * a10)
            e11 += a10 * w01 + a11 * w11 - (w10 * a01 + w11 * a11)
            h00 = hfield[x, y, 0, 0]
            h01 = hfield[x, y, 0, 1]
            h10 = hfield[x, y, 1, 0]
            h11 = hfield[x, y, 1, 1]
            det = h00 * h11 - h01 * h10
            i00 = h11 / det
            i01 = -h01 / det
            i10 = -h10 / det
            i11 = h00 / det
            g00 = np.conj(p0[x, y, 0, 0])
            g01 = np.conj(p0[x, y, 1, 0])
            g10 = np.conj(p0[x, y, 0, 1])
            g11 = np.conj(p0[x, y, 1, 1])
            u00 = g00 * h00 + g01 * h10
            u01 = g00 * h01 + g01 * h11
            u10 = g10 * h00 + g11 * h10
            u11 = g10 * h01 + g11 * h11
            q00 = i00 * u00 + i01 * u10
            q01 = i00 * u01 + i01 * u11
            q10 = i10 * u00 + i11 * u10
            q11 = i10 * u01 + i11 * u11
            p00 = p0[x, y, 0, 0]
            p01 = p0[x, y, 0, 1]
            p10 = p0[x, y, 1, 0]
            p11 = p0[x, y, 1, 1]
            f00 = p00 * q00 + p01 * q10 - (q00 * p00 + q01 * p10)
            f01 = p00 * q01 + p01 * q11 - (q00 * p01 + q01 * p11)
            f10 = p10 * q00 + p11 * q10 - (q10 * p00 + q11 * p10)
            f11 = p10 * q01 + p11 * q11 - (q10 * p01 + q11 * p11)
            L00 = m0[x, y, 0, 0] + 2j * e00 - 2j * f00
            L01 = m0[x, y, 0, 1] + 2j * e01 - 2j * f01
            L10 = m0[x, y, 1, 0] + 2j * e10 - 2j * f10
            L11 = m0[x, y, 1, 1] + 2j * e11 - 2j * f11
            lam = 0.5 * (L00 + L11)
            L00 -= lam
            L11 -= lam
            rhs[x, y, 0, 0] = -2j * (h00 * L00 + h01 * L10)
            rhs[x, y, 0, 1] = -2j * (h00 * L01 + h01 * L11)
            rhs[x, y, 1, 0] = -2j * (h10 * L00 + h11 * L10)
            rhs[x, y, 1, 1] = -2j * (h10 * L01 + h11 * L11)
            sq = (
                L00.real * L00.real + L00.imag * L00.imag
                + L01.real * L01.real + L01.imag * L01.imag
                + L10.real * L10.real + L10.imag * L10.imag
                + L11.real * L11.real + L11.imag * L11.imag
            )
            total += sq
            if sq > supsq:
                supsq = sq
    return total, supsq


@njit(cache=True)
def rk4_metric_step(Dre, a0, p0, m0, hfield, dt):
    """RK4 step of the metric flow (pointwise-lambda mode), r = 2.

    Re-Hermitizes h after the step.  Returns (h_new, sup_perp_sq, min_eig).
    """
    N = hfield.shape[0]
    tbuf = np.empty_like(hfield)
    k1 = np.empty_like(hfield)
    k2 = np.empty_like(hfield)
    k3 = np.empty_like(hfield)
    k4 = np.empty_like(hfield)
    _, supsq = _simpson_rhs_r2(Dre, a0, p0, m0, hfield, k1, tbuf)
    _simpson_rhs_r2(Dre, a0, p0, m0, hfield + (0.5 * dt) * k1, k2, tbuf)
    _simpson_rhs_r2(Dre, a0, p0, m0, hfield + (0.5 * dt) * k2, k3, tbuf)
    _simpson_rhs_r2(Dre, a0, p0, m0, hfield + dt * k3, k4, tbuf)
    hn = hfield + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    mineig = 1e300
    for x in range(N):
        for y in range(N):
            h00 = 0.5 * (hn[x, y, 0, 0] + np.conj(hn[x, y, 0, 0]))
            h11 = 0.5 * (hn[x, y, 1, 1] + np.conj(hn[x, y, 1, 1]))
            h01 = 0.5 * (hn[x, y, 0, 1] + np.conj(hn[x, y, 1, 0]))
            hn[x, y, 0, 0] = h00
            hn[x, y, 1, 1] = h11
            hn[x, y, 0, 1] = h01
            hn[x, y, 1, 0] = np.conj(h01)
            tr = h00.real + h11.real
            dtm = h00.real * h11.real - (h01.real * h01.real + h01.imag * h01.imag)
            disc = tr * tr - 4.0 * dtm
            if disc < 0.0:
                disc = 0.0
            lo = 0.5 * (tr - np.sqrt(disc))
            if lo < mineig:
                mineig = lo
    return hn, supsq, mineig
