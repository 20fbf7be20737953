"""Time integration of the three flow formulations and the equivalence harness.

Three realizations of the same continuum evolution:

1. direct gradient flow of YMH on pairs (``run_gradient_flow``),
2. the metric heat flow  h^-1 dh/dt = -2i (Lam F_H - lambda id)  on Hermitian
   metrics H = H_0 h over a frozen base pair (``run_simpson_heat``),
3. the composition  (A'', phi)(t) = (g(t) S(t)^-1) . (A_0'', phi_0)  with
   g = h^-1/2 and S solving  dS/dt = S (alpha - i lambda id), S(0) = id.

``compare_flows`` runs (1) against (2)+(3) and reports the discrepancy of
gauge-invariant observables at matched times.

lambda convention: with lambda = (1/r) tr(Lam F_H) pointwise (which makes
Lam F_H^perp pointwise trace-free), lambda is purely imaginary, so the
-i lambda id term in the S-equation is a *real scalar* field.  S therefore
splits exactly as S = e^sigma U with U unitary and sigma a real scalar
quadrature; the code integrates the two factors separately.  In the fixed
determinant case lambda vanishes identically and S = U.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .errors import BlowUpError, PositivityError
from .fields import (
    HiggsPair,
    _adj,
    _comm,
    _traceless,
    apply_gauge,
    higgs_residual_field_raw,
    star_curvature_raw,
    star_mu1_raw,
    velocity_raw,
)
from .geometry import (
    FormDegree,
    MatrixField,
    TorusGrid,
    dbar_raw,
    d_prime_raw,
    l2_inner_raw,
    l2_norm_raw,
    sup_norm,
)

BLOWUP_THRESHOLD = 1e12
ENERGY_METRIC_FACTOR = 8.0  # dYMH/dt = -8 (l2(va)+l2(vp)) along the flow
RK4_STABILITY = 2.785       # real-axis stability interval of classical RK4
STABILITY_SAFETY = 0.9


def cfl_dt(grid: TorusGrid, c_cfl: float, sup: float) -> float:
    """dt = c_cfl h^2 / (1 + sup|*mu1|), capped by the integrator stability
    ceiling of the backend's Laplacian (2 sigma_max^2); the centered stencil
    sits far below the cap at the default c_cfl, the spectral backend is
    stiffer and is governed by the cap."""
    lam_max = 2.0 * grid.derivative_sigma_max() ** 2
    ceiling = STABILITY_SAFETY * RK4_STABILITY / lam_max
    return min(c_cfl * grid.h ** 2, ceiling) / (1.0 + sup)


@dataclass
class FlowConfig:
    c_cfl: float = 0.2          # dt = c_cfl h^2 / (1 + sup|*mu1|)
    T_max: float = 10.0
    integrator: str = "rk4"     # "rk4" | "euler"
    tol_grad: float = 1e-6
    snapshot_every: int = 50    # observable record cadence, in steps
    snapshot_growth: float = 1.5  # geometric spacing of state snapshots after t=1
    lambda_mode: str = "pointwise"  # "pointwise" | "mean" (metric flow only)
    max_steps: int = 20_000_000
    # near an unstable critical set the lattice flow eventually slides off;
    # with track_grad_min the run returns the state of smallest gradient once
    # the gradient has risen uptick_factor above its running minimum
    track_grad_min: bool = False
    uptick_factor: float = 10.0

    def __post_init__(self):
        if self.c_cfl <= 0 or self.T_max < 0:
            raise ValueError("c_cfl must be positive and T_max non-negative")
        if self.integrator not in ("rk4", "euler"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.lambda_mode not in ("pointwise", "mean"):
            raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}")


@dataclass
class Trajectory:
    """Time series of observables plus sparse state snapshots."""

    times: np.ndarray
    ymh: np.ndarray
    qh: np.ndarray
    grad_norm: np.ndarray
    sup_mu: np.ndarray
    higgs_residual: np.ndarray
    tr_phi: np.ndarray          # (n_records, r) complex spatial means
    tr_phi_drift: np.ndarray    # (n_records, r) max pointwise |tr phi^k(t)-tr phi^k(0)|
    convex: np.ndarray          # (n_records, r) convex invariants H_1..H_r
    energy_integral: np.ndarray  # cumulative int 8 ||grad||^2 dt at record times
    # per-step monitors (every accepted step)
    step_t: np.ndarray
    step_ymh: np.ndarray
    step_sup: np.ndarray
    step_grad: np.ndarray
    step_dt: np.ndarray
    snapshots: list = dc_field(default_factory=list)  # [(t, HiggsPair)]
    status: str = "running"     # "converged" | "timeout" | "aborted"
    t_final: float = 0.0
    final_pair: HiggsPair | None = None
    n_steps: int = 0

    def ymh_violations(self, rel: float = 1e-12) -> int:
        y = self.step_ymh
        return int(np.sum(y[1:] > y[:-1] + rel * np.maximum(1.0, y[:-1])))

    def sup_violations(self, rel: float = 1e-8) -> int:
        s = self.step_sup
        return int(np.sum(s[1:] > s[:-1] + rel * np.maximum(1.0, s[:-1])))

    def energy_identity_error(self) -> float:
        """Relative error of YMH(0) - YMH(T) = int 8 ||grad||^2 dt."""
        drop = self.step_ymh[0] - self.step_ymh[-1]
        if drop <= 0:
            return 0.0
        return abs(self.energy_integral[-1] - drop) / drop


def _tr_powers(p: np.ndarray, r: int) -> np.ndarray:
    """Pointwise tr(phi^k), k = 1..r, stacked as (r, N, N) complex."""
    out = np.empty((r,) + p.shape[:2], dtype=np.complex128)
    acc = p
    out[0] = np.einsum("xyii->xy", acc)
    for k in range(1, r):
        acc = acc @ p
        out[k] = np.einsum("xyii->xy", acc)
    return out


def _convex_invariants(grid: TorusGrid, m: np.ndarray) -> np.ndarray:
    """H_k = int (sum of top-k eigenvalues of i*mu1) dvol, k = 1..r."""
    ev = np.linalg.eigvalsh(1j * m)[..., ::-1]  # descending
    csum = np.cumsum(ev, axis=-1)
    h2 = grid.h * grid.h
    return csum.sum(axis=(0, 1)) * h2


def step_gradient_flow(pair: HiggsPair, dt: float, integrator: str = "rk4") -> HiggsPair:
    """One explicit integrator step of the gradient flow (numpy reference)."""
    grid = pair.grid
    a, p = pair.a2.data, pair.phi.data
    a2, p2 = _step_pair_numpy(grid, a, p, dt, pair.fixed_det, integrator)[:2]
    if not (np.all(np.isfinite(a2.view(np.float64))) and sup_norm(a2) < BLOWUP_THRESHOLD):
        raise BlowUpError("gradient-flow step produced NaN/blow-up", last_state=pair)
    return HiggsPair.from_arrays(grid, a2, p2, pair.fixed_det)


def _step_pair_numpy(grid, a, p, dt, fixed_det, integrator):
    k1a, k1p, m = velocity_raw(grid, a, p, fixed_det)
    h2 = grid.h * grid.h
    ymh = l2_inner_raw(grid, m, m)
    sup = sup_norm(m)
    gn = math.sqrt(l2_inner_raw(grid, k1a, k1a) + l2_inner_raw(grid, k1p, k1p))
    if integrator == "euler":
        an, pn = a + dt * k1a, p + dt * k1p
    else:
        k2a, k2p, _ = velocity_raw(grid, a + 0.5 * dt * k1a, p + 0.5 * dt * k1p, fixed_det)
        k3a, k3p, _ = velocity_raw(grid, a + 0.5 * dt * k2a, p + 0.5 * dt * k2p, fixed_det)
        k4a, k4p, _ = velocity_raw(grid, a + dt * k3a, p + dt * k3p, fixed_det)
        an = a + dt / 6.0 * (k1a + 2 * k2a + 2 * k3a + k4a)
        pn = p + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    return an, pn, ymh, sup, gn


def _use_kernels(grid: TorusGrid, r: int) -> bool:
    return _kernels.NUMBA_AVAILABLE and r == 2


def _step_dispatch(grid, Dre, a, p, dt, fixed_det, integrator, fast):
    """Step + (ymh, sup, grad) diagnostics at the *start* state."""
    if fast:
        h2 = grid.h * grid.h
        if integrator == "euler":
            an, pn, ysum, supsq, gn2 = _kernels.euler_pair_step(Dre, a, p, dt, fixed_det)
        else:
            an, pn, ysum, supsq, gn2 = _kernels.rk4_pair_step(Dre, a, p, dt, fixed_det)
        return an, pn, ysum * h2, math.sqrt(supsq), math.sqrt(gn2 * h2)
    return _step_pair_numpy(grid, a, p, dt, fixed_det, integrator)


def run_gradient_flow(p0: HiggsPair, cfg: FlowConfig) -> Trajectory:
    """Integrate the gradient flow until grad_norm <= tol_grad or T_max.

    dt follows the CFL rule with the most recent measured sup|*mu1| (one step
    lagged; sup is non-increasing along the flow, so the lag is conservative).
    Step diagnostics (ymh, sup, grad at the pre-step state) come from the
    stage-1 velocity of the integrator at no extra cost.
    """
    grid = p0.grid
    r = p0.r
    a = p0.a2.data.copy()
    p = p0.phi.data.copy()
    fast = _use_kernels(grid, r) and cfg.integrator in ("rk4", "euler")
    Dre = np.ascontiguousarray(grid.derivative_matrix())
    h2 = grid.h * grid.h

    tr0 = _tr_powers(p, r)
    times, obs = [], {k: [] for k in (
        "ymh", "qh", "grad", "sup", "resid", "trphi", "trdrift", "convex", "energy")}
    step_t, step_ymh, step_sup, step_grad, step_dt = [], [], [], [], []
    snapshots = []
    energy_acc = 0.0

    def record(t, a, p, ymh_val, sup_val, gn_val):
        m = star_mu1_raw(grid, a, p)
        cfield = 2j * higgs_residual_field_raw(grid, a, p)
        trp = _tr_powers(p, r)
        times.append(t)
        obs["ymh"].append(ymh_val)
        obs["qh"].append(ymh_val + l2_inner_raw(grid, cfield, cfield))
        obs["grad"].append(gn_val)
        obs["sup"].append(sup_val)
        obs["resid"].append(0.5 * l2_norm_raw(grid, cfield))
        obs["trphi"].append(trp.mean(axis=(1, 2)))
        obs["trdrift"].append(np.abs(trp - tr0).max(axis=(1, 2)))
        obs["convex"].append(_convex_invariants(grid, m))
        obs["energy"].append(energy_acc)

    # initial sup|*mu1| seeds the first CFL step
    _, _, m0 = velocity_raw(grid, a, p, p0.fixed_det)
    sup_prev = sup_norm(m0)
    snapshots.append((0.0, HiggsPair.from_arrays(grid, a.copy(), p.copy(), p0.fixed_det)))

    t = 0.0
    step = 0
    status = "timeout"
    next_snap = 1.0
    gn_prev = None
    dt_prev = 0.0
    best = None  # (gn, t, a, p) when track_grad_min
    while True:
        dt = cfl_dt(grid, cfg.c_cfl, sup_prev)
        dt = min(dt, max(cfg.T_max - t, 1e-300))
        a_new, p_new, ymh_val, sup_val, gn = _step_dispatch(
            grid, Dre, a, p, dt, p0.fixed_det, cfg.integrator, fast)
        if not math.isfinite(ymh_val) or sup_val > BLOWUP_THRESHOLD:
            last = snapshots[-1][1]
            raise BlowUpError(f"flow blow-up at t={t:.6g}", last_state=last, t=t)
        step_t.append(t)
        step_ymh.append(ymh_val)
        step_sup.append(sup_val)
        step_grad.append(gn)
        step_dt.append(dt)
        if gn_prev is not None:
            energy_acc += dt_prev * 0.5 * ENERGY_METRIC_FACTOR * (gn_prev ** 2 + gn ** 2)
        if step % cfg.snapshot_every == 0:
            record(t, a, p, ymh_val, sup_val, gn)
        if t >= next_snap:
            snapshots.append((t, HiggsPair.from_arrays(grid, a.copy(), p.copy(), p0.fixed_det)))
            next_snap = max(next_snap * cfg.snapshot_growth, t * cfg.snapshot_growth)
        if cfg.track_grad_min:
            if best is None or gn < 0.95 * best[0]:
                best = (gn, t, a.copy(), p.copy())
            elif gn > cfg.uptick_factor * best[0]:
                status = "grad_min"
                gn, t, a, p = best[0], best[1], best[2], best[3]
                break
        if gn <= cfg.tol_grad:
            status = "converged"
            break
        if t >= cfg.T_max or step >= cfg.max_steps:
            if cfg.track_grad_min and best is not None and best[0] < gn:
                status = "grad_min"
                gn, t, a, p = best[0], best[1], best[2], best[3]
            else:
                status = "timeout"
            break
        a, p = a_new, p_new
        t += dt
        step += 1
        sup_prev = sup_val
        gn_prev = gn
        dt_prev = dt

    final_pair = HiggsPair.from_arrays(grid, a, p, p0.fixed_det)
    if status == "grad_min":
        # refresh diagnostics at the restored state, drop the escape tail
        va_, vp_, m_ = velocity_raw(grid, a, p, p0.fixed_det)
        ymh_val = l2_inner_raw(grid, m_, m_)
        sup_val = sup_norm(m_)
        gn = math.sqrt(l2_inner_raw(grid, va_, va_) + l2_inner_raw(grid, vp_, vp_))
        keep = [i for i, tv in enumerate(times) if tv <= t]
        for key in obs:
            obs[key] = [obs[key][i] for i in keep]
        times = [times[i] for i in keep]
        nstep = int(np.searchsorted(np.array(step_t), t, side="right"))
        step_t, step_ymh = step_t[:nstep], step_ymh[:nstep]
        step_sup, step_grad, step_dt = step_sup[:nstep], step_grad[:nstep], step_dt[:nstep]
        snapshots = [(tv, s) for tv, s in snapshots if tv <= t]
    if not times or times[-1] != t:
        record(t, a, p, ymh_val, sup_val, gn)
    snapshots.append((t, final_pair))
    return Trajectory(
        times=np.array(times),
        ymh=np.array(obs["ymh"]),
        qh=np.array(obs["qh"]),
        grad_norm=np.array(obs["grad"]),
        sup_mu=np.array(obs["sup"]),
        higgs_residual=np.array(obs["resid"]),
        tr_phi=np.array(obs["trphi"]),
        tr_phi_drift=np.array(obs["trdrift"]),
        convex=np.array(obs["convex"]),
        energy_integral=np.array(obs["energy"]),
        step_t=np.array(step_t),
        step_ymh=np.array(step_ymh),
        step_sup=np.array(step_sup),
        step_grad=np.array(step_grad),
        step_dt=np.array(step_dt if step_dt else [0.0]),
        snapshots=snapshots,
        status=status,
        t_final=t,
        final_pair=final_pair,
        n_steps=step,
    )


# --- Simpson metric heat flow -------------------------------------------------


@dataclass
class HermitianMetric:
    """State of the metric flow: H = H_0 h over a frozen base pair, H_0 = id."""

    base: HiggsPair
    h: MatrixField

    def __post_init__(self):
        if self.h.degree is not FormDegree.ZERO:
            raise ValueError("metric h must be a 0-form field")
        w = np.linalg.eigvalsh(self.h.data)
        if w[..., 0].min() <= 0:
            raise PositivityError(f"metric not positive definite (min eig {w[..., 0].min():.3e})")

    @classmethod
    def identity(cls, base: HiggsPair) -> "HermitianMetric":
        eye = np.zeros((base.grid.N, base.grid.N, base.r, base.r), np.complex128)
        eye[..., np.arange(base.r), np.arange(base.r)] = 1.0
        return cls(base, MatrixField(base.grid, FormDegree.ZERO, eye))


def lambda_f_h(grid: TorusGrid, a0, p0, m0, h) -> np.ndarray:
    """Lam F_H for metric h over the frozen base, dx^dy coefficient field."""
    hinv = np.linalg.inv(h)
    dph = d_prime_raw(grid, h) - _comm(_adj(a0), h)
    w = hinv @ dph
    dppw = dbar_raw(grid, w) + _comm(a0, w)
    q = hinv @ _adj(p0) @ h
    return m0 + 2j * dppw - 2j * _comm(p0, q)


def simpson_rhs(grid: TorusGrid, a0, p0, m0, h, lambda_mode="pointwise"):
    """dh/dt and the trace-free curvature Lam F_H^perp (numpy reference)."""
    lam_full = lambda_f_h(grid, a0, p0, m0, h)
    r = h.shape[-1]
    if lambda_mode == "pointwise":
        lam = np.einsum("xyii->xy", lam_full) / r
    else:  # spatial-mean constant; same balancing integral, constant in x
        lam = np.full(h.shape[:2], np.einsum("xyii->", lam_full) * grid.h ** 2 / (r * grid.volume))
    perp = lam_full.copy()
    perp[..., np.arange(r), np.arange(r)] -= lam[..., None]
    rhs = -2j * (h @ perp)
    return rhs, perp, lam


def step_simpson_heat(metric: HermitianMetric, dt: float,
                      lambda_mode: str = "pointwise") -> HermitianMetric:
    """One RK4 step of the metric flow; Hermiticity and positivity re-imposed."""
    grid = metric.base.grid
    a0, p0 = metric.base.a2.data, metric.base.phi.data
    m0 = star_curvature_raw(grid, a0)
    h = metric.h.data
    k1 = simpson_rhs(grid, a0, p0, m0, h, lambda_mode)[0]
    k2 = simpson_rhs(grid, a0, p0, m0, h + 0.5 * dt * k1, lambda_mode)[0]
    k3 = simpson_rhs(grid, a0, p0, m0, h + 0.5 * dt * k2, lambda_mode)[0]
    k4 = simpson_rhs(grid, a0, p0, m0, h + dt * k3, lambda_mode)[0]
    hn = h + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    hn = 0.5 * (hn + _adj(hn))
    w = np.linalg.eigvalsh(hn)
    if w[..., 0].min() <= 0:
        raise PositivityError("metric flow lost positivity (dt too large)")
    return HermitianMetric(metric.base, MatrixField(grid, FormDegree.ZERO, hn))


def hermitian_inv_sqrt(h: np.ndarray) -> np.ndarray:
    """Pointwise Hermitian positive h^{-1/2} via eigendecomposition."""
    w, v = np.linalg.eigh(h)
    if w[..., 0].min() <= 0:
        raise PositivityError("h^{-1/2} of a non-positive metric")
    return (v * (w[..., None, :] ** -0.5)) @ _adj(v)


def reconstruct_pair(metric: HermitianMetric):
    """g = h^{-1/2} and the transported pair g . (A_0'', phi_0).

    alpha(t) is reconstructed from consecutive g snapshots with
    ``alpha_centered``; a full series comes from ``run_simpson_heat``.
    """
    g = hermitian_inv_sqrt(metric.h.data)
    pair = apply_gauge(g, metric.base)
    return pair, g


def alpha_centered(g_prev: np.ndarray, g_next: np.ndarray, two_dt: float,
                   g_mid: np.ndarray) -> np.ndarray:
    """alpha = (1/2)(g^-1 g_dot - g_dot g^-1) by centered time differences."""
    gdot = (g_next - g_prev) / two_dt
    gi = np.linalg.inv(g_mid)
    al = 0.5 * (gi @ gdot - gdot @ gi)
    return 0.5 * (al - _adj(al))  # exact skew projection kills roundoff


def _polar_unitary(S: np.ndarray):
    u, _, vh = np.linalg.svd(S)
    U = u @ vh
    drift = float(np.abs(S @ _adj(S) - np.eye(S.shape[-1])).max())
    return U, drift


def gauge_fix_ode(alpha_series, lambda_series=None, dt: float = 1.0):
    """Integrate dS/dt = S (alpha - i lambda id), S(0) = id, on a uniform grid.

    alpha_series: list of skew-Hermitian (N,N,r,r) fields at times k*dt.
    lambda_series: optional list of (N,N) complex scalar fields (the pointwise
    lambda); with the pointwise-trace convention -i lambda is real, so it
    contributes a positive scalar factor e^sigma.

    Returns (U_series, sigma_series, max_unitarity_drift): S_k = e^{sigma_k} U_k.
    RK4 on linearly interpolated alpha; U re-projected to unitary each step.
    """
    n = len(alpha_series)
    r = alpha_series[0].shape[-1]
    shape = alpha_series[0].shape[:2]
    U = np.zeros(alpha_series[0].shape, np.complex128)
    U[..., np.arange(r), np.arange(r)] = 1.0
    sigma = np.zeros(shape)
    U_series = [U.copy()]
    sigma_series = [sigma.copy()]
    max_drift = 0.0
    for k in range(n - 1):
        a0_, a1_ = alpha_series[k], alpha_series[k + 1]
        amid = 0.5 * (a0_ + a1_)
        k1 = U @ a0_
        k2 = (U + 0.5 * dt * k1) @ amid
        k3 = (U + 0.5 * dt * k2) @ amid
        k4 = (U + dt * k3) @ a1_
        U = U + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        U, drift = _polar_unitary(U)
        max_drift = max(max_drift, drift)
        if lambda_series is not None:
            c0 = np.real(-1j * lambda_series[k])
            c1 = np.real(-1j * lambda_series[k + 1])
            sigma = sigma + 0.5 * dt * (c0 + c1)
        U_series.append(U.copy())
        sigma_series.append(sigma.copy())
    return U_series, sigma_series, max_drift


@dataclass
class MetricTrajectory:
    times: np.ndarray
    sup_perp: np.ndarray
    min_eig: np.ndarray
    det_drift: np.ndarray
    metric: HermitianMetric
    g_series: list          # g = h^{-1/2} at stride times
    lambda_series: list     # pointwise lambda at stride times
    stride_dt: float
    status: str


def run_simpson_heat(base: HiggsPair, cfg: FlowConfig, T: float,
                     dt: float | None = None, stride: int = 20) -> MetricTrajectory:
    """Integrate the metric flow to time T with fixed dt, collecting g and
    lambda at stride multiples (for the gauge-fixing ODE)."""
    grid = base.grid
    r = base.r
    a0, p0 = base.a2.data, base.phi.data
    m0 = star_curvature_raw(grid, a0)
    h2 = grid.h * grid.h
    hcur = np.zeros((grid.N, grid.N, r, r), np.complex128)
    hcur[..., np.arange(r), np.arange(r)] = 1.0

    if dt is None:
        _, perp, _ = simpson_rhs(grid, a0, p0, m0, hcur, cfg.lambda_mode)
        dt = cfl_dt(grid, cfg.c_cfl, sup_norm(perp))
    n_steps = int(math.ceil(T / dt / stride)) * stride
    dt = T / n_steps

    fast = _use_kernels(grid, r) and cfg.lambda_mode == "pointwise"
    Dre = np.ascontiguousarray(grid.derivative_matrix())

    times, sup_perp, min_eig, det_drift = [], [], [], []
    g_series, lam_series = [], []

    def at_stride(t, h):
        g_series.append(hermitian_inv_sqrt(h))
        lam_full = lambda_f_h(grid, a0, p0, m0, h)
        if cfg.lambda_mode == "pointwise":
            lam = np.einsum("xyii->xy", lam_full) / r
        else:
            lam = np.full(h.shape[:2],
                          np.einsum("xyii->", lam_full) * h2 / (r * grid.volume))
        lam_series.append(lam)
        times.append(t)
        w = np.linalg.eigvalsh(h)
        min_eig.append(float(w[..., 0].min()))
        det_drift.append(float(np.abs(np.linalg.det(h) - 1.0).max())
                         if cfg.lambda_mode == "pointwise" else 0.0)
        perp = lam_full.copy()
        perp[..., np.arange(r), np.arange(r)] -= lam[..., None]
        sup_perp.append(sup_norm(perp))

    at_stride(0.0, hcur)
    t = 0.0
    for step in range(n_steps):
        if fast:
            hcur, supsq, lo = _kernels.rk4_metric_step(Dre, a0, p0, m0, hcur, dt)
            if lo <= 0:
                raise PositivityError(f"metric flow lost positivity at t={t:.4g}")
        else:
            k1 = simpson_rhs(grid, a0, p0, m0, hcur, cfg.lambda_mode)[0]
            k2 = simpson_rhs(grid, a0, p0, m0, hcur + 0.5 * dt * k1, cfg.lambda_mode)[0]
            k3 = simpson_rhs(grid, a0, p0, m0, hcur + 0.5 * dt * k2, cfg.lambda_mode)[0]
            k4 = simpson_rhs(grid, a0, p0, m0, hcur + dt * k3, cfg.lambda_mode)[0]
            hcur = hcur + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            hcur = 0.5 * (hcur + _adj(hcur))
            w = np.linalg.eigvalsh(hcur)
            if w[..., 0].min() <= 0:
                raise PositivityError(f"metric flow lost positivity at t={t:.4g}")
        t = (step + 1) * dt
        if (step + 1) % stride == 0:
            at_stride(t, hcur)

    metric = HermitianMetric(base, MatrixField(grid, FormDegree.ZERO, hcur))
    return MetricTrajectory(
        times=np.array(times), sup_perp=np.array(sup_perp),
        min_eig=np.array(min_eig), det_drift=np.array(det_drift),
        metric=metric, g_series=g_series, lambda_series=lam_series,
        stride_dt=dt * stride, status="done",
    )


# --- equivalence harness ------------------------------------------------------


@dataclass
class EquivalenceReport:
    times: np.ndarray
    ymh_direct: np.ndarray
    ymh_composed: np.ndarray
    eig_l2_diff: np.ndarray     # L2 norm of sorted-eigenvalue field difference
    tr_phi_maxdiff: np.ndarray  # (n_times, r) pointwise max difference
    max_discrepancy: float
    unitarity_drift: float
    sqrt_choice_diff: float | None
    dt: float
    status: str

    def to_dict(self):
        return {
            "times": self.times.tolist(),
            "ymh_direct": self.ymh_direct.tolist(),
            "ymh_composed": self.ymh_composed.tolist(),
            "eig_l2_diff": self.eig_l2_diff.tolist(),
            "tr_phi_maxdiff": self.tr_phi_maxdiff.tolist(),
            "max_discrepancy": self.max_discrepancy,
            "unitarity_drift": self.unitarity_drift,
            "sqrt_choice_diff": self.sqrt_choice_diff,
            "dt": self.dt,
            "status": self.status,
        }


def _pair_observables(grid, a, p, r):
    m = star_mu1_raw(grid, a, p)
    ymh_val = l2_inner_raw(grid, m, m)
    ev = np.linalg.eigvalsh(1j * m)[..., ::-1]
    trp = _tr_powers(p, r)
    return ymh_val, ev, trp


def compose_pair(base: HiggsPair, g: np.ndarray, U: np.ndarray,
                 sigma: np.ndarray) -> HiggsPair:
    """(g S^-1) . base with S = e^sigma U: one gauge action by w = e^-sigma g U^H."""
    w = np.exp(-sigma)[..., None, None] * (g @ _adj(U))
    return apply_gauge(w, base)


def compare_flows(p0: HiggsPair, cfg: FlowConfig, T: float = 1.0,
                  n_compare: int = 8, stride: int = 20,
                  dt: float | None = None,
                  sqrt_choice_unitary: np.ndarray | None = None) -> EquivalenceReport:
    """Run the direct gradient flow and the metric-flow composition to time T
    and compare gauge-invariant observables at matched times.

    Both flows use the same fixed dt (the CFL value at t = 0, conservative
    since sup|*mu1| is non-increasing), so comparison times match exactly.
    If ``sqrt_choice_unitary`` is given, the composition is repeated with the
    square-root choice g -> g u and the final composed pairs are compared
    (the uniqueness check).
    """
    grid = p0.grid
    r = p0.r
    h2 = grid.h * grid.h
    a0, p0d = p0.a2.data, p0.phi.data
    if dt is None:
        m = star_mu1_raw(grid, a0, p0d)
        dt = cfl_dt(grid, cfg.c_cfl, sup_norm(m))
    # step count divisible by n_compare * stride so snapshots align
    block = n_compare * stride
    n_steps = int(math.ceil(T / (dt * block))) * block
    dt = T / n_steps
    per_cmp = n_steps // n_compare

    # direct flow with fixed dt
    fast = _use_kernels(grid, r)
    Dre = np.ascontiguousarray(grid.derivative_matrix())
    a, p = a0.copy(), p0d.copy()
    direct = {}
    for step in range(n_steps):
        if fast:
            a, p, *_ = _kernels.rk4_pair_step(Dre, a, p, dt, p0.fixed_det)
        else:
            a, p, *_ = _step_pair_numpy(grid, a, p, dt, p0.fixed_det, "rk4")
        if (step + 1) % per_cmp == 0:
            direct[step + 1] = _pair_observables(grid, a, p, r)

    # metric flow + gauge-fixing composition
    mt = run_simpson_heat(p0, cfg, T, dt=dt, stride=stride)
    n_str = len(mt.g_series)
    dtS = mt.stride_dt
    alphas = []
    for k in range(n_str):
        if 0 < k < n_str - 1:
            al = alpha_centered(mt.g_series[k - 1], mt.g_series[k + 1], 2 * dtS, mt.g_series[k])
        elif k == 0:
            al = alpha_centered(mt.g_series[0], mt.g_series[1], dtS, mt.g_series[0])
        else:
            al = alpha_centered(mt.g_series[k - 1], mt.g_series[k], dtS, mt.g_series[k])
        alphas.append(al)
    U_series, sigma_series, drift = gauge_fix_ode(alphas, mt.lambda_series, dtS)

    times, ymh_d, ymh_c, eig_diff, trp_diff = [], [], [], [], []
    strides_per_cmp = per_cmp // stride
    for j in range(1, n_compare + 1):
        sidx = j * strides_per_cmp
        pair_c = compose_pair(p0, mt.g_series[sidx], U_series[sidx], sigma_series[sidx])
        yc, evc, trpc = _pair_observables(grid, pair_c.a2.data, pair_c.phi.data, r)
        yd, evd, trpd = direct[j * per_cmp]
        times.append(j * per_cmp * dt)
        ymh_d.append(yd)
        ymh_c.append(yc)
        eig_diff.append(math.sqrt(np.sum(np.abs(evd - evc) ** 2) * h2))
        trp_diff.append(np.abs(trpd - trpc).max(axis=(1, 2)))

    sqrt_diff = None
    if sqrt_choice_unitary is not None:
        u = sqrt_choice_unitary
        g2 = [g @ u for g in mt.g_series]
        alphas2 = []
        for k in range(n_str):
            if 0 < k < n_str - 1:
                al = alpha_centered(g2[k - 1], g2[k + 1], 2 * dtS, g2[k])
            elif k == 0:
                al = alpha_centered(g2[0], g2[1], dtS, g2[0])
            else:
                al = alpha_centered(g2[k - 1], g2[k], dtS, g2[k])
            alphas2.append(al)
        U2, sig2, _ = gauge_fix_ode(alphas2, mt.lambda_series, dtS)
        pa = compose_pair(p0, mt.g_series[-1], U_series[-1], sigma_series[-1])
        pb = compose_pair(p0, g2[-1], U2[-1], sig2[-1])
        sqrt_diff = math.sqrt(
            l2_inner_raw(grid, pa.a2.data - pb.a2.data, pa.a2.data - pb.a2.data)
            + l2_inner_raw(grid, pa.phi.data - pb.phi.data, pa.phi.data - pb.phi.data))

    ymh_d = np.array(ymh_d)
    ymh_c = np.array(ymh_c)
    rel_ymh = np.abs(ymh_d - ymh_c) / (1.0 + np.abs(ymh_d))
    trp_diff = np.array(trp_diff)
    max_disc = float(max(rel_ymh.max(), np.array(eig_diff).max(), trp_diff.max()))
    return EquivalenceReport(
        times=np.array(times), ymh_direct=ymh_d, ymh_composed=ymh_c,
        eig_l2_diff=np.array(eig_diff), tr_phi_maxdiff=trp_diff,
        max_discrepancy=max_disc, unitarity_drift=drift,
        sqrt_choice_diff=sqrt_diff, dt=dt, status="ok",
    )
