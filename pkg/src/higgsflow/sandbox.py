"""Finite-dimensional hyperkaehler moment-map sandbox.

M = T*C^n = {(v, w)} with the flat hyperkaehler structure

    I (dv, dw) = (i dv, i dw),
    J (dv, dw) = (-conj dw, conj dv),
    K = I J,

and a unitary group G acting linearly: rho_x(u) = (u v, -u^T w) for u in
Lie(G) (the cotangent factor carries the dual representation).  Moment maps
(verified against the defining property, not trusted):

    mu1 . u = (i/2) ( v^H u v + w^H conj(u) w ),
    muC . u = (mu2 + i mu3) . u = w^T u v.

All operators are also realized as real matrices on R^{4n} (coordinates
[Re v, Im v, Re w, Im w]) against an orthonormalized generator basis, which
makes the adjoint identities, product formulas, Hessian and subspace lemmas
exact linear algebra.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .critical import LojaFit, fit_power_law

_SKEW_TOL = 1e-14


class UnitaryRep:
    """Group G in U(n) given by skew-Hermitian generator matrices on C^n."""

    def __init__(self, n: int, generators):
        self.n = int(n)
        gens = [np.asarray(T, dtype=np.complex128) for T in generators]
        for T in gens:
            if T.shape != (self.n, self.n):
                raise ValueError(f"generator shape {T.shape} != ({self.n}, {self.n})")
            if np.abs(T + T.conj().T).max() > _SKEW_TOL:
                raise ValueError("generators must be skew-Hermitian to 1e-14")
        # orthonormalize wrt <A,B> = Re tr(A^H B); check independence
        basis = []
        for T in gens:
            M = T.copy()
            for B in basis:
                M = M - np.real(np.trace(B.conj().T @ M)) * B
            nrm = math.sqrt(np.real(np.trace(M.conj().T @ M)))
            if nrm < 1e-12:
                raise ValueError("generators are linearly dependent")
            basis.append(M / nrm)
        self.generators = gens
        self.basis = basis

    @property
    def dim(self) -> int:
        return len(self.basis)

    def lie_matrix(self, coeffs: np.ndarray) -> np.ndarray:
        M = np.zeros((self.n, self.n), np.complex128)
        for c, B in zip(coeffs, self.basis):
            M += c * B
        return M

    def lie_coeffs(self, M: np.ndarray) -> np.ndarray:
        return np.array([np.real(np.trace(B.conj().T @ M)) for B in self.basis])

    # --- stock representations used in tests ---

    @classmethod
    def u_n_fundamental(cls, n: int) -> "UnitaryRep":
        gens = []
        for i in range(n):
            E = np.zeros((n, n), np.complex128)
            E[i, i] = 1j
            gens.append(E)
        for i in range(n):
            for j in range(i + 1, n):
                E = np.zeros((n, n), np.complex128)
                E[i, j] = 1.0
                E[j, i] = -1.0
                gens.append(E)
                E = np.zeros((n, n), np.complex128)
                E[i, j] = 1j
                E[j, i] = 1j
                gens.append(E)
        return cls(n, gens)

    @classmethod
    def u2_two_fundamentals(cls) -> "UnitaryRep":
        """U(2) on C^2 (+) C^2 (the default test representation)."""
        base = cls.u_n_fundamental(2)
        gens = [scipy.linalg.block_diag(T, T) for T in base.generators]
        return cls(4, gens)

    @classmethod
    def u1_on_c2(cls) -> "UnitaryRep":
        return cls(2, [1j * np.eye(2)])

    @classmethod
    def u1_on_c1(cls) -> "UnitaryRep":
        """U(1) on C: Q_H is quartic at the origin (flat-direction example)."""
        return cls(1, [1j * np.eye(1)])


@dataclass
class HKPoint:
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, np.complex128)
        self.w = np.asarray(self.w, np.complex128)
        if not (np.all(np.isfinite(self.v.view(np.float64)))
                and np.all(np.isfinite(self.w.view(np.float64)))):
            raise ValueError("HKPoint has non-finite entries")

    @property
    def n(self):
        return self.v.shape[0]

    def real_coords(self) -> np.ndarray:
        return np.concatenate([self.v.real, self.v.imag, self.w.real, self.w.imag])

    @classmethod
    def from_real(cls, rc: np.ndarray, n: int) -> "HKPoint":
        return cls(rc[:n] + 1j * rc[n:2 * n], rc[2 * n:3 * n] + 1j * rc[3 * n:])

    def norm(self) -> float:
        return math.sqrt(float(np.sum(np.abs(self.v) ** 2 + np.abs(self.w) ** 2)))


def tangent_to_real(dv: np.ndarray, dw: np.ndarray) -> np.ndarray:
    return np.concatenate([dv.real, dv.imag, dw.real, dw.imag])


def tangent_from_real(rc: np.ndarray, n: int):
    return rc[:n] + 1j * rc[n:2 * n], rc[2 * n:3 * n] + 1j * rc[3 * n:]


def I_act(dv, dw):
    return 1j * dv, 1j * dw


def J_act(dv, dw):
    return -dw.conj(), dv.conj()


def K_act(dv, dw):
    return -1j * dw.conj(), 1j * dv.conj()


def _structure_matrix(act, n: int) -> np.ndarray:
    S = np.zeros((4 * n, 4 * n))
    for i in range(4 * n):
        e = np.zeros(4 * n)
        e[i] = 1.0
        dv, dw = tangent_from_real(e, n)
        S[:, i] = tangent_to_real(*act(dv, dw))
    return S


def rho(rep: UnitaryRep, x: HKPoint, u) -> tuple:
    """Infinitesimal action rho_x(u) = (u v, -u^T w); u matrix or coeffs."""
    U = u if isinstance(u, np.ndarray) and u.ndim == 2 else rep.lie_matrix(u)
    return U @ x.v, -U.T @ x.w


def delta_rho(rep: UnitaryRep, u, X: tuple) -> tuple:
    """Action of u on a tangent vector: (u X_v, -u^T X_w)."""
    U = u if isinstance(u, np.ndarray) and u.ndim == 2 else rep.lie_matrix(u)
    Xv, Xw = X
    return U @ Xv, -U.T @ Xw


def group_action(rep: UnitaryRep, g: np.ndarray, x: HKPoint) -> HKPoint:
    """g . (v, w) = (g v, conj(g) w)  (cotangent factor by the dual rep)."""
    return HKPoint(g @ x.v, g.conj() @ x.w)


def rho_real_matrix(rep: UnitaryRep, x: HKPoint) -> np.ndarray:
    """(4n, dimG) real matrix of rho_x in the orthonormal generator basis."""
    cols = []
    for B in rep.basis:
        cols.append(tangent_to_real(*rho(rep, x, B)))
    return np.array(cols).T


def rho_star(rep: UnitaryRep, x: HKPoint, X: tuple) -> np.ndarray:
    """Adjoint of rho_x: returns the Lie-algebra matrix rho_x^*(X)."""
    R = rho_real_matrix(rep, x)
    coeffs = R.T @ tangent_to_real(*X)
    return rep.lie_matrix(coeffs)


def moment_maps(rep: UnitaryRep, x: HKPoint):
    """(m1, m2, m3) as matrices in Lie(G) (orthonormal-basis projections)."""
    v, w = x.v, x.w
    c1 = np.empty(rep.dim)
    c2 = np.empty(rep.dim)
    c3 = np.empty(rep.dim)
    for a, B in enumerate(rep.basis):
        c1[a] = np.real(0.5j * (v.conj() @ (B @ v) + w.conj() @ (B.conj() @ w)))
        mc = w @ (B @ v)
        c2[a] = mc.real
        c3[a] = mc.imag
    return rep.lie_matrix(c1), rep.lie_matrix(c2), rep.lie_matrix(c3)


def moment_norms_sq(rep: UnitaryRep, x: HKPoint):
    m1, m2, m3 = moment_maps(rep, x)
    def n2(M):
        return float(np.real(np.trace(M.conj().T @ M)))
    return n2(m1), n2(m2), n2(m3)


def qh_value(rep: UnitaryRep, x: HKPoint) -> float:
    return sum(moment_norms_sq(rep, x))


def mu1_norm_sq(rep: UnitaryRep, x: HKPoint) -> float:
    return moment_norms_sq(rep, x)[0]


def verify_moment_construction(rep: UnitaryRep, x: HKPoint, rng=None,
                               n_checks: int = 10, eps: float = 1e-6,
                               tol: float = 1e-8) -> float:
    """FD check of the defining property d mu_S(X).u = g(S rho(u), X).

    Returns the worst residual; raises if it exceeds tol (construction bug).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    acts = {0: I_act, 1: J_act, 2: K_act}
    worst = 0.0
    xr = x.real_coords()
    n = x.n
    for _ in range(n_checks):
        coeffs = rng.standard_normal(rep.dim)
        U = rep.lie_matrix(coeffs)
        Xr = rng.standard_normal(4 * n)
        xp = HKPoint.from_real(xr + eps * Xr, n)
        xm = HKPoint.from_real(xr - eps * Xr, n)
        mp = moment_maps(rep, xp)
        mm = moment_maps(rep, xm)
        Xv, Xw = tangent_from_real(Xr, n)
        ru = rho(rep, x, U)
        for s in range(3):
            dmu = np.real(np.trace(((mp[s] - mm[s]) / (2 * eps)).conj().T @ U))
            Sru = acts[s](*ru)
            gval = float(np.dot(tangent_to_real(*Sru), Xr))
            worst = max(worst, abs(dmu - gval) / max(1.0, abs(gval)))
    if worst > tol:
        raise AssertionError(
            f"moment-map defining property violated: residual {worst:.3e} > {tol:.1e}")
    return worst


def identity_adjoint(rep: UnitaryRep, x: HKPoint, u) -> dict:
    """Residuals of rho* S rho(u) = -[m_S, u] for S = I, J, K."""
    U = u if isinstance(u, np.ndarray) and u.ndim == 2 else rep.lie_matrix(u)
    m1, m2, m3 = moment_maps(rep, x)
    out = {}
    for name, act, mS in (("I", I_act, m1), ("J", J_act, m2), ("K", K_act, m3)):
        lhs = rho_star(rep, x, act(*rho(rep, x, U)))
        rhs = -(mS @ U - U @ mS)
        scale = max(np.abs(rhs).max(), 1e-12)
        out[name] = float(np.abs(lhs - rhs).max() / scale) if np.abs(rhs).max() > 1e-14 \
            else float(np.abs(lhs - rhs).max())
    return out


def delta_rho_star(rep: UnitaryRep, X: tuple, Y: tuple) -> np.ndarray:
    """(delta rho)^*(X, Y): adjoint in u of u -> delta_rho(u)(X), paired with Y."""
    Yr = tangent_to_real(*Y)
    coeffs = np.array([
        float(np.dot(tangent_to_real(*delta_rho(rep, B, X)), Yr))
        for B in rep.basis
    ])
    return rep.lie_matrix(coeffs)


def product_formulas(rep: UnitaryRep, x: HKPoint, u, X: tuple) -> dict:
    """Residuals of the product formulas (I-twisted, commutativity, plain)."""
    U = u if isinstance(u, np.ndarray) and u.ndim == 2 else rep.lie_matrix(u)
    n = x.n

    def bracket(A, B):
        return A @ B - B @ A

    # I-twisted: rho* I drho(u)(X) = [rho*(IX), u] - (drho)*(X, I rho(u))
    lhs1 = rho_star(rep, x, I_act(*delta_rho(rep, U, X)))
    rhs1 = bracket(rho_star(rep, x, I_act(*X)), U) - delta_rho_star(rep, X, I_act(*rho(rep, x, U)))
    # commutativity: I drho(u)(X) = drho(u)(IX)
    a_v, a_w = I_act(*delta_rho(rep, U, X))
    b_v, b_w = delta_rho(rep, U, I_act(*X))
    # plain: rho* drho(u)(X) = [rho* X, u] + (drho)*(X, rho(u))
    lhs3 = rho_star(rep, x, delta_rho(rep, U, X))
    rhs3 = bracket(rho_star(rep, x, X), U) + delta_rho_star(rep, X, rho(rep, x, U))

    def rel(A, B):
        scale = max(np.abs(B).max(), 1e-12)
        return float(np.abs(A - B).max() / scale)

    return {
        "i_twisted": rel(lhs1, rhs1),
        "commutativity": float(max(np.abs(a_v - b_v).max(), np.abs(a_w - b_w).max())),
        "plain": rel(lhs3, rhs3),
    }


# --- Hessian and slice machinery ------------------------------------------------


def grad_half_qmu1(rep: UnitaryRep, x: HKPoint) -> tuple:
    """Gradient of (1/2)||mu1||^2: I rho_x(m1); the flow velocity is its negative."""
    m1 = moment_maps(rep, x)[0]
    return I_act(*rho(rep, x, m1))


def grad_qh_real(rep: UnitaryRep, x: HKPoint) -> np.ndarray:
    """Gradient of Q_H in real coordinates: 2 sum_S S rho(m_S)."""
    m1, m2, m3 = moment_maps(rep, x)
    out = np.zeros(4 * x.n)
    for act, mS in ((I_act, m1), (J_act, m2), (K_act, m3)):
        out += 2.0 * tangent_to_real(*act(*rho(rep, x, mS)))
    return out


def hessian_qh(rep: UnitaryRep, x: HKPoint) -> np.ndarray:
    """Hessian of Q_H as a real (4n, 4n) matrix:

    (1/2) H = sum_S ( -S rho rho* S + S drho(m_S)(.) ),  S in {I, J, K}.
    """
    n = x.n
    R = rho_real_matrix(rep, x)
    RRt = R @ R.T
    m1, m2, m3 = moment_maps(rep, x)
    H = np.zeros((4 * n, 4 * n))
    for act, mS in ((I_act, m1), (J_act, m2), (K_act, m3)):
        S = _structure_matrix(act, n)
        Dm = np.zeros((4 * n, 4 * n))
        for i in range(4 * n):
            e = np.zeros(4 * n)
            e[i] = 1.0
            X = tangent_from_real(e, n)
            Dm[:, i] = tangent_to_real(*delta_rho(rep, mS, X))
        H += -S @ RRt @ S + S @ Dm
    return 2.0 * H


def _orth_basis(M: np.ndarray, tol_factor: float = 1e-9):
    """Orthonormal basis of the column space of M (empty for the zero space)."""
    if M.size == 0:
        return np.zeros((M.shape[0], 0))
    u_, s, _ = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((M.shape[0], 0))
    rank = int(np.sum(s > tol_factor * s[0]))
    return u_[:, :rank]


def _null_basis(M: np.ndarray, tol_factor: float = 1e-9):
    u_, s, vh = np.linalg.svd(M)
    if s.size == 0:
        return np.eye(M.shape[1])
    rank = int(np.sum(s > tol_factor * s[0]))
    return vh[rank:].T


def _max_angle(A: np.ndarray, B: np.ndarray) -> float:
    """Largest principal angle between equal-dimensional subspaces (radians)."""
    if A.shape[1] != B.shape[1]:
        return math.pi / 2
    if A.shape[1] == 0:
        return 0.0
    return float(scipy.linalg.subspace_angles(A, B).max())


@dataclass
class KernelReport:
    dims: dict
    angle_kernel_lemma: float      # ker L vs ker H A ker rho*
    angle_tangent_split: float     # (ker rho*)-perp vs im rho
    angle_image_split: float       # im L vs im H (+) im rho
    overlap_angle_min: float       # smallest principal angle between ker rho* and im rho
    grad_norm: float

    @property
    def all_ok(self):
        return max(self.angle_kernel_lemma, self.angle_tangent_split,
                   self.angle_image_split) <= 1e-7


def kernel_decompositions(rep: UnitaryRep, x: HKPoint,
                          tol_factor: float = 1e-9) -> KernelReport:
    """Numerical check of the kernel/image splitting lemmas at a critical point:

    ker L = ker H A ker rho*  (L = H + rho rho*),
    T_x M = ker rho* (+) im rho,
    im L  = im H (+) im rho.
    """
    n = x.n
    gq = grad_qh_real(rep, x)
    H = hessian_qh(rep, x)
    R = rho_real_matrix(rep, x)
    L = H + R @ R.T

    kerL = _null_basis(L, tol_factor)
    kerH = _null_basis(H, tol_factor)
    kerRs = _null_basis(R.T, tol_factor)
    imR = _orth_basis(R, tol_factor)
    imH = _orth_basis(H, tol_factor)
    imL = _orth_basis(L, tol_factor)

    # intersection ker H A ker rho* via nullspace of stacked projectors
    P = np.vstack([H, R.T])
    inter = _null_basis(P, tol_factor)

    ang_kernel = _max_angle(kerL, inter)
    # (ker rho*)-perp = im rho
    kerRs_perp = _orth_basis(np.eye(4 * n) - kerRs @ kerRs.T, tol_factor) \
        if kerRs.shape[1] < 4 * n else np.zeros((4 * n, 0))
    ang_split = _max_angle(kerRs_perp, imR)
    imHR = _orth_basis(np.hstack([imH, imR]), tol_factor)
    ang_image = _max_angle(imL, imHR)
    if kerRs.shape[1] and imR.shape[1]:
        overlap = float(scipy.linalg.subspace_angles(kerRs, imR).min())
    else:
        overlap = math.pi / 2

    dims = {
        "ker_L": kerL.shape[1], "ker_H": kerH.shape[1],
        "ker_rho_star": kerRs.shape[1], "im_rho": imR.shape[1],
        "im_H": imH.shape[1], "im_L": imL.shape[1],
        "intersection": inter.shape[1],
    }
    return KernelReport(dims, ang_kernel, ang_split, ang_image, overlap,
                        float(np.linalg.norm(gq)))


def coulomb_newton(rep: UnitaryRep, x: HKPoint, y: HKPoint,
                   tol: float = 1e-12, max_iter: int = 50):
    """Newton solve for u in (ker rho_x)-perp with rho_x^*( e^{-u}.y - x ) = 0.

    Returns (u_matrix, residual_history, quadratic_ratios); raises RuntimeError
    if it fails to converge (y outside the slice neighbourhood).
    """
    R = rho_real_matrix(rep, x)
    # (ker rho_x)-perp in Lie-algebra coordinates = row space of R
    Bp = _orth_basis(R.T)         # (dimG, k)
    k = Bp.shape[1]
    xr = x.real_coords()

    def G_of(c):
        U = rep.lie_matrix(Bp @ c)
        g = scipy.linalg.expm(-U)
        gy = group_action(rep, g, y)
        diff = gy.real_coords() - xr
        return Bp.T @ (R.T @ diff)

    def J_of(c):
        U = rep.lie_matrix(Bp @ c)
        cols = np.zeros((k, k))
        for j in range(k):
            dU = rep.lie_matrix(Bp @ np.eye(k)[j])
            gm, dg = scipy.linalg.expm_frechet(-U, -dU)
            dgy = group_action(rep, dg, y)
            cols[:, j] = Bp.T @ (R.T @ dgy.real_coords())
        return cols

    c = np.zeros(k)
    hist = [float(np.linalg.norm(G_of(c)))]
    ratios = []
    for _ in range(max_iter):
        if hist[-1] <= tol:
            break
        J = J_of(c)
        c = c - np.linalg.solve(J, G_of(c))
        res = float(np.linalg.norm(G_of(c)))
        if hist[-1] > 1e-14:
            ratios.append(res / hist[-1] ** 2)
        hist.append(res)
    else:
        if hist[-1] > tol:
            raise RuntimeError(
                f"Coulomb Newton failed to converge: residual {hist[-1]:.3e}"
                " (outside slice neighbourhood)")
    if hist[-1] > tol:
        raise RuntimeError(
            f"Coulomb Newton failed to converge: residual {hist[-1]:.3e}"
            " (outside slice neighbourhood)")
    return rep.lie_matrix(Bp @ c), hist, ratios


# --- flows ----------------------------------------------------------------------


@dataclass
class SandboxTrajectory:
    times: np.ndarray
    energy: np.ndarray            # ||mu1||^2 along the reduced flow
    grad_norm: np.ndarray         # ||I rho(m1)||
    omega_consistency: np.ndarray  # ||Omega - m1(x)|| along the coupled system
    state_agreement: np.ndarray   # ||x_coupled - x_reduced||
    x_final: HKPoint
    status: str


def run_sandbox_flow(rep: UnitaryRep, x0: HKPoint, T: float = 10.0,
                     dt: float = 1e-3, record_every: int = 100,
                     tol_grad: float = 0.0) -> SandboxTrajectory:
    """Integrate both the reduced flow x' = -I rho(m1(x)) and the coupled
    system (x' = -I rho(Omega), Omega' = -rho* rho Omega), Omega(0) = m1(x0),
    with RK4 at fixed dt; track Omega-consistency and trajectory agreement."""
    n = x0.n

    def vel_reduced(xr):
        xx = HKPoint.from_real(xr, n)
        m1 = moment_maps(rep, xx)[0]
        dv, dw = I_act(*rho(rep, xx, m1))
        return -tangent_to_real(dv, dw)

    def vel_coupled(state):
        xr, oc = state[:4 * n], state[4 * n:]
        xx = HKPoint.from_real(xr, n)
        Om = rep.lie_matrix(oc)
        dv, dw = I_act(*rho(rep, xx, Om))
        xdot = -tangent_to_real(dv, dw)
        R = rho_real_matrix(rep, xx)
        odot = -(R.T @ (R @ oc))
        return np.concatenate([xdot, odot])

    def rk4(f, s, h):
        k1 = f(s)
        k2 = f(s + 0.5 * h * k1)
        k3 = f(s + 0.5 * h * k2)
        k4 = f(s + h * k3)
        return s + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    xr = x0.real_coords()
    m1 = moment_maps(rep, x0)[0]
    state = np.concatenate([xr.copy(), rep.lie_coeffs(m1)])
    times, energy, grads, cons, agree = [], [], [], [], []
    n_steps = int(round(T / dt))
    status = "timeout"
    for step in range(n_steps + 1):
        t = step * dt
        if step % record_every == 0 or step == n_steps:
            xx = HKPoint.from_real(xr, n)
            m1x = moment_maps(rep, xx)[0]
            gv = tangent_to_real(*I_act(*rho(rep, xx, m1x)))
            times.append(t)
            energy.append(float(np.real(np.trace(m1x.conj().T @ m1x))))
            grads.append(float(np.linalg.norm(gv)))
            Om = rep.lie_matrix(state[4 * n:])
            cons.append(float(np.abs(Om - moment_maps(rep, HKPoint.from_real(state[:4 * n], n))[0]).max()))
            agree.append(float(np.linalg.norm(state[:4 * n] - xr)))
            if tol_grad and grads[-1] <= tol_grad:
                status = "converged"
                break
        if step == n_steps:
            break
        xr = rk4(vel_reduced, xr, dt)
        state = rk4(vel_coupled, state, dt)
    else:
        status = "timeout"
    return SandboxTrajectory(
        times=np.array(times), energy=np.array(energy), grad_norm=np.array(grads),
        omega_consistency=np.array(cons), state_agreement=np.array(agree),
        x_final=HKPoint.from_real(xr, n), status=status,
    )


def sandbox_loja(rep: UnitaryRep, x0: HKPoint, T: float = 40.0,
                 dt: float = 1e-3, record_every: int = 20) -> LojaFit:
    """Lojasiewicz fit on the sandbox flow (same fitter as the lattice)."""
    traj = run_sandbox_flow(rep, x0, T=T, dt=dt, record_every=record_every)
    theta, r2, c, window, status = fit_power_law(
        traj.times, traj.energy, traj.grad_norm)
    if status != "ok":
        return LojaFit(None, None, None, window, None, "inconclusive")
    sens = 0.0
    for s in (1e-12, -1e-12):
        th2, *_rest, st2 = fit_power_law(traj.times, traj.energy, traj.grad_norm, shift=s)
        if st2 == "ok":
            sens = max(sens, abs(th2 - theta))
    return LojaFit(theta, r2, c, window, sens, "ok")
