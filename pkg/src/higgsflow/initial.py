"""Initial-data construction: random smooth pairs in B, split configurations
in a prescribed stratum, and stratified perturbations.

The Higgs field is always projected onto the discrete kernel of
phi -> dbar phi + [A'', phi] by a minimum-norm least-squares correction
(LSQR on the realified operator), so constructed pairs satisfy the membership
residual || d_A'' phi || <= tol_B.

Split configurations of type (d, -d) on the rank-2 trivial bundle come from a
degree-d smooth projection field pi (a winding map T^2 -> S^2 composed with
the Bloch-sphere projection) and the direct-sum holomorphic structure
a = (2 pi - 1) dbar(pi), for which both im(pi) and its complement are
holomorphic sub-bundles of Chern-Weil degree +/- d.  Flowing such data and
purifying the limit yields the stored nonminimal critical anchors that
split-plus-perturbation runs start from.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, lsqr

from .errors import NotSettledError
from .fields import (
    HiggsPair,
    _adj,
    _comm,
    _traceless,
    higgs_residual,
    higgs_residual_field_raw,
    star_mu1_raw,
)
from .geometry import (
    FormDegree,
    MatrixField,
    TorusGrid,
    dbar_raw,
    d_prime_raw,
    l2_norm_raw,
)

TOL_B = 1e-8  # discrete membership tolerance for B


def fourier_modes(k0: float):
    """Deterministic mode list for the smooth random fields.

    Modes with |k| <= kmax = ceil(3 k0) in a fixed lexicographic order, so the
    same seed generates the same continuum field at every resolution.
    """
    kmax = int(math.ceil(3.0 * k0))
    modes = []
    for kx in range(-kmax, kmax + 1):
        for ky in range(-kmax, kmax + 1):
            if kx * kx + ky * ky <= kmax * kmax:
                modes.append((kx, ky))
    return modes, kmax


def random_smooth_field(grid: TorusGrid, r: int, rng, k0: float = 2.0,
                        amplitude: float = 1.0) -> np.ndarray:
    """Gaussian random field with Fourier modes damped by exp(-|k|^2/k0^2)."""
    modes, kmax = fourier_modes(k0)
    if grid.N <= 2 * kmax + 2:
        raise ValueError(f"grid N={grid.N} too coarse for spectral cutoff {kmax}")
    spec = np.zeros((grid.N, grid.N, r, r), np.complex128)
    for kx, ky in modes:
        c = (rng.standard_normal((r, r)) + 1j * rng.standard_normal((r, r))) / math.sqrt(2.0)
        spec[kx % grid.N, ky % grid.N] += c * math.exp(-(kx * kx + ky * ky) / (k0 * k0))
    field = np.fft.ifft2(spec, axes=(0, 1)) * grid.N ** 2
    return amplitude * field


def _to_real(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real.ravel(), z.imag.ravel()])


def _to_complex(x: np.ndarray, shape) -> np.ndarray:
    m = x.size // 2
    return (x[:m] + 1j * x[m:]).reshape(shape)


def project_to_kernel(grid: TorusGrid, a: np.ndarray, phi_cand: np.ndarray,
                      subspace=None, tol: float = TOL_B,
                      max_rounds: int = 3, iter_lim: int = 4000):
    """Minimum-norm projection of phi_cand onto ker( phi -> dbar phi + [a, phi] ).

    subspace: optional pointwise complex-linear projection P (callable) onto a
    holomorphic sub-bundle of End(E) sections (e.g. block upper-triangular);
    the correction is then constrained to im(P).
    Returns (phi, residual_l2).
    """
    shape = phi_cand.shape
    P = subspace if subspace is not None else (lambda z: z)

    def K(z):
        return dbar_raw(grid, z) + _comm(a, z)

    def K_adj(y):
        return -d_prime_raw(grid, y) + _comm(_adj(a), y)

    def matvec(x):
        return _to_real(K(P(_to_complex(x, shape))))

    def rmatvec(y):
        return _to_real(P(K_adj(_to_complex(y, shape))))

    m = 2 * phi_cand.size
    A = LinearOperator((m, m), matvec=matvec, rmatvec=rmatvec, dtype=np.float64)

    phi = P(phi_cand)
    for _ in range(max_rounds):
        b = _to_real(K(phi))
        resid = l2_norm_raw(grid, K(phi))
        if resid <= tol:
            break
        sol = lsqr(A, b, atol=1e-14, btol=1e-14, iter_lim=iter_lim)
        phi = phi - P(_to_complex(sol[0], shape))
    return phi, l2_norm_raw(grid, K(phi))


def kernel_dimension_estimate(grid: TorusGrid, a: np.ndarray, r: int, rng,
                              n_probe: int = 10, k0: float = 2.0,
                              tol: float = 1e-6) -> int:
    """Dimension of the smooth discrete kernel found by projecting random
    smooth probes (a lower bound that excludes lattice sawtooth artifacts)."""
    probes = []
    for _ in range(n_probe):
        cand = random_smooth_field(grid, r, rng, k0=k0, amplitude=1.0)
        phi, resid = project_to_kernel(grid, a, cand)
        if resid < 10 * TOL_B and l2_norm_raw(grid, phi) > tol:
            probes.append(phi.ravel())
    if not probes:
        return 0
    M = np.array(probes).T
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > tol * s[0]))


def make_random_smooth(grid: TorusGrid, r: int, seed: int, k0: float = 2.0,
                       amplitude: float = 0.5, fixed_det: bool = False,
                       tol: float = TOL_B, max_retries: int = 4):
    """Random smooth pair in B: damped-Gaussian A'', phi projected to the
    discrete holomorphic kernel.  Deterministic in (seed, k0, amplitude)."""
    retries = 0
    seed_used = seed
    while True:
        rng = np.random.default_rng(seed_used)
        a = random_smooth_field(grid, r, rng, k0=k0, amplitude=amplitude)
        phi_cand = random_smooth_field(grid, r, rng, k0=k0, amplitude=amplitude)
        if fixed_det:
            a = _traceless(a)
            phi_cand = _traceless(phi_cand)
        if amplitude == 0.0:
            return HiggsPair.from_arrays(grid, a, phi_cand, fixed_det), {
                "seed_used": seed_used, "residual": 0.0, "retries": retries}
        phi, resid = project_to_kernel(grid, a, phi_cand, tol=tol)
        if resid <= tol:
            return HiggsPair.from_arrays(grid, a, phi, fixed_det), {
                "seed_used": seed_used, "residual": resid, "retries": retries}
        retries += 1
        if retries > max_retries:
            raise RuntimeError(
                f"kernel projection failed after {max_retries} retries "
                f"(last residual {resid:.3e})")
        seed_used = seed + 1_000_003 * retries  # new stream, recorded


# --- split (winding) configurations ---------------------------------------------


def _smoothstep(s: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for s<=0, 1 for s>=1, exponentially flat at both ends."""
    def f(t):
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = np.exp(-1.0 / t[pos])
        return out

    fs = f(s)
    return fs / (fs + f(1.0 - s))


def winding_projection(grid: TorusGrid, d: int) -> np.ndarray:
    """Rank-1 projection field pi = (1 + n . sigma)/2 for a degree-d map
    n: T^2 -> S^2 (C-infinity bump supported inside the fundamental square;
    smoothness keeps the lattice spectral tail of pi small, which matters for
    how exactly the discrete flow preserves the filtration)."""
    if d == 0:
        raise ValueError("winding degree must be nonzero")
    X, Y = grid.coords()
    L = grid.L
    dxs, dys = X - L / 2, Y - L / 2
    s = np.clip(np.sqrt(dxs ** 2 + dys ** 2) / (0.48 * L), 0.0, 1.0)
    beta = np.arctan2(dys, dxs)
    alpha = np.pi * (1.0 - _smoothstep(s))
    n1 = np.sin(alpha) * np.cos(d * beta)
    n2 = np.sin(alpha) * np.sin(d * beta)
    n3 = np.cos(alpha)
    P = np.empty((grid.N, grid.N, 2, 2), np.complex128)
    P[..., 0, 0] = (1 + n3) / 2
    P[..., 1, 1] = (1 - n3) / 2
    P[..., 0, 1] = (n1 - 1j * n2) / 2
    P[..., 1, 0] = (n1 + 1j * n2) / 2
    return P


def make_winding_split(grid: TorusGrid, degrees=(1, -1), phi_consts=(0.35, -0.15),
                       fixed_det: bool = False, tol: float = TOL_B):
    """Rank-2 pair in the stratum of type (d, -d): direct-sum holomorphic
    structure over the winding projection plus block-constant Higgs field.

    The pair lies in B_mu but is not critical; the flow settles it onto the
    nonminimal critical set of that type.
    """
    d1, d2 = degrees
    if d1 + d2 != 0 or d1 <= 0:
        raise ValueError(f"rank-2 winding degrees must be (d, -d), d > 0; got {degrees}")
    P = winding_projection(grid, d1)
    eye = np.eye(2)
    a = (2.0 * P - eye) @ dbar_raw(grid, P)
    # kill the destabilizing lower-left of D''pi exactly: for a lower-left
    # correction da one has [da, pi] = da, so da = -(1-pi) (D''pi) pi removes
    # the filtration-breaking component at lattice precision
    X = dbar_raw(grid, P) + _comm(a, P)
    a = a - (eye - P) @ X @ P
    c1, c2 = phi_consts
    if fixed_det:
        c2 = -c1
    phi_cand = c1 * P + c2 * (eye - P)

    def block_diag(z):
        Pc = eye - P
        return P @ z @ P + Pc @ z @ Pc

    phi, resid = project_to_kernel(grid, a, phi_cand, subspace=block_diag, tol=tol)
    if fixed_det:
        a = _traceless(a)
        phi = _traceless(phi)
        resid = l2_norm_raw(grid, higgs_residual_field_raw(grid, a, phi))
    pair = HiggsPair.from_arrays(grid, a, phi, fixed_det)
    return pair, {"residual": resid, "projection": P}


def _cumulative_projectors(grid, a, p, block_ranks, r):
    m = star_mu1_raw(grid, a, p)
    w, v = np.linalg.eigh(1j * m)
    v = v[..., ::-1]
    projs = []
    for k in block_ranks:
        vk = v[..., :, :k]
        projs.append(vk @ _adj(vk))
    return projs


def kill_lower_left(pair: HiggsPair, block_ranks=(1,)) -> HiggsPair:
    """Remove the filtration-breaking (lower-triangular) components.

    For each cumulative eigenblock projector pi of i*mu1, the connection is
    corrected by da = -(1-pi)(D''pi)pi (exact: [da, pi] = da for lower-left
    da) and the lower-left part of phi is dropped.
    """
    grid = pair.grid
    r = pair.r
    a = pair.a2.data.copy()
    p = pair.phi.data.copy()
    for pi in _cumulative_projectors(grid, a, p, block_ranks, r):
        X = dbar_raw(grid, pi) + _comm(a, pi)
        pc = np.eye(r) - pi
        a = a - pc @ X @ pi
        p = p - pc @ p @ pi
    if pair.fixed_det:
        a = _traceless(a)
        p = _traceless(p)
    return HiggsPair.from_arrays(grid, a, p, pair.fixed_det)


def make_split_anchor(grid: TorusGrid, degrees=(1, -1), phi_consts=(0.35, -0.15),
                      fixed_det: bool = False, tol_grad: float = 1e-6,
                      T_max: float = 12.0, chunk_T: float = 0.05,
                      c_cfl: float = 0.2):
    """Settled nonminimal critical pair of type (d, -d), built by flowing the
    winding configuration with the filtration constraint re-imposed between
    chunks (the free lattice flow would otherwise eventually slide off the
    unstable critical set through discretization noise in the destabilizing
    directions), then purified to an exactly split pair.
    """
    from .flow import FlowConfig, run_gradient_flow

    pair, _ = make_winding_split(grid, degrees=degrees, phi_consts=phi_consts,
                                 fixed_det=fixed_det)
    block_ranks = (1,)
    cfg = FlowConfig(c_cfl=c_cfl, T_max=chunk_T, tol_grad=tol_grad,
                     snapshot_every=10 ** 9)
    t_acc = 0.0
    status = "timeout"
    while t_acc < T_max:
        traj = run_gradient_flow(pair, cfg)
        t_acc += traj.t_final
        pair = kill_lower_left(traj.final_pair, block_ranks)
        if traj.status == "converged":
            status = "converged"
            break
    pure, pinfo = purify_split(pair, block_ranks, tol=TOL_B)
    return pure, {"status": status, "t_flow": t_acc,
                  "residual": pinfo["residual"]}


def purify_split(pair: HiggsPair, block_ranks, n_iter: int = 3,
                 tol: float = TOL_B):
    """Project a settled limit onto an exactly split pair.

    block_ranks: cumulative ranks of the filtration blocks (e.g. [1] for a
    rank-2 splitting).  In the pointwise eigenframe of i*mu1, off-block
    components of A'' are removed by solving [da, pi] = -(dbar pi + [a, pi])
    (exact for the off-block part), off-block components of phi are dropped,
    and phi is re-projected onto the block-diagonal discrete kernel.
    """
    grid = pair.grid
    r = pair.r
    a = pair.a2.data.copy()
    p = pair.phi.data.copy()
    for _ in range(n_iter):
        m = star_mu1_raw(grid, a, p)
        w, v = np.linalg.eigh(1j * m)
        w = w[..., ::-1]
        v = v[..., ::-1]
        projs = []
        prev = 0
        for k in list(block_ranks) + [r]:
            if k == prev:
                continue
            vk = v[..., :, prev:k]
            projs.append(vk @ _adj(vk))
            prev = k
        # remove off-block connection components, cumulative block by block
        cum = np.zeros_like(projs[0])
        for pi in projs[:-1]:
            cum = cum + pi
            X = -(dbar_raw(grid, cum) + _comm(a, cum))
            pc = np.eye(r) - cum
            da = pc @ X @ cum - cum @ X @ pc
            a = a + da
        # drop off-block phi components
        p_new = np.zeros_like(p)
        for pi in projs:
            p_new += pi @ p @ pi
        p = p_new

    def block_diag(z):
        out = np.zeros_like(z)
        m_ = star_mu1_raw(grid, a, p)
        w_, v_ = np.linalg.eigh(1j * m_)
        v_ = v_[..., ::-1]
        prev = 0
        for k in list(block_ranks) + [r]:
            if k == prev:
                continue
            vk = v_[..., :, prev:k]
            pk = vk @ _adj(vk)
            out += pk @ z @ pk
            prev = k
        return out

    p, resid = project_to_kernel(grid, a, p, subspace=block_diag, tol=tol)
    if pair.fixed_det:
        a = _traceless(a)
        p = _traceless(p)
    out = HiggsPair.from_arrays(grid, a, p, pair.fixed_det)
    return out, {"residual": higgs_residual(out)}


def make_split_perturbation(anchor: HiggsPair, seed: int, amplitude: float = 1e-2,
                            k0: float = 2.0, block_ranks=(1,), tol: float = TOL_B):
    """Anchor (a settled split critical pair) plus a strictly upper-triangular
    Higgs perturbation inside the discrete kernel.

    "Upper triangular" is with respect to the filtration: components mapping
    lower blocks into higher-slope blocks (extension directions); these
    preserve the Harder-Narasimhan type of the initial pair.
    """
    grid = anchor.grid
    r = anchor.r
    a = anchor.a2.data
    m = star_mu1_raw(grid, a, anchor.phi.data)
    w, v = np.linalg.eigh(1j * m)
    v = v[..., ::-1]
    projs = []
    prev = 0
    for k in list(block_ranks) + [r]:
        if k == prev:
            continue
        vk = v[..., :, prev:k]
        projs.append(vk @ _adj(vk))
        prev = k

    def upper(z):
        out = np.zeros_like(z)
        for i in range(len(projs)):
            for j in range(i + 1, len(projs)):
                out += projs[i] @ z @ projs[j]
        return out

    rng = np.random.default_rng(seed)
    cand = random_smooth_field(grid, r, rng, k0=k0, amplitude=1.0)
    dphi, resid = project_to_kernel(grid, a, cand, subspace=upper, tol=tol)
    nrm = l2_norm_raw(grid, dphi)
    if nrm < 1e-10:
        raise NotSettledError("no extension directions found in the discrete kernel")
    dphi = dphi * (amplitude / nrm)
    phi = anchor.phi.data + dphi
    if anchor.fixed_det:
        phi = _traceless(phi)
    pair = HiggsPair.from_arrays(grid, a.copy(), phi, anchor.fixed_det)
    return pair, {
        "residual": higgs_residual(pair),
        "perturbation_norm": amplitude,
        "kernel_residual": resid,
    }
