import numpy as np
import pytest

from higgsflow.fields import (
    GaugeTransform,
    HiggsPair,
    LieField,
    _adj,
    apply_gauge,
    curvature,
    grad_ymh,
    higgs_residual,
    i_act,
    inf_action,
    moment1,
    momentC,
    pair_metric,
    qh,
    rho_star,
    ymh,
)
from higgsflow.geometry import (
    FormDegree,
    MatrixField,
    TorusGrid,
    dbar_raw,
    integrate_trace,
    l2_inner,
    l2_inner_raw,
)

from conftest import random_field, skew_field


def random_pair(grid, r, rng, amp=0.5, fixed_det=False, kmax=None):
    a = random_field(grid, r, rng, amp=amp, kmax=kmax).data
    p = random_field(grid, r, rng, amp=amp, kmax=kmax).data
    if fixed_det:
        idx = np.arange(r)
        a[..., idx, idx] -= np.einsum("xyii->xy", a)[..., None] / r
        p[..., idx, idx] -= np.einsum("xyii->xy", p)[..., None] / r
    return HiggsPair.from_arrays(grid, a, p, fixed_det)


def unitary_field(grid, r, rng, amp=0.5, kmax=None):
    u = skew_field(grid, r, rng, amp=amp, kmax=kmax).data
    w, v = np.linalg.eigh(-1j * u)
    g = (v * np.exp(1j * w)[..., None, :]) @ _adj(v)
    return g


class TestCurvature:
    def test_flat_connection(self, grid16):
        p = HiggsPair.zero(grid16, 2)
        assert np.abs(curvature(p).data).max() == 0.0

    def test_constant_diagonal(self, grid16):
        a = np.zeros((16, 16, 2, 2), np.complex128)
        a[..., 0, 0] = 0.3 + 0.1j
        a[..., 1, 1] = -0.2j
        p = HiggsPair.from_arrays(grid16, a, np.zeros_like(a))
        assert np.abs(curvature(p).data).max() < 1e-13

    def test_grid_refinement_oracle(self, rng):
        # plane wave x nilpotent: compare against the same formula on a 2x
        # finer grid (restricted), the coarse error must dominate
        errs = []
        for N in (16, 32, 64):
            grid = TorusGrid(N, 1.0, backend="fd")
            X, Y = grid.coords()
            a = np.zeros((N, N, 2, 2), np.complex128)
            a[..., 0, 1] = 0.4 * np.exp(2j * np.pi * (X + 2 * Y))
            pair = HiggsPair.from_arrays(grid, a, np.zeros_like(a))
            errs.append(curvature(pair).data)
        # restriction of fine solution to coarse sites
        c16 = errs[0]
        c32_on_16 = errs[1][::2, ::2]
        c64_on_16 = errs[2][::4, ::4]
        e1 = np.abs(c16 - c64_on_16).max()
        e2 = np.abs(c32_on_16 - c64_on_16).max()
        assert e1 / e2 > 3.0  # second-order convergence toward the fine grid

    def test_skew_hermitian(self, sgrid16, rng):
        pair = random_pair(sgrid16, 2, rng)
        F = curvature(pair).data
        assert np.abs(F + _adj(F)).max() < 1e-12

    def test_total_trace_vanishes(self, grid16, rng):
        # degree-0 bundle: discrete Stokes is exact on the periodic stencil
        pair = random_pair(grid16, 2, rng)
        assert abs(integrate_trace(curvature(pair))) < 1e-10


class TestMoment1:
    def test_zero_pair(self, grid16):
        assert np.abs(moment1(HiggsPair.zero(grid16, 2)).data).max() == 0.0

    def test_normal_phi_commutes(self, grid16):
        p = np.zeros((16, 16, 2, 2), np.complex128)
        p[..., 0, 0] = 1.1
        p[..., 1, 1] = -0.4 + 0.2j
        pair = HiggsPair.from_arrays(grid16, np.zeros_like(p), p)
        assert np.abs(moment1(pair).data).max() < 1e-13

    def test_nilpotent_phi_value(self, grid16):
        # phi = c E12 constant: *mu1 = -2i |c|^2 diag(1, -1)
        c = 0.7 - 0.3j
        p = np.zeros((16, 16, 2, 2), np.complex128)
        p[..., 0, 1] = c
        pair = HiggsPair.from_arrays(grid16, np.zeros_like(p), p)
        m = moment1(pair).data
        expected = np.zeros_like(p)
        expected[..., 0, 0] = -2j * abs(c) ** 2
        expected[..., 1, 1] = 2j * abs(c) ** 2
        assert np.abs(m - expected).max() < 1e-13

    def test_skew_hermitian_everywhere(self, sgrid16, rng):
        m = moment1(random_pair(sgrid16, 2, rng)).data
        assert np.abs(m + _adj(m)).max() < 1e-10


class TestMomentC:
    def test_zero_phi(self, grid16, rng):
        a = random_field(grid16, 2, rng).data
        pair = HiggsPair.from_arrays(grid16, a, np.zeros_like(a))
        assert np.abs(momentC(pair).data).max() == 0.0

    def test_flat_constant_phi(self, grid16):
        p = np.full((16, 16, 2, 2), 0.3 + 0.1j, np.complex128)
        pair = HiggsPair.from_arrays(grid16, np.zeros_like(p), p)
        assert np.abs(momentC(pair).data).max() < 1e-13

    def test_direct_reevaluation(self, grid16, rng):
        pair = random_pair(grid16, 2, rng)
        a, p = pair.a2.data, pair.phi.data
        oracle = 2j * (dbar_raw(grid16, p) + a @ p - p @ a)
        assert np.abs(momentC(pair).data - oracle).max() < 1e-13


class TestFunctionals:
    def test_zero_pair(self, grid16):
        z = HiggsPair.zero(grid16, 2)
        assert ymh(z) == 0.0 and qh(z) == 0.0

    def test_quartic_scaling(self, grid16, rng):
        p = random_field(grid16, 2, rng).data
        z = np.zeros_like(p)
        base = ymh(HiggsPair.from_arrays(grid16, z, p))
        for t in (0.5, 2.0):
            val = ymh(HiggsPair.from_arrays(grid16, z, t * p))
            assert abs(val - t ** 4 * base) < 1e-10 * max(1.0, t ** 4 * base)

    def test_resummation_oracle(self, grid16, rng):
        pair = random_pair(grid16, 2, rng)
        m = moment1(pair).data
        # independent site loop
        total = 0.0
        for x in range(grid16.N):
            for y in range(grid16.N):
                total += float(np.sum(np.abs(m[x, y]) ** 2))
        total *= grid16.h ** 2
        assert abs(ymh(pair) - total) < 1e-12 * max(1.0, total)

    def test_qh_decomposition(self, grid16, rng):
        pair = random_pair(grid16, 2, rng)
        c = momentC(pair).data
        resummed = ymh(pair) + float(np.sum(np.abs(c) ** 2)) * grid16.h ** 2
        assert abs(qh(pair) - resummed) < 1e-12 * max(1.0, resummed)
        assert qh(pair) >= ymh(pair)

    def test_qh_equals_ymh_on_B(self, sgrid16, rng):
        from higgsflow.initial import make_random_smooth
        pair, _ = make_random_smooth(sgrid16, 2, seed=5, amplitude=0.3)
        assert abs(qh(pair) - ymh(pair)) < 1e-14 + 4 * higgs_residual(pair) ** 2 * 1.01


class TestGradYmh:
    def test_critical_zero_pair(self, grid16):
        da, dp = grad_ymh(HiggsPair.zero(grid16, 2))
        assert np.abs(da.data).max() == 0.0 and np.abs(dp.data).max() == 0.0

    @pytest.mark.parametrize("fixed_det", [False, True])
    def test_directional_derivative(self, sgrid16, rng, fixed_det):
        # (YMH(p+ev) - YMH(p-ev)) / 2e = -2 g(grad_ymh, v) with the Eq 2.2
        # metric (pair_metric), relative error <= 1e-5 at e = 1e-5
        pair = random_pair(sgrid16, 2, rng, fixed_det=fixed_det)
        va, vp = grad_ymh(pair)
        eps = 1e-5
        for _ in range(6):
            da = random_field(sgrid16, 2, rng, amp=0.3).data
            dp = random_field(sgrid16, 2, rng, amp=0.3).data
            if fixed_det:
                idx = np.arange(2)
                da[..., idx, idx] -= np.einsum("xyii->xy", da)[..., None] / 2
                dp[..., idx, idx] -= np.einsum("xyii->xy", dp)[..., None] / 2
            plus = HiggsPair.from_arrays(sgrid16, pair.a2.data + eps * da,
                                         pair.phi.data + eps * dp, fixed_det)
            minus = HiggsPair.from_arrays(sgrid16, pair.a2.data - eps * da,
                                          pair.phi.data - eps * dp, fixed_det)
            fd = (ymh(plus) - ymh(minus)) / (2 * eps)
            pred = -2.0 * pair_metric(((va, vp)), ((da, dp)), sgrid16)
            assert abs(fd - pred) <= 1e-5 * max(1.0, abs(fd))

    def test_gauge_equivariance_constant(self, grid16, rng):
        # constant unitary g: gradient transports exactly (no stencil error)
        pair = random_pair(grid16, 2, rng)
        g0 = unitary_field(grid16, 2, rng)[0, 0]
        g = np.broadcast_to(g0, pair.a2.data.shape).copy()
        va, vp = grad_ymh(pair)
        gp = apply_gauge(g, pair)
        va2, vp2 = grad_ymh(gp)
        gi = g0.conj().T
        assert np.abs(va2.data - gi @ va.data @ g0).max() < 1e-10
        assert np.abs(vp2.data - gi @ vp.data @ g0).max() < 1e-10


class TestApplyGauge:
    def test_identity(self, grid16, rng):
        pair = random_pair(grid16, 2, rng)
        eye = np.zeros_like(pair.a2.data)
        eye[..., [0, 1], [0, 1]] = 1.0
        out = apply_gauge(eye, pair)
        assert np.abs(out.a2.data - pair.a2.data).max() < 1e-14
        assert np.abs(out.phi.data - pair.phi.data).max() < 1e-14

    def test_constant_unitary_invariance(self, grid16, rng):
        pair = random_pair(grid16, 2, rng)
        g0 = unitary_field(grid16, 2, rng)[0, 0]
        g = np.broadcast_to(g0, pair.a2.data.shape).copy()
        assert abs(ymh(apply_gauge(g, pair)) - ymh(pair)) < 1e-12 * max(1.0, ymh(pair))

    def test_group_law_constant_exact(self, grid16, rng):
        pair = random_pair(grid16, 2, rng, amp=0.3)
        u1 = unitary_field(grid16, 2, rng)[3, 5]
        u2 = unitary_field(grid16, 2, rng)[7, 2]
        g1 = np.broadcast_to(u1, pair.a2.data.shape).copy()
        g2 = np.broadcast_to(u2, pair.a2.data.shape).copy()
        lhs = apply_gauge(g2, apply_gauge(g1, pair))
        rhs = apply_gauge(g1 @ g2, pair)
        assert np.abs(lhs.a2.data - rhs.a2.data).max() < 1e-13
        assert np.abs(lhs.phi.data - rhs.phi.data).max() < 1e-13

    def test_group_law_discretization_error(self):
        # non-constant gauges: the defect is the stencil's Leibniz error on
        # g1 g2 and shrinks at O(h^2) under refinement (fd backend)
        defects = []
        for N in (16, 32):
            grid = TorusGrid(N, 1.0, backend="fd")
            rng_local = np.random.default_rng(3)
            pair = random_pair(grid, 2, rng_local, amp=0.3, kmax=3)
            g1 = unitary_field(grid, 2, rng_local, amp=0.1, kmax=3)
            g2 = unitary_field(grid, 2, rng_local, amp=0.1, kmax=3)
            lhs = apply_gauge(g2, apply_gauge(g1, pair))
            rhs = apply_gauge(g1 @ g2, pair)
            defects.append(np.abs(lhs.a2.data - rhs.a2.data).max())
        assert defects[0] / defects[1] > 3.0

    def test_smooth_gauge_invariance_refines(self, rng):
        # non-constant unitary gauge: YMH difference -> 0 at O(h^2) on fd
        diffs = []
        for N in (32, 64):
            grid = TorusGrid(N, 1.0, backend="fd")
            rng_local = np.random.default_rng(7)
            X, Y = grid.coords()
            a = np.zeros((N, N, 2, 2), np.complex128)
            a[..., 0, 1] = 0.4 * np.exp(2j * np.pi * X)
            a[..., 1, 0] = -0.2 * np.exp(-2j * np.pi * Y)
            pair = HiggsPair.from_arrays(grid, a, np.zeros_like(a))
            theta = 0.5 * np.sin(2 * np.pi * X) + 0.3 * np.cos(2 * np.pi * Y)
            g = np.zeros_like(a)
            g[..., 0, 0] = np.exp(1j * theta)
            g[..., 1, 1] = np.exp(-1j * theta)
            diffs.append(abs(ymh(apply_gauge(g, pair)) - ymh(pair)))
        assert diffs[0] / diffs[1] > 3.0


class TestInfActionRhoStar:
    def test_zero_direction(self, grid16, rng):
        pair = random_pair(grid16, 2, rng)
        da, dp = inf_action(pair, np.zeros_like(pair.a2.data))
        assert np.abs(da.data).max() == 0 and np.abs(dp.data).max() == 0

    def test_stabilizer_direction(self, grid16):
        # constant u commuting with constant diagonal pair
        a = np.zeros((16, 16, 2, 2), np.complex128)
        a[..., 0, 0] = 0.2j
        a[..., 1, 1] = -0.5j
        pair = HiggsPair.from_arrays(grid16, a, a.copy())
        u = np.zeros_like(a)
        u[..., 0, 0] = 1j
        u[..., 1, 1] = 2j
        da, dp = inf_action(pair, u)
        assert np.abs(da.data).max() < 1e-14 and np.abs(dp.data).max() < 1e-14

    def test_orbit_derivative(self, sgrid16, rng):
        pair = random_pair(sgrid16, 2, rng, amp=0.3)
        u = skew_field(sgrid16, 2, rng, amp=0.5).data
        w, v = np.linalg.eigh(-1j * u)
        t = 1e-6
        gp = (v * np.exp(1j * t * w)[..., None, :]) @ _adj(v)
        gm = (v * np.exp(-1j * t * w)[..., None, :]) @ _adj(v)
        pp = apply_gauge(gp, pair)
        pm = apply_gauge(gm, pair)
        da_fd = (pp.a2.data - pm.a2.data) / (2 * t)
        dp_fd = (pp.phi.data - pm.phi.data) / (2 * t)
        da, dp = inf_action(pair, u)
        assert np.abs(da_fd - da.data).max() < 1e-6
        assert np.abs(dp_fd - dp.data).max() < 1e-6

    def test_adjointness(self, sgrid16, rng):
        # defining relation g(rho(u), X) = <u, rho*(X)> to 1e-10
        pair = random_pair(sgrid16, 2, rng)
        for _ in range(5):
            u = skew_field(sgrid16, 2, rng)
            X = (random_field(sgrid16, 2, rng, degree=FormDegree.DZBAR),
                 random_field(sgrid16, 2, rng, degree=FormDegree.DZ))
            ra, rp = inf_action(pair, u)
            lhs = pair_metric((ra, rp), X, sgrid16)
            rs = rho_star(pair, X)
            rhs = l2_inner_raw(sgrid16, u.data, rs.data)
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_rho_star_zero(self, grid16, rng):
        pair = random_pair(grid16, 2, rng)
        z = MatrixField.zeros(grid16, 2, FormDegree.DZBAR)
        z2 = MatrixField.zeros(grid16, 2, FormDegree.DZ)
        assert np.abs(rho_star(pair, (z, z2)).data).max() == 0.0

    def test_adjoint_identity_eq_2_8(self, sgrid16, rng):
        # rho* I rho(u) = -[*mu1, u] at every pair, to 1e-8 relative
        for _ in range(5):
            pair = random_pair(sgrid16, 2, rng, amp=0.4)
            u = skew_field(sgrid16, 2, rng)
            m = moment1(pair).data
            lhs = rho_star(pair, i_act(inf_action(pair, u))).data
            rhs = -(m @ u.data - u.data @ m)
            scale = max(np.abs(rhs).max(), 1e-14)
            assert np.abs(lhs - rhs).max() / scale < 1e-8


class TestWrappers:
    def test_lie_field_rejects_non_skew(self, grid16, rng):
        with pytest.raises(ValueError):
            LieField(random_field(grid16, 2, rng))

    def test_gauge_transform_reunitarizes(self, grid16, rng):
        g = unitary_field(grid16, 2, rng)
        g_drifted = g * (1 + 3e-9)
        gt = GaugeTransform(MatrixField(grid16, FormDegree.ZERO, g_drifted))
        check = gt.data @ _adj(gt.data)
        eye = np.zeros_like(check)
        eye[..., [0, 1], [0, 1]] = 1.0
        assert np.abs(check - eye).max() < 1e-10

    def test_fixed_det_trace_enforced(self, grid16, rng):
        a = random_field(grid16, 2, rng).data
        with pytest.raises(ValueError):
            HiggsPair.from_arrays(grid16, a, np.zeros_like(a), fixed_det=True)
