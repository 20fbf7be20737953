import numpy as np
import pytest

from higgsflow.errors import FormDegreeError, GridMismatchError
from higgsflow.geometry import (
    FormDegree,
    MatrixField,
    TorusGrid,
    d_prime,
    dbar,
    dbar_adjoint,
    integrate_trace,
    l2_inner,
    l2_norm,
)

from conftest import random_field


def plane_wave(grid, r, kx, ky):
    X, Y = grid.coords()
    phase = np.exp(2j * np.pi * (kx * X + ky * Y) / grid.L)
    data = np.zeros((grid.N, grid.N, r, r), np.complex128)
    data[..., np.arange(r), np.arange(r)] = phase[..., None]
    return MatrixField(grid, FormDegree.ZERO, data)


class TestGridInvariants:
    def test_spacing_never_drifts(self):
        g = TorusGrid(48, 0.7)
        assert g.h * g.N == g.L

    def test_too_coarse_rejected(self):
        with pytest.raises(ValueError):
            TorusGrid(4, 1.0)

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError):
            TorusGrid(16, 1.0, backend="dg")


class TestDbar:
    def test_constant_field_has_zero_derivative(self, grid16):
        C = MatrixField.identity(grid16, 2)
        C.data *= 1.3 - 0.2j
        assert np.abs(dbar(C).data).max() < 1e-14
        assert np.abs(d_prime(C).data).max() < 1e-14

    @pytest.mark.parametrize("backend", ["fd", "spectral"])
    def test_plane_wave_x(self, backend):
        # f = exp(2 pi i x / L) Id  ->  dbar f = (pi i / L) f  (analytic oracle)
        grid = TorusGrid(16, 1.0, backend=backend)
        f = plane_wave(grid, 2, 1, 0)
        exact = (1j * np.pi / grid.L) * f.data
        err = np.abs(dbar(f).data - exact).max()
        if backend == "fd":
            k = 2 * np.pi / grid.L
            assert err <= np.abs(exact).max() * (k * grid.h) ** 2 / 6 * 1.01
        else:
            assert err < 1e-12

    @pytest.mark.parametrize("backend", ["fd", "spectral"])
    def test_plane_wave_y_dprime(self, backend):
        # f = exp(2 pi i y / L) Id  ->  d' f = (pi / L) f
        grid = TorusGrid(16, 1.0, backend=backend)
        f = plane_wave(grid, 2, 0, 1)
        exact = (np.pi / grid.L) * f.data
        err = np.abs(d_prime(f).data - exact).max()
        if backend == "fd":
            k = 2 * np.pi / grid.L
            assert err <= np.abs(exact).max() * (k * grid.h) ** 2 / 6 * 1.01
        else:
            assert err < 1e-12

    def test_linearity(self, grid16, rng):
        f = random_field(grid16, 2, rng)
        g = random_field(grid16, 2, rng)
        lhs = dbar(MatrixField(grid16, FormDegree.ZERO, f.data + g.data)).data
        rhs = dbar(f).data + dbar(g).data
        assert np.abs(lhs - rhs).max() < 1e-12 * max(1.0, np.abs(rhs).max())

    def test_conjugation_symmetry(self, grid16, rng):
        # conj(dbar(conj f)) = d_prime(f), an exact identity of the stencil
        f = random_field(grid16, 3, rng)
        lhs = dbar(MatrixField(grid16, FormDegree.ZERO, f.data.conj())).data.conj()
        rhs = d_prime(f).data
        assert np.abs(lhs - rhs).max() < 1e-13 * max(1.0, np.abs(rhs).max())

    def test_degree_bookkeeping(self, grid16, rng):
        f = random_field(grid16, 2, rng)
        fb = dbar(f)
        assert fb.degree is FormDegree.DZBAR
        assert d_prime(f).degree is FormDegree.DZ
        assert d_prime(fb).degree is FormDegree.TOP
        with pytest.raises(FormDegreeError):
            dbar(fb)

    def test_second_order_convergence(self):
        # smooth analytic field: error drops x4 when N doubles (fd backend)
        errs = []
        for N in (16, 32):
            grid = TorusGrid(N, 1.0, backend="fd")
            X, Y = grid.coords()
            data = np.exp(np.sin(2 * np.pi * X) + np.cos(2 * np.pi * Y) * 1j)[..., None, None] \
                * np.eye(1)
            f = MatrixField(grid, FormDegree.ZERO, data)
            fx = np.pi * 2 * np.cos(2 * np.pi * X) * data[..., 0, 0]
            fy = -2j * np.pi * np.sin(2 * np.pi * Y) * data[..., 0, 0]
            exact = 0.5 * (fx + 1j * fy)
            errs.append(np.abs(dbar(f).data[..., 0, 0] - exact).max())
        assert errs[0] / errs[1] > 3.5

    def test_plane_wave_taylor_bound(self):
        grid = TorusGrid(32, 1.0, backend="fd")
        for kx, ky in [(1, 0), (2, 1), (3, 3), (0, 5)]:
            if kx ** 2 + ky ** 2 >= (grid.N / 4) ** 2:
                continue
            f = plane_wave(grid, 1, kx, ky)
            kz = np.pi * (1j * kx - ky) / grid.L  # dbar of the wave
            exact = kz * f.data
            scale = np.abs(exact).max()
            if scale == 0:
                continue
            kmag = 2 * np.pi * np.hypot(kx, ky) / grid.L
            bound = (kmag * grid.h) ** 2 / 6
            assert np.abs(dbar(f).data - exact).max() / scale <= bound * 1.05


class TestInnerProducts:
    def test_positive_definite(self, grid16, rng):
        u = random_field(grid16, 2, rng)
        assert l2_inner(u, u) > 0
        z = MatrixField.zeros(grid16, 2)
        assert l2_inner(z, z) == 0.0

    def test_identity_normalization(self):
        # u = Id, N=16, L=1, r=2: <u,u> = r L^2 = 2.0 (hand computation)
        grid = TorusGrid(16, 1.0)
        u = MatrixField.identity(grid, 2)
        assert abs(l2_inner(u, u) - 2.0) < 1e-13

    def test_symmetry(self, grid16, rng):
        u = random_field(grid16, 2, rng)
        v = random_field(grid16, 2, rng)
        assert abs(l2_inner(u, v) - l2_inner(v, u)) < 1e-12

    def test_degree_mismatch_rejected(self, grid16, rng):
        u = random_field(grid16, 2, rng)
        v = random_field(grid16, 2, rng, degree=FormDegree.DZ)
        with pytest.raises(FormDegreeError):
            l2_inner(u, v)

    def test_grid_mismatch_rejected(self, rng):
        u = random_field(TorusGrid(16, 1.0), 2, rng)
        v = random_field(TorusGrid(16, 2.0), 2, rng)
        with pytest.raises(GridMismatchError):
            l2_inner(u, v)

    @pytest.mark.parametrize("backend", ["fd", "spectral"])
    def test_integration_by_parts_exact(self, backend, rng):
        # <dbar u, v> + <u, -dbar_adjoint... the implemented adjoint stencil
        # satisfies <dbar u, v> = <u, -d_prime v> exactly on the periodic grid
        grid = TorusGrid(16, 1.0, backend=backend)
        for _ in range(5):
            u = random_field(grid, 2, rng)
            v = random_field(grid, 2, rng, degree=FormDegree.DZBAR)
            lhs = l2_inner(dbar(u), v)
            uv = MatrixField(grid, FormDegree.ZERO, v.data)
            rhs = -l2_inner(u, MatrixField(grid, FormDegree.ZERO,
                                           dbar_adjoint(uv).data))
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, l2_norm(u) * l2_norm(v))


class TestIntegrateTrace:
    def test_zero(self, grid16):
        assert integrate_trace(MatrixField.zeros(grid16, 2)) == 0

    def test_identity(self):
        grid = TorusGrid(16, 1.0)
        val = integrate_trace(MatrixField.identity(grid, 2))
        assert abs(val - 2.0) < 1e-13

    def test_complex_linearity(self, grid16, rng):
        f = random_field(grid16, 2, rng)
        g = random_field(grid16, 2, rng)
        c = 0.7 - 1.9j
        lhs = integrate_trace(MatrixField(grid16, FormDegree.ZERO, c * f.data + g.data))
        rhs = c * integrate_trace(f) + integrate_trace(g)
        assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(rhs))
