import numpy as np
import pytest

from higgsflow.geometry import FormDegree, MatrixField, TorusGrid


def random_field(grid, r, rng, degree=FormDegree.ZERO, kmax=None, amp=1.0):
    """Band-limited random matrix field (alias-free products when kmax <= N/4)."""
    N = grid.N
    kmax = kmax if kmax is not None else max(2, N // 4 - 1)
    spec = np.zeros((N, N, r, r), np.complex128)
    for kx in range(-kmax, kmax + 1):
        for ky in range(-kmax, kmax + 1):
            if kx * kx + ky * ky <= kmax * kmax:
                c = (rng.standard_normal((r, r)) + 1j * rng.standard_normal((r, r)))
                spec[kx % N, ky % N] += c * np.exp(-(kx * kx + ky * ky) / 4.0)
    return MatrixField(grid, degree, amp * np.fft.ifft2(spec, axes=(0, 1)) * N * N)


def skew_field(grid, r, rng, kmax=None, amp=1.0):
    f = random_field(grid, r, rng, kmax=kmax, amp=amp)
    data = 0.5 * (f.data - f.data.conj().swapaxes(-1, -2))
    return MatrixField(grid, FormDegree.ZERO, data)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def grid16():
    return TorusGrid(16, 1.0, backend="fd")


@pytest.fixture
def sgrid16():
    return TorusGrid(16, 1.0, backend="spectral")


@pytest.fixture
def sgrid24():
    return TorusGrid(24, 1.0, backend="spectral")
