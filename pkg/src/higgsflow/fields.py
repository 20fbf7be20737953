"""Higgs pairs, gauge actions, moment maps, the YMH/Q_H functionals and gradients.

State is the pair (A'', phi): A'' the (0,1) part of a unitary connection on the
trivial rank-r bundle (stored as its dzbar coefficient `a`), phi the Higgs field
(dz coefficient `p`).  The (1,0) part is never stored: A' = -(A'')^dagger.

Key assembled quantities, in dx^dy-coefficient convention:

    *F_A        = -2i ( d'a + dbar(a^H) + [a, a^H] )
    *[phi,phi*] = -2i [p, p^H]
    *mu1        = *F_A + *[phi,phi*]              (pointwise skew-Hermitian)
    muC         = 2i ( dbar p + [a, p] )          (vanishes exactly on B)

The downward YMH flow velocity (the right-hand sides of the flow equations) is

    dA''/dt = i D''(*mu1),   dphi/dt = i [phi, *mu1],

with D''u = dbar u + [a, u].  Along this velocity d/dt YMH = -2 g(v, v) where g
is the tangent metric `pair_metric` below; the finite-difference gradient test
pins the constant.

The complex structure on the tangent space acts as multiplication by -i on both
components (`i_act`); this is the sign for which the adjoint identity
rho* I rho(u) = -[*mu1, u] holds exactly on the lattice with the conventions
above (see the decision ledger for the sign discussion).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, IllConditionedGaugeError
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

_TRACELESS_TOL = 1e-9
_UNITARY_TOL = 1e-10
_SKEW_TOL = 1e-12


def _adj(f: np.ndarray) -> np.ndarray:
    """Pointwise Hermitian adjoint of a matrix field."""
    return f.conj().swapaxes(-1, -2)


def _comm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def _traceless(f: np.ndarray) -> np.ndarray:
    r = f.shape[-1]
    tr = np.einsum("xyii->xy", f) / r
    out = f.copy()
    out[..., np.arange(r), np.arange(r)] -= tr[..., None]
    return out


@dataclass
class HiggsPair:
    """A point (A'', phi) of the configuration space on a TorusGrid."""

    grid: TorusGrid
    a2: MatrixField  # dzbar coefficient of A''
    phi: MatrixField  # dz coefficient of phi
    fixed_det: bool = False

    def __post_init__(self):
        if self.a2.degree is not FormDegree.DZBAR or self.phi.degree is not FormDegree.DZ:
            raise ValueError("HiggsPair needs a2: dzbar field and phi: dz field")
        if not (self.a2.grid.compatible(self.grid) and self.phi.grid.compatible(self.grid)):
            raise GridMismatchError("pair components live on a different grid")
        if self.a2.r != self.phi.r:
            raise GridMismatchError("a2 and phi have different ranks")
        if self.fixed_det:
            for name, f in (("a2", self.a2.data), ("phi", self.phi.data)):
                drift = np.abs(np.einsum("xyii->xy", f)).max()
                if drift > _TRACELESS_TOL:
                    raise ValueError(
                        f"fixed_det pair has tr {name} = {drift:.2e} > {_TRACELESS_TOL}"
                    )

    @property
    def r(self) -> int:
        return self.a2.r

    @classmethod
    def from_arrays(cls, grid: TorusGrid, a2: np.ndarray, phi: np.ndarray,
                    fixed_det: bool = False) -> "HiggsPair":
        return cls(
            grid,
            MatrixField(grid, FormDegree.DZBAR, a2),
            MatrixField(grid, FormDegree.DZ, phi),
            fixed_det,
        )

    @classmethod
    def zero(cls, grid: TorusGrid, r: int, fixed_det: bool = False) -> "HiggsPair":
        z = np.zeros((grid.N, grid.N, r, r), dtype=np.complex128)
        return cls.from_arrays(grid, z, z.copy(), fixed_det)

    def copy(self) -> "HiggsPair":
        return HiggsPair(self.grid, self.a2.copy(), self.phi.copy(), self.fixed_det)


@dataclass
class LieField:
    """Element of Lie(G): pointwise skew-Hermitian 0-form field."""

    field: MatrixField

    def __post_init__(self):
        if self.field.degree is not FormDegree.ZERO:
            raise ValueError("LieField must be a 0-form")
        drift = np.abs(self.field.data + _adj(self.field.data)).max()
        if drift > _SKEW_TOL:
            raise ValueError(f"LieField not skew-Hermitian: drift {drift:.2e}")

    @property
    def data(self) -> np.ndarray:
        return self.field.data

    @property
    def grid(self) -> TorusGrid:
        return self.field.grid


@dataclass
class GaugeTransform:
    """Pointwise unitary gauge transformation; re-unitarized on construction."""

    field: MatrixField
    unitarity_drift: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.field.degree is not FormDegree.ZERO:
            raise ValueError("gauge transformation must be a 0-form")
        g = self.field.data
        r = g.shape[-1]
        eye = np.eye(r)
        drift = np.abs(g @ _adj(g) - eye).max()
        self.unitarity_drift = float(drift)
        if drift > _UNITARY_TOL:
            # polar projection g -> U from g = U P
            u_svd, _, vh = np.linalg.svd(g)
            self.field = MatrixField(self.field.grid, FormDegree.ZERO, u_svd @ vh)

    @property
    def data(self) -> np.ndarray:
        return self.field.data

    @property
    def grid(self) -> TorusGrid:
        return self.field.grid


@dataclass
class ComplexGauge:
    """Pointwise invertible gauge transformation with a conditioning guard."""

    field: MatrixField
    cond_max: float = 1e8

    def __post_init__(self):
        if self.field.degree is not FormDegree.ZERO:
            raise ValueError("gauge transformation must be a 0-form")
        s = np.linalg.svd(self.field.data, compute_uv=False)
        smin, smax = float(s[..., -1].min()), float(s[..., 0].max())
        if smin <= 0.0 or smax / smin > self.cond_max:
            raise IllConditionedGaugeError(
                f"complex gauge condition number {smax / max(smin, 1e-300):.3e}"
                f" exceeds {self.cond_max:.1e}"
            )

    @property
    def data(self) -> np.ndarray:
        return self.field.data

    @property
    def grid(self) -> TorusGrid:
        return self.field.grid


def _gauge_data(g) -> np.ndarray:
    if isinstance(g, (GaugeTransform, ComplexGauge)):
        return g.data
    if isinstance(g, MatrixField):
        return g.data
    return np.asarray(g, dtype=np.complex128)


# assembled fields (raw-array cores used by flows, wrapped public ops below)

def star_curvature_raw(grid: TorusGrid, a: np.ndarray) -> np.ndarray:
    aH = _adj(a)
    s = d_prime_raw(grid, a) + dbar_raw(grid, aH) + _comm(a, aH)
    f = -2j * s
    return 0.5 * (f - _adj(f))  # skew-Hermitize: drift is an error metric, not state


def star_mu1_raw(grid: TorusGrid, a: np.ndarray, p: np.ndarray) -> np.ndarray:
    aH = _adj(a)
    s = d_prime_raw(grid, a) + dbar_raw(grid, aH) + _comm(a, aH) + _comm(p, _adj(p))
    m = -2j * s
    return 0.5 * (m - _adj(m))


def higgs_residual_field_raw(grid: TorusGrid, a: np.ndarray, p: np.ndarray) -> np.ndarray:
    return dbar_raw(grid, p) + _comm(a, p)


def velocity_raw(grid: TorusGrid, a: np.ndarray, p: np.ndarray, fixed_det: bool):
    """Downward flow velocity (i D''(*mu1), i [p, *mu1]) and *mu1 itself."""
    m = star_mu1_raw(grid, a, p)
    va = 1j * (dbar_raw(grid, m) + _comm(a, m))
    vp = 1j * _comm(p, m)
    if fixed_det:
        va = _traceless(va)
        vp = _traceless(vp)
    return va, vp, m


def curvature(pair: HiggsPair) -> MatrixField:
    """*F_A as a dx^dy-coefficient 0-form-valued 2-form field."""
    out = star_curvature_raw(pair.grid, pair.a2.data)
    if not np.all(np.isfinite(out.view(np.float64))):
        raise ValueError("curvature produced NaN/Inf")
    return MatrixField(pair.grid, FormDegree.TOP, out)


def moment1(pair: HiggsPair) -> LieField:
    """*mu1 = *(F_A + [phi, phi*]), pointwise skew-Hermitian."""
    m = star_mu1_raw(pair.grid, pair.a2.data, pair.phi.data)
    return LieField(MatrixField(pair.grid, FormDegree.ZERO, m))


def momentC(pair: HiggsPair) -> MatrixField:
    """mu_C = 2i d_A'' phi; zero exactly characterizes membership in B."""
    c = 2j * higgs_residual_field_raw(pair.grid, pair.a2.data, pair.phi.data)
    return MatrixField(pair.grid, FormDegree.TOP, c)


def higgs_residual(pair: HiggsPair) -> float:
    """|| d_A'' phi ||_L2 (the B-membership residual; = ||mu_C|| / 2)."""
    f = higgs_residual_field_raw(pair.grid, pair.a2.data, pair.phi.data)
    return l2_norm_raw(pair.grid, f)


def ymh(pair: HiggsPair) -> float:
    m = star_mu1_raw(pair.grid, pair.a2.data, pair.phi.data)
    return l2_inner_raw(pair.grid, m, m)


def qh(pair: HiggsPair) -> float:
    c = 2j * higgs_residual_field_raw(pair.grid, pair.a2.data, pair.phi.data)
    return ymh(pair) + l2_inner_raw(pair.grid, c, c)


def grad_ymh(pair: HiggsPair):
    """Downward flow velocity (the negative gradient direction).

    Returns (dA2, dphi) as (dzbar, dz) MatrixFields.  The finite-difference
    identity is  d/de YMH(pair + e v) = -2 pair_metric(grad_ymh(pair), v).
    """
    va, vp, _ = velocity_raw(pair.grid, pair.a2.data, pair.phi.data, pair.fixed_det)
    return (
        MatrixField(pair.grid, FormDegree.DZBAR, va),
        MatrixField(pair.grid, FormDegree.DZ, vp),
    )


def grad_norm(pair: HiggsPair) -> float:
    """sqrt(l2(va)^2 + l2(vp)^2) of the flow velocity."""
    va, vp, _ = velocity_raw(pair.grid, pair.a2.data, pair.phi.data, pair.fixed_det)
    return np.sqrt(l2_inner_raw(pair.grid, va, va) + l2_inner_raw(pair.grid, vp, vp))


def pair_metric(t1, t2, grid: TorusGrid) -> float:
    """The tangent-space metric: 4 [ l2(a1, a2) + l2(phi1, phi2) ].

    The factor 4 is the coefficient-form value of the 2 re int tr{. *bar .}
    metric under the dz^dzbar = -2i dx^dy convention.
    """
    (a1, p1), (a2, p2) = t1, t2
    a1 = a1.data if isinstance(a1, MatrixField) else a1
    p1 = p1.data if isinstance(p1, MatrixField) else p1
    a2 = a2.data if isinstance(a2, MatrixField) else a2
    p2 = p2.data if isinstance(p2, MatrixField) else p2
    return 4.0 * (l2_inner_raw(grid, a1, a2) + l2_inner_raw(grid, p1, p2))


def apply_gauge(g, pair: HiggsPair) -> HiggsPair:
    """Gauge action (A'', phi) -> (g^-1 A'' g + g^-1 dbar g, g^-1 phi g)."""
    gd = _gauge_data(g)
    gi = np.linalg.inv(gd)
    a = gi @ pair.a2.data @ gd + gi @ dbar_raw(pair.grid, gd)
    p = gi @ pair.phi.data @ gd
    fixed_det = pair.fixed_det
    if fixed_det:
        # determinant-1 gauge keeps traces zero up to stencil error; reproject
        a = _traceless(a)
        p = _traceless(p)
    return HiggsPair.from_arrays(pair.grid, a, p, fixed_det)


def inf_action(pair: HiggsPair, u) -> tuple:
    """rho_(A'',phi)(u) = (d_A'' u, [phi, u]) as (dzbar, dz) fields."""
    ud = u.data if isinstance(u, (LieField, MatrixField)) else np.asarray(u)
    da = dbar_raw(pair.grid, ud) + _comm(pair.a2.data, ud)
    dp = _comm(pair.phi.data, ud)
    return (
        MatrixField(pair.grid, FormDegree.DZBAR, da),
        MatrixField(pair.grid, FormDegree.DZ, dp),
    )


def rho_star(pair: HiggsPair, X) -> LieField:
    """Exact adjoint of inf_action: g(rho(u), X) = <u, rho_star(X)> for all u.

    With W = -d'(X_a) + [a^H, X_a] + [p^H, X_phi] the adjoint is the
    skew-Hermitian part 2 (W - W^H)  (the 4 from the metric against the
    pairing on Lie(G), halved by the skew projection).
    """
    Xa, Xp = X
    Xa = Xa.data if isinstance(Xa, MatrixField) else Xa
    Xp = Xp.data if isinstance(Xp, MatrixField) else Xp
    a, p = pair.a2.data, pair.phi.data
    W = -d_prime_raw(pair.grid, Xa) + _comm(_adj(a), Xa) + _comm(_adj(p), Xp)
    out = 2.0 * (W - _adj(W))
    return LieField(MatrixField(pair.grid, FormDegree.ZERO, out))


def i_act(t):
    """Complex structure on tangent vectors: multiplication by -i on both parts."""
    Xa, Xp = t
    if isinstance(Xa, MatrixField):
        return (
            MatrixField(Xa.grid, Xa.degree, -1j * Xa.data),
            MatrixField(Xp.grid, Xp.degree, -1j * Xp.data),
        )
    return (-1j * Xa, -1j * Xp)


def sup_mu(pair: HiggsPair) -> float:
    """sup over sites of |*mu1| (Frobenius norm per site)."""
    return sup_norm(star_mu1_raw(pair.grid, pair.a2.data, pair.phi.data))
