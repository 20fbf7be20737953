"""higgsflow: a numerical laboratory for the Yang-Mills-Higgs gradient flow
on Higgs bundles over a flat torus, with a finite-dimensional hyperkaehler
moment-map sandbox for machine-precision identity tests."""

__version__ = "0.1.0"

from .geometry import FormDegree, MatrixField, TorusGrid, dbar, d_prime, l2_inner, integrate_trace
from .fields import (
    ComplexGauge,
    GaugeTransform,
    HiggsPair,
    LieField,
    apply_gauge,
    curvature,
    grad_ymh,
    higgs_residual,
    inf_action,
    moment1,
    momentC,
    qh,
    rho_star,
    ymh,
)
from .flow import (
    FlowConfig,
    HermitianMetric,
    Trajectory,
    compare_flows,
    gauge_fix_ode,
    reconstruct_pair,
    run_gradient_flow,
    run_simpson_heat,
    step_gradient_flow,
    step_simpson_heat,
)
from .critical import (
    KAPPA,
    CriticalReport,
    HNType,
    Order,
    chern_weil_degree,
    convex_invariant,
    eigenprojector,
    graded_object_check,
    hn_partial_order,
    hn_type,
    is_critical,
    loja_fit,
)
from .initial import (
    make_random_smooth,
    make_split_perturbation,
    make_winding_split,
    purify_split,
)

__all__ = [name for name in dir() if not name.startswith("_")]
