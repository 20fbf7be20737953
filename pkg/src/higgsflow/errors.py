"""Exception types shared across the package."""


class GridMismatchError(ValueError):
    """Fields defined on incompatible grids (different N, L or backend)."""


class FormDegreeError(ValueError):
    """Operation applied to a field of the wrong form degree."""


class BlowUpError(RuntimeError):
    """A flow produced NaN/Inf or exceeded the blow-up threshold.

    Carries the last stable state (if any) in ``last_state`` for diagnostics.
    """

    def __init__(self, message, last_state=None, t=None):
        super().__init__(message)
        self.last_state = last_state
        self.t = t


class PositivityError(RuntimeError):
    """A Hermitian metric lost positive definiteness (time step too large)."""


class GapCollapseError(RuntimeError):
    """Spectral gap between sorted eigenvalue fields collapsed at some site."""


class IllConditionedGaugeError(ValueError):
    """A complex gauge transformation exceeded the allowed condition number."""


class NotSettledError(RuntimeError):
    """A flow limit is not settled enough for spectral classification."""
