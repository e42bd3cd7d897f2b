"""Exception types shared across the package."""


class PmlbemError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(PmlbemError, ValueError):
    """A scene configuration failed validation; message names the field."""


class InvalidOrderError(PmlbemError, ValueError):
    """Discretization order below the supported minimum."""


class ShapeMismatchError(PmlbemError, ValueError):
    """Nodal data does not match the grid it is attached to."""


class DegenerateChartError(PmlbemError, ValueError):
    """A surface chart has a (numerically) vanishing tangent cross product."""


class UnsupportedGeometryError(PmlbemError, ValueError):
    """Requested geometry violates a structural assumption (e.g. a
    perturbation escaping the physical box)."""


class SingularEvaluationError(PmlbemError, ValueError):
    """Kernel evaluation requested at coincident source/target points."""


class NearSingularError(PmlbemError, ValueError):
    """Evaluation point too close to a surface for the off-surface path."""


class DegenerateIncidenceError(PmlbemError, ValueError):
    """Reflection/transmission denominators vanish (grazing degeneracy)."""


class IterativeSolveError(PmlbemError, RuntimeError):
    """GMRES failed to reach the requested residual; carries the report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class UndefinedMetricError(PmlbemError, ZeroDivisionError):
    """Relative error against an identically zero reference field."""
