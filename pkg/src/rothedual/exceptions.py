"""Exception types raised across the package."""


class InvalidParameterError(ValueError):
    """An argument is outside its admissible range."""


class ShapeMismatchError(ValueError):
    """A field does not match the grid it is used with."""


class DomainError(ValueError):
    """A model was evaluated outside the set where the quantity is defined."""


class SolverError(RuntimeError):
    """A linear or nonlinear solve failed to reach its tolerance.

    ``best_residual`` holds the smallest residual seen, when known.
    """

    def __init__(self, message, best_residual=None, step=None):
        super().__init__(message)
        self.best_residual = best_residual
        self.step = step


class AdmissibilityError(ValueError):
    """The oscillation condition ``(b - a) / 2 * K < 1`` does not hold."""
