"""Exception and warning types shared across the package."""


class EvtriskError(Exception):
    """Base class for all evtrisk failures."""


class InputError(EvtriskError):
    """Invalid user input: bad file, bad flag value, violated precondition."""


class DegenerateFitError(EvtriskError):
    """Singular local design or degenerate sample in the first stage."""


class TailError(EvtriskError):
    """Tail construction or tail-moment precondition failed."""


class ConvergenceError(EvtriskError):
    """Iterative solver did not converge."""


class PoleError(EvtriskError):
    """Closed-form expression evaluated at a pole of one of its factors."""


class EstimationWarning(UserWarning):
    """Non-fatal estimation issue: fallbacks, clamps, boundary solutions."""
