"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: validation errors -> 2, numerical
failures -> 3, I/O problems -> 4.
"""


class RootskelError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(RootskelError):
    """Inputs violate a documented precondition or invariant."""


class DegenerateProjection(RootskelError):
    """Point is on or behind the camera plane (camera-frame z <= 1e-12)."""


class DegenerateBaseline(RootskelError):
    """Two-view triangulation with coincident camera centers."""


class IllConditioned(RootskelError):
    """Linear system too close to rank-deficient to trust the solution."""


class ShapeMismatch(ValidationError):
    """Prediction and target grids disagree in shape."""


class InsufficientViews(RootskelError):
    """A track has fewer than two observations and cannot be triangulated."""


class SingularSystem(RootskelError):
    """Damped normal equations are numerically singular."""


class DegenerateSegment(RootskelError):
    """Segment too short to define a direction (length < 1e-9)."""


class StartOffMask(RootskelError):
    """A start pixel lies farther than the snap radius from any foreground."""


class MissingInput(ValidationError):
    """A required bundle file is absent."""
