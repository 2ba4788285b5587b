"""Exception types shared across the package."""


class DiamondXrayError(Exception):
    """Base class for all package errors."""


class AxisPoint(DiamondXrayError):
    """A point lies on (or too close to) the central world line, where the
    radially defined quantities are singular."""


class DegenerateSegment(DiamondXrayError):
    """Segment endpoints coincide to within tolerance."""


class EmptyFiber(DiamondXrayError):
    """Rejection sampling of a fiber failed; the break point is too close to
    a corner of the diamond."""


class NonFiniteState(DiamondXrayError):
    """An ODE state became NaN or infinite."""


class StepUnderflow(DiamondXrayError):
    """A finite-difference step could not be shrunk enough to keep the
    perturbed configuration admissible."""


class SingularBasis(DiamondXrayError):
    """Direction vectors are numerically linearly dependent."""


class InconsistentData(DiamondXrayError):
    """Scattering data from the two determined-path routes disagree beyond
    tolerance during gauge recovery."""


class NonInvertibleProjection(DiamondXrayError):
    """Polar projection onto the orthogonal group hit a singular factor."""


class IndexOutOfRange(DiamondXrayError):
    """Basis mode index outside the truncation."""


class AxisUndefined(DiamondXrayError):
    """Light-sink time component requested on the axis without a ray
    direction to take the limit along."""


class DivergentChain(DiamondXrayError):
    """MCMC log-posterior repeatedly hit -inf."""


class ConfigError(DiamondXrayError):
    """Malformed or unknown run-configuration content."""
