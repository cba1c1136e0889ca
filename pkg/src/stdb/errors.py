"""Exception types shared across the package."""


class StdbError(Exception):
    """Base class for all package-specific failures."""


class SingularSchedule(StdbError):
    """A drift/diffusion schedule produced non-finite entries at a grid time."""

    def __init__(self, t, detail=""):
        self.t = t
        super().__init__(f"schedule not finite at t={t:.6g}" + (f": {detail}" if detail else ""))


class IllConditioned(StdbError):
    """A per-step transition factor is too ill-conditioned to invert."""


class MissingPropagator(StdbError):
    """Requested interval is not covered by the solved propagator grid."""


class NotPSD(StdbError):
    """A covariance matrix failed its positive-semidefiniteness check."""


class NearPinned(StdbError):
    """Statistics requested too close to the pinned endpoint (covariance singular)."""


class TooLarge(StdbError):
    """Requested problem size exceeds the configured dense-algebra limit."""


class EigenFail(StdbError):
    """Symmetric eigendecomposition failed to converge."""


class DomainError(StdbError):
    """Argument outside the mathematical domain of the operation."""


class DivergedPath(StdbError):
    """A simulated trajectory produced NaN/Inf."""

    def __init__(self, path_index, step_index):
        self.path_index = path_index
        self.step_index = step_index
        super().__init__(f"path {path_index} diverged at step {step_index}")


class TrainingDiverged(StdbError):
    """Training loss became non-finite."""


class ExtractFail(StdbError):
    """Finite-difference derivative extraction produced non-finite values."""


class InfeasibleFamily(StdbError):
    """Every evaluated member of a schedule family was rejected."""


class UnknownDataset(StdbError):
    """Dataset name not present in the registry."""


class DimensionMismatch(StdbError):
    """Two sample sets do not share the same dimensionality."""


class ConfigError(StdbError):
    """Run configuration failed validation."""
