"""Exception types raised across the toolkit.

Everything derives from SpacearmError so callers can catch the whole family
with one clause.  The CLI maps these onto exit codes and machine-readable
stderr records.
"""


class SpacearmError(Exception):
    """Base class for all toolkit errors."""


class NotInLieAlgebra(SpacearmError):
    """A 4x4 matrix does not have the twist structure expected by vee()."""


class DimensionMismatch(SpacearmError):
    """An array argument has the wrong shape for the requested operation."""


class NearSingular(SpacearmError):
    """Manipulability fell below the rank tolerance; Jacobian operations unsafe."""


class SingularConfiguration(SpacearmError):
    """The arm is at (or numerically at) a kinematic singularity."""


class NotSymmetric(SpacearmError):
    """A gain or inertia matrix that must be symmetric is not."""


class NotPositiveDefinite(SpacearmError):
    """A gain or inertia matrix that must be positive definite is not."""


class TauOutOfRange(SpacearmError):
    """Soft-update interpolation factor outside (0, 1]."""


class SchemaMismatch(SpacearmError):
    """Serialized data (state vector, CSV, model file) has an unexpected layout."""


class InsufficientData(SpacearmError):
    """A replay buffer does not yet hold enough experiences to sample a batch."""


class SeedExhausted(SpacearmError):
    """Rejection sampling failed to find an admissible scene within its budget."""


class ConfigInvalid(SpacearmError):
    """An experiment configuration failed validation."""


class CheckpointMissing(SpacearmError):
    """A required checkpoint file was not provided or does not exist."""


class CheckpointCorrupt(SpacearmError):
    """A checkpoint file exists but its contents cannot be used."""
