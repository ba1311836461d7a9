"""Exception hierarchy shared by every simulator module."""


class FedRGError(Exception):
    """Base class for simulator failures."""


class ValidationError(FedRGError, ValueError):
    """An input or precondition was violated."""


class DimensionError(ValidationError):
    """Sphere dimension below 2 or mismatched between operands."""


class ManifestError(ValidationError):
    """A manifest field failed validation; `field` is the dotted path."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DegenerateMixtureError(FedRGError):
    """Every mixture component has zero weight or zero density."""


class NoiseModelError(ValidationError):
    """A transition kernel cannot be built or applied."""


class DataError(ValidationError):
    """Dataset generation or partitioning is infeasible."""


class LearnerError(FedRGError):
    """A training step produced non-finite values."""


class RoundError(FedRGError):
    """Failure inside a communication round, tagged with its context."""

    def __init__(self, round_index, client_id, cause):
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause
        where = f"round {round_index}"
        if client_id is not None:
            where += f", client {client_id}"
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
