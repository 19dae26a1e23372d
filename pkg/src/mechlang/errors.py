"""Exception hierarchy shared across the package."""


class MechError(Exception):
    """Base class for every error raised by mechlang."""


class UnknownAggregate(MechError):
    pass


class CycleDetected(MechError):
    """A part graph contains a cycle; the message names the cycle path."""

    def __init__(self, path):
        self.path = tuple(path)
        super().__init__("part cycle: " + " -> ".join(self.path))


class UnresolvedReference(MechError):
    pass


class UnitMismatch(MechError):
    pass


class PreconditionNotMet(MechError):
    pass


class AxiomViolated(MechError):
    pass


class ConservationViolated(MechError):
    pass


class InitError(MechError):
    pass


class DeadlockError(MechError):
    pass


class TimeInPast(MechError):
    pass


class DuplicateId(MechError):
    pass


class InvalidPayload(MechError):
    pass


class UnknownEntry(MechError):
    pass


class UnboundIdentifier(MechError):
    pass
