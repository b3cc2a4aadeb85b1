"""Exception hierarchy shared by all pilotkit subsystems."""


class PilotkitError(Exception):
    """Base class for every error raised by pilotkit."""


class ValidationError(PilotkitError, ValueError):
    """A description failed validation; ``field`` names the offending field."""

    def __init__(self, field, message=None):
        self.field = field
        self.message = message or f"invalid value for {field!r}"
        super().__init__(f"{field}: {self.message}")


class IllegalTransition(PilotkitError):
    def __init__(self, from_state, to_state, machine=None):
        self.from_state = from_state
        self.to_state = to_state
        self.machine = machine
        name = f" ({machine})" if machine else ""
        super().__init__(f"illegal transition {_name(from_state)} -> {_name(to_state)}{name}")


def _name(state):
    return getattr(state, "value", state)


# -- resource backends -----------------------------------------------------

class ResourceError(PilotkitError):
    """Problems with resource configuration or job submission."""


class UnknownResource(ResourceError, KeyError):
    def __str__(self):
        return f"unknown resource configuration {self.args[0]!r}"


class OversubscribedRequest(ResourceError):
    pass


class BackendUnavailable(ResourceError):
    pass


class UnknownJob(ResourceError, KeyError):
    pass


# -- communication mesh ----------------------------------------------------

class QueueClosed(PilotkitError):
    """The queue is shutting down; drain it, do not retry."""


class StoreError(PilotkitError, OSError):
    """Fatal storage failure (disk full, I/O error) for a session store."""


class CorruptRecord(UserWarning):
    """A log line could not be decoded; it was skipped."""

    def __init__(self, path, line, reason=""):
        self.path = str(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{self.path}:{line}: corrupt record skipped ({reason})")


# -- client ----------------------------------------------------------------

class DuplicateAttachment(PilotkitError):
    pass


class UnschedulableUnit(PilotkitError):
    pass


class MissingSource(PilotkitError, FileNotFoundError):
    pass


class Timeout(PilotkitError, TimeoutError):
    pass


# -- agent -----------------------------------------------------------------

class ImpossibleRequest(PilotkitError):
    """The request can never fit the slot table (as opposed to a transient no-fit)."""


class DoubleRelease(PilotkitError):
    pass


class MissingTemplate(PilotkitError, KeyError):
    def __str__(self):
        return f"launch template {self.args[0]!r} is not configured"


class SpawnFailure(PilotkitError):
    pass


class MissingStagedFile(PilotkitError, FileNotFoundError):
    pass


class EscapePath(PilotkitError):
    pass


class MissingOutput(PilotkitError, FileNotFoundError):
    pass


# -- ensemble --------------------------------------------------------------

class UnknownTask(PilotkitError, KeyError):
    pass


class StaleUpdate(PilotkitError):
    pass


class InvalidControl(PilotkitError):
    pass


class ImmutablePast(PilotkitError):
    pass


class UnsupportedRequirement(PilotkitError):
    pass


class ResourceAcquisitionFailed(PilotkitError):
    pass


class RecoveryLoop(PilotkitError):
    pass


# -- profiling -------------------------------------------------------------

class UnknownEntity(PilotkitError, KeyError):
    pass


class IllegalHistory(PilotkitError):
    pass


class PilotNeverActive(PilotkitError):
    pass


class NoSuchSession(PilotkitError, FileNotFoundError):
    pass
