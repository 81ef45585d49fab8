"""Exception hierarchy for the harness.

Exceptions are grouped by the CLI failure class they map to: config/usage
problems exit 2, data validation problems exit 3, runtime problems exit 4.
"""


class TokenwattError(Exception):
    exit_code = 4


class ConfigError(TokenwattError):
    """Bad configuration or usage; the run never started."""

    exit_code = 2


class DataError(TokenwattError):
    """Input artifacts or event streams failed validation."""

    exit_code = 3


# --- configuration / usage ---------------------------------------------------

class ParseError(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


class BadValue(ConfigError):
    pass


class BadParams(ConfigError):
    pass


class EmptyDataset(ConfigError):
    pass


class OverlappingBuckets(ConfigError):
    pass


class MissingColumn(ConfigError):
    pass


class InfeasibleSpec(ConfigError):
    pass


# --- data validation ----------------------------------------------------------

class MissingRunBoundary(DataError):
    pass


class OrderViolation(DataError):
    def __init__(self, request_id, detail=""):
        self.request_id = request_id
        super().__init__(f"event order violation for request {request_id!r}" + (f": {detail}" if detail else ""))


class MissingTokenCount(DataError):
    def __init__(self, request_id, detail=""):
        self.request_id = request_id
        super().__init__(f"missing token count for request {request_id!r}" + (f": {detail}" if detail else ""))


class DuplicateEvent(DataError):
    def __init__(self, request_id, kind):
        self.request_id = request_id
        self.kind = kind
        super().__init__(f"duplicate {kind} event for request {request_id!r}")


class UnorderedSamples(DataError):
    pass


class EmptyTimeline(DataError):
    pass


class IdentityViolation(DataError):
    """Phase-split energy does not match the whole-run integral; an attribution bug."""


class MismatchedRun(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class MissingArtifact(DataError):
    def __init__(self, directory, name="metrics.json"):
        self.directory = directory
        super().__init__(f"missing {name} in {directory}")


class EmptyTable(DataError):
    pass


# --- runtime / sensors ---------------------------------------------------------

class SensorUnavailable(TokenwattError):
    pass


class PermissionDenied(TokenwattError):
    pass


class ReadFailed(TokenwattError):
    """One read from a source failed; the caller records a gap and may retry."""


class FirstReadNoDelta(TokenwattError):
    """Counter backends cannot produce a wattage until two readings exist."""


class TraceExhausted(TokenwattError):
    """A trace-replay source delivered its last sample."""


class AllSourcesFailed(TokenwattError):
    pass


class BindFailed(TokenwattError):
    pass


class WorkloadSpawnFailed(TokenwattError):
    pass


class NoEventsReceived(TokenwattError):
    pass


class NonPositiveDuration(TokenwattError):
    pass


class NoGpuSources(TokenwattError):
    pass


class NegativeRate(TokenwattError):
    pass
