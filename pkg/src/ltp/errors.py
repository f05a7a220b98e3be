"""Exception types shared across the pipeline."""


class LtpError(Exception):
    """Base class for all errors raised by this package."""


class MalformedXml(LtpError):
    """Input could not be parsed as XML."""


class DanglingNodeRef(LtpError):
    """A way references a node id that was never declared."""


class EmptyWay(LtpError):
    """A way resolved to fewer than two usable points."""


class DimensionMismatch(LtpError):
    """Vector or matrix dimensions are inconsistent."""


class ServiceUnavailable(LtpError):
    """A remote service did not answer within the configured retries."""


class InvalidChunking(LtpError):
    """Chunk size / overlap parameters are inconsistent."""


class EmptyStore(LtpError):
    """Retrieval was attempted against a store with no chunks."""


class WidthNotFound(LtpError):
    """No lane width could be parsed out of a model response."""


class WidthOutOfRange(LtpError):
    """Parsed lane width falls outside the sanity band."""


class DegeneratePolyline(LtpError):
    """Polyline has fewer than two distinct points."""


class MissingLaneWidths(LtpError):
    """A fusion variant needing lane widths was selected without them."""


class DomainError(LtpError):
    """A metric value lies outside its admissible range."""


class FrameMismatch(LtpError):
    """Ground-truth and prediction files disagree on frame ids."""


class SchemaError(LtpError):
    """A scenario or report file violates the expected schema."""
