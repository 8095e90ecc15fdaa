"""Exception hierarchy. CLI exit codes map off these types."""


class HardsiftError(Exception):
    """Base class for everything raised on purpose by this package."""


class ValidationError(HardsiftError):
    """Bad user input: config values, CLI flags, malformed arguments."""


class DataFormatError(ValidationError):
    """A data file could not be parsed. Message carries the line number."""


class EmptyDatasetError(HardsiftError):
    """A filter or split left nothing to work with."""


class RemoteEndpointError(HardsiftError):
    """The scoring endpoint could not produce a usable reply."""


class TransportError(RemoteEndpointError):
    """HTTP-level failure that survived the retry budget."""


class ProtocolError(RemoteEndpointError):
    """Endpoint answered, but not in the agreed JSON shape."""


class ScoreParseError(HardsiftError):
    """Reply text did not contain a well-formed in-range score tag."""


class ScoringUnavailable(HardsiftError):
    """A scorer backend failed for one request. Callers treat the sample
    as not rescued instead of aborting the run."""


class SummarizationError(HardsiftError):
    """A preference summarize/revise call failed. The preference text is
    left unchanged."""
