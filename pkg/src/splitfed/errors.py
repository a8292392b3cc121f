"""Exception types shared across the package."""


class SplitFedError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(SplitFedError):
    """Tensor dimensions incompatible with the requested operation."""


class UnknownLayerKind(SplitFedError):
    """Layer kind string not recognized."""


class LabelOutOfRange(SplitFedError):
    """A class index is negative or >= the class count."""


class UnknownArchitecture(SplitFedError):
    """Architecture name not in the registry."""


class CutOutOfRange(SplitFedError):
    """Cut index outside [1, layer_count - 1]."""


class EmptyUpdateSet(SplitFedError):
    """Aggregation called with no client updates."""


class ZeroMean(SplitFedError):
    """Coefficient of variation undefined for mean <= 0."""


class InvalidInputs(SplitFedError):
    """Cost-model inputs violate their invariants."""


class MissingRun(SplitFedError):
    """Measured-cost comparison requested before any traffic was recorded."""


class BadMagic(SplitFedError):
    """IDX file magic number is wrong."""


class DimMismatch(SplitFedError):
    """Image and label files disagree on the sample count."""


class Truncated(SplitFedError):
    """Byte stream ended before a complete record/frame was read."""


class BadType(SplitFedError):
    """Unknown wire message type byte."""


class LengthMismatch(SplitFedError):
    """Frame length field disagrees with the actual byte count."""


class PayloadTooLarge(SplitFedError):
    """Encoded frame would exceed the 2**31 - 1 byte limit."""


class PeerDisconnected(SplitFedError):
    """The other endpoint of a channel closed or vanished."""


class Timeout(SplitFedError):
    """No message arrived within the configured wait."""


class TooManyClients(SplitFedError):
    """Partition requested with more clients than samples."""


class ConfigError(SplitFedError):
    """Run configuration is invalid."""
