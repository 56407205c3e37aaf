"""
Errors raised by mvtryon. Everything derives from ``ValueError`` so callers
that only care about "bad input" can catch that.
"""


class MvTryOnError(ValueError):
    pass


class InvalidRotationError(MvTryOnError):
    pass


class InvalidParameterError(MvTryOnError):
    pass


class DimensionError(MvTryOnError):
    pass


class InvalidCorrelationError(MvTryOnError):
    pass


class ShapeError(MvTryOnError):
    pass


class FormatError(MvTryOnError):
    pass


class ConfigError(MvTryOnError):
    pass


class EmbeddingLookupError(MvTryOnError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""
