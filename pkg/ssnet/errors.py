from __future__ import annotations


class SsnetError(Exception):
    pass


class DimensionError(SsnetError):
    pass


class ConfigurationError(SsnetError):
    pass


class UsageError(SsnetError):
    pass


class StructuralError(SsnetError):
    pass


class FormatError(SsnetError):
    pass


class GenerationError(SsnetError):
    pass


class NumericError(SsnetError):
    pass


class MetricError(SsnetError):
    pass
