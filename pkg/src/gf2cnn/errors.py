"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class GF2Error(Exception):
    exit_code = 1


class ShapeError(GF2Error, ValueError):
    exit_code = 3


class QuantError(GF2Error, ValueError):
    exit_code = 3


class CodecError(GF2Error, ValueError):
    exit_code = 3


class GraphError(GF2Error, ValueError):
    exit_code = 3


class FusionError(GraphError):
    exit_code = 3


class ConfigError(GF2Error, ValueError):
    exit_code = 2


class CheckpointError(GF2Error):
    exit_code = 4


class DataError(GF2Error):
    exit_code = 5


class NumericError(GF2Error, ArithmeticError):
    exit_code = 6
