"""Exception hierarchy. Each module raises its own subclass so the CLI can
map failures to distinct exit codes."""


class GraphAlignError(Exception):
    exit_code = 1


class InvalidInputError(GraphAlignError, ValueError):
    exit_code = 9


class GeometryError(InvalidInputError):
    exit_code = 10


class GraphError(InvalidInputError):
    exit_code = 11


class FusionError(InvalidInputError):
    exit_code = 12


class AttentionError(InvalidInputError):
    exit_code = 13


class TrainingDivergedError(AttentionError):
    exit_code = 14


class SceneError(InvalidInputError):
    exit_code = 15


class BenchError(InvalidInputError):
    exit_code = 16


class FormatError(GraphAlignError, ValueError):
    exit_code = 17


class ConfigError(GraphAlignError, ValueError):
    exit_code = 18


class UsageError(GraphAlignError):
    exit_code = 2


class OracleMismatchError(GraphAlignError):
    exit_code = 19


EXIT_CODES = {
    "ok": 0,
    "unexpected error": 1,
    "usage error": UsageError.exit_code,
    "I/O error (missing or unwritable path)": 3,
    "invalid input": InvalidInputError.exit_code,
    "geometry error": GeometryError.exit_code,
    "graph error": GraphError.exit_code,
    "fusion error": FusionError.exit_code,
    "attention error": AttentionError.exit_code,
    "training diverged": TrainingDivergedError.exit_code,
    "scene error": SceneError.exit_code,
    "benchmark error": BenchError.exit_code,
    "file format error": FormatError.exit_code,
    "config error": ConfigError.exit_code,
    "oracle mismatch": OracleMismatchError.exit_code,
}
