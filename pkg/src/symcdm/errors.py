"""Exception types shared across the package.

The CLI maps these onto its exit-code taxonomy: ConfigError -> 1,
DataError -> 2, TrainingError -> 3.
"""


class ConfigError(ValueError):
    """Bad configuration: unknown keys, out-of-range values, unusable flags."""


class DataError(ValueError):
    """Bad input data: malformed files, violated dataset invariants."""


class TrainingError(RuntimeError):
    """A training phase failed; message carries epoch/phase context."""


class TreeParseError(ValueError):
    """Syntax error while parsing a serialized expression tree."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position
