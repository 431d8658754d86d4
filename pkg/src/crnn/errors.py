"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 2, data
problems exit 3, checkpoint problems exit 4.
"""


class UsageError(ValueError):
    """An API or CLI call that is malformed regardless of data content."""


class DimensionError(UsageError):
    """Operand shapes are incompatible or would produce an empty result."""


class ConfigError(UsageError):
    """A model or run configuration violates its invariants."""


class AlphabetError(UsageError):
    """A symbol is not part of the active alphabet."""


class StateError(RuntimeError):
    """An operation was invoked before the state it needs exists."""


class InfeasibleTargetError(ValueError):
    """The target sequence admits no alignment of the given length."""

    def __init__(self, label: str, num_frames: int):
        self.label = label
        self.num_frames = num_frames
        super().__init__(
            f"no alignment of length {num_frames} can produce {label!r} "
            f"(needs at least {len(label) + _num_repeats(label)} frames)"
        )


def _num_repeats(label: str) -> int:
    return sum(1 for a, b in zip(label, label[1:]) if a == b)


class DataError(Exception):
    """A dataset, image, or lexicon on disk is missing or malformed."""


class CheckpointError(Exception):
    """Base for all checkpoint read/write failures."""


class CheckpointFormatError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not supported."""


class CheckpointDigestError(CheckpointError):
    """The stored configuration digest does not match its content."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before all declared records were read."""
