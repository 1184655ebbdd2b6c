"""
Exception hierarchy for the HSVR toolkit

Every error raised by the library derives from HsvrError. The CLI maps each
family onto a process exit code via ``exit_code_for``.
"""

EXIT_OK = 0
EXIT_INTERRUPTED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class HsvrError(Exception):
    """Base class for toolkit errors"""
    exit_code = EXIT_NUMERIC


class ConfigError(HsvrError, ValueError):
    """Invalid configuration or conflicting options"""
    exit_code = EXIT_USAGE


class DimensionError(HsvrError, ValueError):
    """Array shapes are inconsistent with each other"""
    exit_code = EXIT_USAGE


class NumericalError(HsvrError, ArithmeticError):
    """A linear-algebra step failed or produced non-finite values"""
    exit_code = EXIT_NUMERIC


class UnstableSystemError(NumericalError):
    """Spectral radius is (numerically) not below one"""


class UncontrollableError(NumericalError):
    """A (A, B) pair is numerically uncontrollable for canonicalization"""


class NumericalAbort(NumericalError):
    """Non-finite activation or loss during training"""


class DataFormatError(HsvrError, ValueError):
    """Dataset file is missing, truncated or malformed"""
    exit_code = EXIT_DATA


class CheckpointError(HsvrError):
    """Checkpoint is corrupt, of another version or unreadable"""
    exit_code = EXIT_DATA


def exit_code_for(error: BaseException) -> int:
    """Map an exception to a CLI exit code."""
    if isinstance(error, HsvrError):
        return error.exit_code
    if isinstance(error, KeyboardInterrupt):
        return EXIT_INTERRUPTED
    if isinstance(error, FileNotFoundError):
        return EXIT_DATA
    return EXIT_NUMERIC
