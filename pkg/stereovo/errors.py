"""
Exception hierarchy
Every error carries the process exit code the CLI reports for it
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class StereoVOError(Exception):
    """Base class for all library errors"""
    exit_code = EXIT_DATA


# Usage errors

class UsageError(StereoVOError):
    exit_code = EXIT_USAGE


class ConfigError(StereoVOError, ValueError):
    """Malformed or unknown configuration entry"""
    exit_code = EXIT_USAGE


# Data / format errors

class InvalidArgumentError(StereoVOError, ValueError):
    pass


class DegenerateRotationError(StereoVOError, ValueError):
    """Rotation angle too close to pi for a unique logarithm"""


class BehindCameraError(StereoVOError, ValueError):
    pass


class InvalidPixelError(StereoVOError, ValueError):
    pass


class DegenerateFrameError(StereoVOError):
    """Not enough valid pixels to solve for a pose"""


class SpecInvalidError(StereoVOError, ValueError):
    """Scene specification cannot be rendered"""


class RasterFormatError(StereoVOError):
    pass


class TrajectoryFormatError(StereoVOError):
    pass


class SequenceLayoutError(StereoVOError):
    pass


class AlignmentError(StereoVOError, ValueError):
    pass


# Numerical errors

class NumericalFailureError(StereoVOError, ArithmeticError):
    exit_code = EXIT_NUMERICAL


class FittingError(StereoVOError):
    exit_code = EXIT_NUMERICAL


class GradcheckFailure(StereoVOError):
    exit_code = EXIT_NUMERICAL
