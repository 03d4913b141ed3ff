"""Exception types shared across the toolkit.

``ConfigError`` subclasses ``ValueError`` so callers validating input can
catch either. The CLI maps ``ConfigError`` to exit code 1 and everything
else derived from ``LesionAugError`` to exit code 2.
"""


class LesionAugError(Exception):
    """Base class for toolkit errors."""


class ConfigError(LesionAugError, ValueError):
    """Invalid configuration or violated precondition."""


class DecodeError(LesionAugError):
    """An image or mask file could not be decoded."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


class VocabularyError(ConfigError):
    """A prompt tag is not part of the declared vocabulary."""

    def __init__(self, tag):
        super().__init__(f"unknown tag {tag!r}")
        self.tag = tag


class GenerationError(LesionAugError):
    """Mask generation exhausted its attempts."""

    def __init__(self, message, attempts_used=None, index=None):
        if index is not None:
            message = f"item {index}: {message}"
        super().__init__(message)
        self.attempts_used = attempts_used
        self.index = index


class DegenerateOutputError(LesionAugError):
    """A transform produced an all-background mask."""


class FingerprintError(LesionAugError):
    """An artifact was built against a different schedule or backbone."""


class StageError(LesionAugError):
    """A pipeline stage failed; wraps the original exception."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
