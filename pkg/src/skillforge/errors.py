"""Exception types raised across the package."""


class SkillforgeError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(SkillforgeError, ValueError):
    pass


class ShapeMismatch(SkillforgeError, ValueError):
    pass


class LengthMismatch(SkillforgeError, ValueError):
    pass


class ZeroVector(SkillforgeError, ValueError):
    pass


class DegenerateEmbedding(SkillforgeError, ValueError):
    pass


class NonPsdCovariance(SkillforgeError, ValueError):
    pass


class NonFiniteActivation(SkillforgeError, FloatingPointError):
    pass


class NonFiniteGradient(SkillforgeError, FloatingPointError):
    pass


class InvalidState(SkillforgeError, ValueError):
    pass


class IndexOutOfRange(SkillforgeError, IndexError):
    pass


class UnknownRecipe(SkillforgeError, KeyError):
    pass


class UnknownMotion(SkillforgeError, KeyError):
    pass


class UnknownStyle(SkillforgeError, KeyError):
    pass


class ParseError(SkillforgeError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(SkillforgeError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ConfigError(SkillforgeError, ValueError):
    """Bad configuration value; ``key`` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")
