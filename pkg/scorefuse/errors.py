"""Exception hierarchy for scorefuse.

Every error carries the short ``code`` used in messages and run logs, and the
process exit code the CLI returns when it escapes a command.
"""


class ScoreFuseError(Exception):
    """Base class for all scorefuse errors."""
    code = "ScoreFuseError"
    exit_code = 1

    def __str__(self) -> str:
        message = super().__str__()
        return f"{self.code}: {message}" if message else self.code


# ===== CORE =====

class EmptyQuery(ScoreFuseError):
    code = "EmptyQuery"


class ZeroNormFeature(ScoreFuseError):
    code = "ZeroNormFeature"


class NegativeDistance(ScoreFuseError):
    code = "NegativeDistance"


class TemplateOrderMismatch(ScoreFuseError):
    code = "TemplateOrderMismatch"


class FormatError(ScoreFuseError):
    """Malformed manifest, score or feature file."""
    code = "FormatError"
    exit_code = 2


# ===== NNKIT =====

class ShapeError(ScoreFuseError):
    code = "ShapeError"


class CacheMismatch(ScoreFuseError):
    code = "CacheMismatch"


class DegenerateBatch(ScoreFuseError):
    code = "DegenerateBatch"


class NonFiniteGradient(ScoreFuseError):
    code = "NonFiniteGradient"
    exit_code = 4


class ScheduleOverrun(ScoreFuseError):
    code = "ScheduleOverrun"


# ===== FUSION =====

class AllModalitiesMissing(ScoreFuseError):
    code = "AllModalitiesMissing"


class InvalidQualityWeight(ScoreFuseError):
    code = "InvalidQualityWeight"


class ModalityOrderMismatch(ScoreFuseError):
    code = "ModalityOrderMismatch"


class NoMatchTemplates(ScoreFuseError):
    code = "NoMatchTemplates"


class EmptyTrainingSet(ScoreFuseError):
    code = "EmptyTrainingSet"


# ===== QUALITY =====

class UnknownSubject(ScoreFuseError):
    code = "UnknownSubject"


class InvalidDelta(ScoreFuseError):
    code = "InvalidDelta"


class InvalidRank(ScoreFuseError):
    code = "InvalidRank"


# ===== METRICS =====

class EmptyScoreSet(ScoreFuseError):
    code = "EmptyScoreSet"


class NoNonMatedQueries(ScoreFuseError):
    code = "NoNonMatedQueries"


class DegenerateSplit(ScoreFuseError):
    code = "DegenerateSplit"


# ===== SYNTH =====

class DegenerateConfig(ScoreFuseError):
    code = "DegenerateConfig"
    exit_code = 2


# ===== CLI =====

class ConfigError(ScoreFuseError):
    code = "ConfigError"
    exit_code = 2


class StageOrderViolation(ScoreFuseError):
    code = "StageOrderViolation"
    exit_code = 3


class ConfigDrift(ScoreFuseError):
    code = "ConfigDrift"
    exit_code = 3


class NumericalFailure(ScoreFuseError):
    code = "NumericalFailure"
    exit_code = 4
