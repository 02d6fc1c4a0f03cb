"""Exception hierarchy shared across the toolkit.

Every error raised by crossdet derives from CrossDetError so callers can
catch toolkit failures without swallowing unrelated exceptions. Config and
input-validation errors additionally derive from ConfigError, which the CLI
maps to exit code 2.
"""


class CrossDetError(Exception):
    """Base class for all crossdet errors."""


class ConfigError(CrossDetError):
    """Invalid configuration or malformed input file (CLI exit code 2)."""


# label space

class DuplicateDataset(ConfigError):
    pass


class UnknownDataset(ConfigError):
    pass


class UnknownSourceClass(ConfigError):
    pass


class UnknownClass(ConfigError):
    pass


class OverlappingMergeGroups(ConfigError):
    pass


# ingest

class MalformedDocument(ConfigError):
    pass


class DanglingReference(MalformedDocument):
    pass


class NonPositiveBox(MalformedDocument):
    pass


class InvertedBox(MalformedDocument):
    pass


class CountMismatch(MalformedDocument):
    pass


class MalformedLine(MalformedDocument):
    pass


# anchors

class EmptyConfig(ConfigError):
    pass


class ThresholdOrder(ConfigError):
    pass


# loss

class NonFiniteLogit(CrossDetError):
    pass


# eval

class UnknownImage(CrossDetError):
    pass


class MissingDifficultyTags(CrossDetError):
    pass


# synthetic world / trainer

class InvalidPolicy(ConfigError):
    pass


class DimensionMismatch(CrossDetError):
    pass


class DivergedLoss(CrossDetError):
    pass
