"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command line layer
can translate failures without a lookup table.
"""


class CascadeError(Exception):
    exit_code = 3


class ConfigError(CascadeError):
    exit_code = 2


class DataError(CascadeError):
    exit_code = 3


class IncompatibleCheckpoint(CascadeError):
    exit_code = 4


# cascade-builder
class OrphanRetweet(DataError):
    pass


class MixedNews(DataError):
    pass


class UnknownUser(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyResult(DataError):
    pass


class ParseError(DataError):
    def __init__(self, path, line_no, reason):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


# feature-extract
class NegativeOffset(DataError):
    pass


# diff-core
class ShapeMismatch(CascadeError):
    pass


class NonFiniteInput(CascadeError):
    pass


class DisconnectedLoss(CascadeError):
    pass


class LengthMismatch(CascadeError):
    pass


# gnn-core
class EmptyGraph(DataError):
    pass


# continual
class SizeExceedsDataset(ConfigError):
    pass


class EmptySamples(ConfigError):
    pass


class ArchitectureMismatch(IncompatibleCheckpoint):
    pass


# experiment-harness
class TooSmall(DataError):
    pass


class EmptyInput(DataError):
    pass


# synth-gen
class DegenerateRegime(ConfigError):
    pass
