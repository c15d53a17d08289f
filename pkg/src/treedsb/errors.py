"""Exception hierarchy shared by all treedsb modules."""


class TreeDSBError(Exception):
    """Base class for every error raised by this package."""


# tree construction and traversal
class TreeError(TreeDSBError, ValueError):
    pass


class CycleDetected(TreeError):
    pass


class Disconnected(TreeError):
    pass


class NonPositiveWeight(TreeError):
    pass


class DuplicateEdge(TreeError):
    pass


class UnknownNode(TreeError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SameNode(TreeError):
    pass


class NonPositiveInput(TreeDSBError, ValueError):
    pass


# measures
class UnknownKind(TreeDSBError, ValueError):
    pass


class BadDimension(TreeDSBError, ValueError):
    pass


class NotPositiveDefinite(TreeDSBError, ValueError):
    pass


class DimensionMismatch(TreeDSBError, ValueError):
    pass


class ZeroVariance(TreeDSBError, ValueError):
    pass


class TooFewSamples(TreeDSBError, ValueError):
    pass


# schedules and simulation
class HorizonTooSmall(TreeDSBError, ValueError):
    pass


class OddN(TreeDSBError, ValueError):
    pass


class NonFiniteDrift(TreeDSBError, FloatingPointError):
    pass


class StepOutOfRange(TreeDSBError, IndexError):
    pass


# networks
class NonFinite(TreeDSBError, FloatingPointError):
    pass


class ShapeMismatch(TreeDSBError, ValueError):
    pass


# engine
class ConfigInvalid(TreeDSBError, ValueError):
    pass


class TrainingDiverged(TreeDSBError, FloatingPointError):
    pass


class EmptyDataset(TreeDSBError, ValueError):
    pass


class UnknownLeaf(TreeDSBError, ValueError):
    pass


class NotStarTree(TreeDSBError, ValueError):
    pass


class RootIsLeaf(TreeDSBError, ValueError):
    pass


# oracles
class NoConvergence(TreeDSBError, RuntimeError):
    pass


class NumericalUnderflow(TreeDSBError, FloatingPointError):
    pass


class InstanceTooLarge(TreeDSBError, MemoryError):
    pass


class NotTreeFactorized(TreeDSBError, ValueError):
    pass


class GridMismatch(TreeDSBError, ValueError):
    pass


# configuration / cli
class ParseError(TreeDSBError, ValueError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


class UnknownKey(TreeDSBError, KeyError):
    def __init__(self, key, line=None):
        self.key = key
        self.line = line
        msg = f"unknown config key {key!r}"
        if line is not None:
            msg = f"line {line}: " + msg
        super().__init__(msg)

    def __str__(self):
        return self.args[0]


class ConstraintViolation(TreeDSBError, ValueError):
    pass


class SchemaError(TreeDSBError, ValueError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
