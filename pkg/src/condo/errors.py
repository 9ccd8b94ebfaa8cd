"""Exception types shared across the package."""


class CondoError(Exception):
    pass


class InvalidParams(CondoError, ValueError):
    pass


class NearZeroQuaternion(CondoError, ValueError):
    pass


class NotUnitQuaternion(CondoError, ValueError):
    pass


class InfeasibleSplit(CondoError, ValueError):
    pass


class UnknownScene(CondoError, KeyError):
    pass


class DuplicateScene(CondoError, ValueError):
    pass


class EmptyDataset(CondoError, ValueError):
    pass


class BudgetExceeded(CondoError, RuntimeError):
    pass


class ConfigError(CondoError, ValueError):
    pass
