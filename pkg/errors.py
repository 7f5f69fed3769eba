"""Exception hierarchy shared by the simulator modules."""

from __future__ import annotations


class LRMError(Exception):
    pass


class ConfigError(LRMError, ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class PropensityOverflowError(LRMError):
    pass


class SingularTimeError(LRMError):
    pass


class ForbiddenResetError(LRMError):
    pass


class ForbiddenArrivalError(LRMError):
    pass


class InvalidMomentsError(LRMError):
    pass


class InconsistentStateError(LRMError):
    pass


class SnapshotError(LRMError):
    pass


class BinningError(LRMError, ValueError):
    pass


class NormDriftError(LRMError, ArithmeticError):
    pass
