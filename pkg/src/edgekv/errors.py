"""Exception hierarchy.

Every error carries a numeric ``code`` that is sent on the wire; codes are
append-only (see docs/errors.md) and ``error_from_code`` rebuilds the right
class on the client side.
"""

from __future__ import annotations


class EdgeKVError(Exception):
    code = 99


class NoSuchPool(EdgeKVError):
    code = 1


class MalformedKey(EdgeKVError):
    code = 2


class KeyNotFound(EdgeKVError):
    code = 3


class VersionNotFound(EdgeKVError):
    code = 4


class NotFound(EdgeKVError):
    """No version of the key exists at or before the requested time."""

    code = 5


class RetryExhausted(EdgeKVError):
    code = 6


class Timeout(EdgeKVError):
    code = 7


class ShardUnavailable(EdgeKVError):
    code = 8


class ViewChanged(EdgeKVError):
    code = 9


class CommitTimeout(EdgeKVError):
    code = 10

    def __init__(self, message: str, lagging: tuple[int, ...] = ()):
        super().__init__(message)
        self.lagging = tuple(lagging)


class NodeUnreachable(EdgeKVError):
    code = 11


class DuplicateRegistration(EdgeKVError):
    code = 12


class SchemaError(EdgeKVError):
    code = 13


class UnknownPool(EdgeKVError):
    code = 14


class UnknownLambda(EdgeKVError):
    code = 15


class NoOutEdges(EdgeKVError):
    code = 16


class LogFull(EdgeKVError):
    code = 17


class CorruptLog(EdgeKVError):
    code = 18


class ConfigError(EdgeKVError):
    code = 19


class BootstrapTimeout(EdgeKVError):
    code = 20


class QueueFull(EdgeKVError):
    code = 21


class InvalidArgument(EdgeKVError):
    code = 22


class InternalError(EdgeKVError):
    code = 23


class PoolConfigError(EdgeKVError):
    code = 24


class SaturationDetected(EdgeKVError):
    """Benchmark annotation; never sent on the wire."""

    code = 25


ERROR_CODES: dict[int, type[EdgeKVError]] = {
    cls.code: cls
    for cls in (
        NoSuchPool, MalformedKey, KeyNotFound, VersionNotFound, NotFound,
        RetryExhausted, Timeout, ShardUnavailable, ViewChanged, CommitTimeout,
        NodeUnreachable, DuplicateRegistration, SchemaError, UnknownPool,
        UnknownLambda, NoOutEdges, LogFull, CorruptLog, ConfigError,
        BootstrapTimeout, QueueFull, InvalidArgument, InternalError,
        PoolConfigError, SaturationDetected,
    )
}


def error_from_code(code: int, message: str) -> EdgeKVError:
    cls = ERROR_CODES.get(code, InternalError)
    if cls is CommitTimeout:
        # the lagging members travel at the end of the message: "... lagging=[2, 3]"
        lagging = ()
        if "lagging=[" in message:
            inner = message.rsplit("lagging=[", 1)[1].split("]", 1)[0]
            lagging = tuple(int(x) for x in inner.split(",") if x.strip())
        return CommitTimeout(message, lagging)
    return cls(message)
