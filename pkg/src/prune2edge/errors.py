"""Exception hierarchy shared by every stage of the pipeline.

Each error carries a stable ``code`` string (the ``E_*`` names used in wire
frames and logs) and the process exit status the CLI maps it to.
"""


class Prune2EdgeError(Exception):
    code = "E_INTERNAL"
    exit_code = 1


class ConfigError(Prune2EdgeError, ValueError):
    code = "E_CONFIG"
    exit_code = 10


class ShapeError(Prune2EdgeError, ValueError):
    code = "E_SHAPE"
    exit_code = 11


class NumericError(Prune2EdgeError, ValueError):
    code = "E_NUMERIC"
    exit_code = 12


class ScheduleError(Prune2EdgeError, ValueError):
    code = "E_SCHEDULE"
    exit_code = 13


class CorruptFileError(Prune2EdgeError):
    code = "E_CORRUPT"
    exit_code = 14


class VersionError(Prune2EdgeError):
    code = "E_VERSION"
    exit_code = 15


class ProtocolError(Prune2EdgeError):
    code = "E_PROTOCOL"
    exit_code = 16


class NodeTimeoutError(Prune2EdgeError):
    code = "E_NODE_TIMEOUT"
    exit_code = 17


class ShardMismatchError(Prune2EdgeError):
    code = "E_SHARD_MISMATCH"
    exit_code = 18


class PoolError(Prune2EdgeError):
    code = "E_POOL"
    exit_code = 19


class BadIndexError(ProtocolError, IndexError):
    code = "E_BAD_INDEX"
