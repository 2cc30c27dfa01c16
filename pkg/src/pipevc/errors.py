"""Exception hierarchy.

Every error raised by the package derives from :class:`PipevcError`, so the
CLI can report ``type(exc).__name__`` as a machine-parsable reason.
"""


class PipevcError(Exception):
    pass


# model
class CycleDetected(PipevcError):
    pass


class DanglingEdge(PipevcError):
    pass


class EmptySpec(PipevcError):
    pass


class UnknownSlot(PipevcError):
    pass


class SchemaFlagMismatch(PipevcError):
    pass


class BadMetafile(PipevcError):
    pass


# store
class IoFailure(PipevcError):
    pass


class MissingChunk(PipevcError):
    pass


# vcs
class AlreadyExists(PipevcError):
    pass


class NotARepository(PipevcError):
    pass


class DuplicateBranch(PipevcError):
    pass


class UnknownBranch(PipevcError):
    pass


class UnknownCommit(PipevcError):
    pass


class IncompatiblePipeline(PipevcError):
    def __init__(self, message, edge=None):
        super().__init__(message)
        self.edge = edge


class NoCommonAncestor(PipevcError):
    pass


class NotFastForward(PipevcError):
    pass


class EmptyHistory(PipevcError):
    pass


# merge engine
class EmptySpace(PipevcError):
    pass


class NotMergeable(PipevcError):
    pass


class OutOfRange(PipevcError):
    pass


# execution
class ComponentRunFailure(PipevcError):
    pass


class NonZeroExit(ComponentRunFailure):
    def __init__(self, message, returncode=1, stderr_tail=""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr_tail = stderr_tail


class MissingOutput(ComponentRunFailure):
    pass


class SchemaMismatch(ComponentRunFailure):
    pass


class OutOfDomain(PipevcError):
    pass


class BadConfig(PipevcError):
    pass


# search
class MissingMetric(PipevcError):
    pass


class Exhausted(PipevcError):
    pass
