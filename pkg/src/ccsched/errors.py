"""Exception types shared across the package."""
from __future__ import annotations


class CcschedError(Exception):
    code = "Error"


# program construction and inference
class ProgramError(CcschedError):
    code = "InvalidProgram"


class LayoutMismatch(ProgramError):
    code = "LayoutMismatch"


class ShapeMismatch(ProgramError):
    code = "ShapeMismatch"


class InvalidInput(ProgramError):
    code = "InvalidInput"


class GroupMismatch(ProgramError):
    code = "GroupMismatch"


class DivisibilityError(ProgramError):
    code = "DivisibilityError"


class ParseError(ProgramError):
    code = "ParseError"


# transformations
class TransformError(CcschedError):
    code = "TransformError"


class UnknownNode(TransformError):
    code = "UnknownNode"


class NotAllReduce(TransformError):
    code = "NotAllReduce"


class NotSliceable(TransformError):
    code = "NotSliceable"


class NotAConsumer(TransformError):
    code = "NotAConsumer"


class DependencyViolation(TransformError):
    code = "DependencyViolation"


class NotComputation(TransformError):
    code = "NotComputation"


class ChainBroken(TransformError):
    code = "ChainBroken"


class NotConsumer(TransformError):
    code = "NotConsumer"


class NotProducerConsumerChain(TransformError):
    code = "NotProducerConsumerChain"


class ConsumerNotSliced(TransformError):
    code = "ConsumerNotSliced"


class StillLive(TransformError):
    code = "StillLive"


class ResultInvalid(TransformError):
    """A rewrite produced a program that fails validation."""
    code = "ResultInvalid"


class ScheduleError(TransformError):
    code = "ScheduleError"

    def __init__(self, index: int, kind: str, cause: CcschedError):
        super().__init__(f"directive {index} ({kind}): {cause.code}: {cause}")
        self.index = index
        self.kind = kind
        self.cause = cause


# runtime
class RuntimeFailure(CcschedError):
    code = "RuntimeFailure"


class ReplicationViolation(RuntimeFailure):
    code = "ReplicationViolation"


class NoSuchRank(RuntimeFailure):
    code = "NoSuchRank"


class OperandLayoutMismatch(RuntimeFailure):
    code = "OperandLayoutMismatch"


class Deadlock(RuntimeFailure):
    code = "Deadlock"


class StepError(RuntimeFailure):
    code = "StepError"

    def __init__(self, index: int, node: str, cause: BaseException):
        super().__init__(f"step {index} ({node}): {cause}")
        self.index = index
        self.node = node
        self.cause = cause


# autotuning
class CandidateFailed(CcschedError):
    code = "CandidateFailed"

    def __init__(self, schedule, diagnostic: str):
        super().__init__(f"candidate {schedule!r} failed: {diagnostic}")
        self.schedule = schedule
        self.diagnostic = diagnostic
