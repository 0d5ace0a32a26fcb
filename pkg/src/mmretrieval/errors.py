"""Exception hierarchy shared by every module of the engine."""

from __future__ import annotations

from typing import Any


class RetrievalError(Exception):
    """Base class for all engine errors."""


# catalog validation


class CatalogError(RetrievalError):
    def __init__(self, item_id: str | None, message: str) -> None:
        self.item_id = item_id
        super().__init__(message)


class DuplicateId(CatalogError):
    def __init__(self, item_id: str) -> None:
        super().__init__(item_id, f"duplicate item_id {item_id!r}")


class EmptyProductType(CatalogError):
    def __init__(self, item_id: str | None) -> None:
        super().__init__(item_id, f"item {item_id!r} has an empty product_type")


class MalformedRecord(CatalogError):
    pass


class CatalogValidationError(RetrievalError):
    """Raised with every violation found in a catalog, not just the first."""

    def __init__(self, violations: list[CatalogError]) -> None:
        self.violations = violations
        lines = "; ".join(str(v) for v in violations)
        super().__init__(f"{len(violations)} catalog violation(s): {lines}")


# grounding


class EmptyProposalSet(RetrievalError):
    pass


class NonFiniteAffinity(RetrievalError):
    pass


class DegenerateBox(RetrievalError):
    pass


# backends and encoders


class BackendUnavailable(RetrievalError):
    pass


class EmptyCompletion(RetrievalError):
    pass


class ImageUnreadable(RetrievalError):
    pass


class DimensionMismatch(RetrievalError):
    pass


class ZeroVector(RetrievalError):
    pass


class EmptyImage(RetrievalError):
    pass


# agent loop


class AgentLoopError(RetrievalError):
    """A backend failed mid-loop; ``trace`` holds everything completed so far."""

    def __init__(self, cause: Exception, trace: Any) -> None:
        self.cause = cause
        self.trace = trace
        super().__init__(f"refinement loop aborted: {cause}")


# ann index


class DuplicateVectorId(RetrievalError):
    pass


class EmptyIndex(RetrievalError):
    pass


class CorruptSnapshot(RetrievalError):
    pass


class VersionMismatch(RetrievalError):
    pass


# training


class NonFiniteInput(RetrievalError):
    pass


class EmptyDataset(RetrievalError):
    pass


class DivergedLoss(RetrievalError):
    pass


# evaluation and serving


class UnparseableVerdict(RetrievalError):
    pass


class UnknownItem(RetrievalError):
    pass
