"""Exception hierarchy for the autoskill runtime.

Every domain failure derives from :class:`AutoskillError` so the CLI can map
them to exit code 1 in one place.
"""

from __future__ import annotations


class AutoskillError(Exception):
    """Base class for all domain errors."""


class IoFailure(AutoskillError):
    pass


# --- skill packages -------------------------------------------------------


class SkillFormatError(AutoskillError):
    """SKILL.md could not be parsed into a valid frontmatter + body."""

    code = "SkillFormatError"


class MissingFrontmatter(SkillFormatError):
    code = "MissingFrontmatter"


class FrontmatterSyntaxError(SkillFormatError):
    code = "FrontmatterSyntaxError"


class MissingRequiredKey(SkillFormatError):
    code = "MissingRequiredKey"


class MalformedName(SkillFormatError):
    code = "MalformedName"


class NameMismatch(SkillFormatError):
    code = "NameMismatch"


class DestinationExists(AutoskillError):
    pass


# --- skill bank -----------------------------------------------------------


class EvaluationFailed(AutoskillError):
    def __init__(self, message: str, failures: list | None = None):
        super().__init__(message)
        self.failures = list(failures or [])


class DuplicateName(AutoskillError):
    pass


class InvalidPackage(AutoskillError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class UnknownSkill(AutoskillError):
    pass


class BankBusy(AutoskillError):
    pass


# --- context DAG ----------------------------------------------------------


class ContextCorrupt(AutoskillError):
    pass


class CycleDetected(ContextCorrupt):
    pass


class BrokenHistoryLink(ContextCorrupt):
    pass


# --- memory ---------------------------------------------------------------


class EmptyContent(AutoskillError):
    pass


class InvalidContent(AutoskillError):
    pass


# --- sessions -------------------------------------------------------------


class HomeNotInitialized(AutoskillError):
    pass


class SequenceGap(AutoskillError):
    pass


class SnapshotMissing(AutoskillError):
    pass


class SnapshotCorrupt(AutoskillError):
    pass


class AlreadyFinalized(AutoskillError):
    pass


# --- sandbox --------------------------------------------------------------


class SandboxError(AutoskillError):
    pass


class BackendUnavailable(SandboxError):
    pass


class SandboxClosed(SandboxError):
    pass


class PathEscape(SandboxError):
    pass


class SandboxFileNotFound(SandboxError, FileNotFoundError):
    pass


# --- model / loop ---------------------------------------------------------


class ModelError(AutoskillError):
    pass


class TransientModelError(ModelError):
    """Retryable failure (rate limit, 5xx, timeout)."""


class ModelPermanentFailure(ModelError):
    """Non-retryable failure; propagated immediately."""


class ModelExhaustedRetries(ModelError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class LoopAborted(AutoskillError):
    pass


class UnknownTool(AutoskillError):
    pass


class ToolTimeout(AutoskillError):
    pass


# --- lifecycle ------------------------------------------------------------


class InvalidSkillSpec(AutoskillError):
    pass


class GenerationInvalid(AutoskillError):
    pass


class RefinementExhausted(AutoskillError):
    def __init__(self, message: str, package=None, result=None):
        super().__init__(message)
        self.package = package
        self.result = result


class SourceNotSuccessful(AutoskillError):
    pass


class SandboxFailure(AutoskillError):
    pass
