"""Error taxonomy shared across the engine.

Every error carries a stable ``code`` (its class name) so the HTTP service
and the CLI can report failures by name without string-matching messages.
"""

from __future__ import annotations


class StoryloomError(Exception):
    """Base class for all engine errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- profile / configuration ---------------------------------------------

class EmptyInput(StoryloomError):
    pass


class InvariantViolation(StoryloomError):
    pass


class DuplicateWord(StoryloomError):
    pass


class InvalidConfig(StoryloomError):
    pass


# --- session / phase machine ----------------------------------------------

class WrongPhase(StoryloomError):
    pass


class IllegalTransition(StoryloomError):
    pass


class GuardFailed(StoryloomError):
    pass


class UnknownParticipant(StoryloomError):
    pass


class NoContributionYet(StoryloomError):
    pass


class UnknownCommand(StoryloomError):
    pass


# --- story -----------------------------------------------------------------

class WrongStatus(StoryloomError):
    pass


class ValidationFailed(StoryloomError):
    def __init__(self, report):
        super().__init__("; ".join(report.issues) if report.issues else "validation failed")
        self.report = report


class WordNotFound(StoryloomError):
    pass


class AlreadyFilled(StoryloomError):
    pass


class NotStoryteller(StoryloomError):
    pass


class AlternationViolation(StoryloomError):
    pass


# --- questions / materials ---------------------------------------------------

class FairnessViolation(StoryloomError):
    pass


class UnknownQuestion(StoryloomError):
    pass


class UnknownMaterial(StoryloomError):
    pass


# --- characteristics ---------------------------------------------------------

class NoApplicableGuideline(StoryloomError):
    pass


# --- analytics ---------------------------------------------------------------

class QuestionNotSelected(StoryloomError):
    pass


class WrongChild(StoryloomError):
    pass


class OutOfRange(StoryloomError):
    pass


class GatewayCannotCode(StoryloomError):
    pass


# --- gateway -----------------------------------------------------------------

class UnboundVariable(StoryloomError):
    pass


class UnknownVariable(StoryloomError):
    pass


class GenerationUnavailable(StoryloomError):
    pass


class MissingFixture(StoryloomError):
    pass


class ProviderError(StoryloomError):
    pass


class MalformedOutput(StoryloomError):
    def __init__(self, message: str, raw=None):
        super().__init__(message)
        self.raw = raw


# --- service / persistence -----------------------------------------------------

class Unauthorized(StoryloomError):
    pass


class UnknownSession(StoryloomError):
    pass


class SchemaMismatch(StoryloomError):
    pass


# --- cli -------------------------------------------------------------------------

class ScriptParseError(StoryloomError):
    pass


class InvariantFailure(StoryloomError):
    def __init__(self, invariant: str, detail: str = ""):
        super().__init__(f"{invariant}: {detail}" if detail else invariant)
        self.invariant = invariant
