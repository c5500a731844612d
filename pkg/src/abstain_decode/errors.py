"""Exception types shared across the package."""

from __future__ import annotations


class AbstainDecodeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AbstainDecodeError, ValueError):
    """Input data violates a type invariant (non-finite logits, bad distribution)."""


class InvalidArgumentError(AbstainDecodeError, ValueError):
    """An argument is outside its allowed range."""


class ShapeError(AbstainDecodeError, ValueError):
    """Vectors combined in one operation have different lengths."""


class TokenizationError(AbstainDecodeError, ValueError):
    def __init__(self, text: str, start: int, end: int):
        self.text = text
        self.start = start
        self.end = end
        super().__init__(
            f"out-of-vocabulary span {text[start:end]!r} at characters {start}:{end}"
        )


class CapacityError(AbstainDecodeError):
    """Prompt is longer than the backend's context window."""


class TransportError(AbstainDecodeError):
    """A remote backend call failed.

    ``attempts`` is how many tries were made and ``retryable`` says whether the
    caller may reasonably try again later.
    """

    def __init__(self, message: str, *, attempts: int = 1, retryable: bool = True):
        super().__init__(message)
        self.attempts = attempts
        self.retryable = retryable


class BackendStepError(AbstainDecodeError):
    """Backend failure during decoding, tagged with the step it happened at."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"backend failure at decode step {step}: {cause}")
        self.step = step
        self.cause = cause


class NoSpanError(AbstainDecodeError, ValueError):
    """No context window contains the answer."""


class EmptyTestbedError(AbstainDecodeError):
    def __init__(self, attrition: dict[str, int]):
        self.attrition = dict(attrition)
        stages = ", ".join(f"{k}={v}" for k, v in attrition.items())
        super().__init__(f"no records survived testbed construction ({stages})")


class EmptySetError(AbstainDecodeError, ValueError):
    """A metric was requested over zero instances."""


class ProviderError(AbstainDecodeError):
    """Embedding provider failed or returned an unusable vector."""
