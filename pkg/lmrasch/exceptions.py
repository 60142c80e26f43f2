"""Exception hierarchy for lmrasch."""

from __future__ import annotations

from typing import Any


class LatentMarkovError(Exception):
    """Base class for every error raised by lmrasch."""


class InvalidArgument(LatentMarkovError, ValueError):
    """An argument is malformed, non-finite or has the wrong dimension."""


class ConstraintViolation(LatentMarkovError, ValueError):
    """A parameter ordering or fixed-zero constraint does not hold."""


class InvalidDesign(LatentMarkovError, ValueError):
    """The item design or the data do not fit together."""


class LoadError(InvalidDesign):
    """A bundle file could not be parsed or validated.

    Carries the offending file and, when known, the 1-based line number
    (the header is line 1) and the column name.
    """

    def __init__(self, message: str, *, path: str, line: int | None = None,
                 column: str | None = None):
        self.path = path
        self.line = line
        self.column = column
        location = path
        if line is not None:
            location += f":{line}"
        if column is not None:
            location += f" [{column}]"
        super().__init__(f"{location}: {message}")


class MStepFailure(LatentMarkovError):
    """An M-step solver produced a non-finite objective."""

    def __init__(self, component: str, diagnostics: dict[str, Any]):
        self.component = component
        self.diagnostics = diagnostics
        detail = ", ".join(f"{key}={value!r}" for key, value in diagnostics.items())
        super().__init__(f"M-step '{component}' failed ({detail})")


class FitFailure(LatentMarkovError):
    """Every start of an EM fit failed."""

    def __init__(self, failures: dict[int, str]):
        self.failures = failures
        detail = "; ".join(f"start {key}: {value}" for key, value in failures.items())
        super().__init__(f"All {len(failures)} start(s) failed: {detail}")


class LikelihoodRatioError(LatentMarkovError):
    """The constrained fit beat the full fit, so the full fit must be restarted."""

    def __init__(self, statistic: float):
        self.statistic = statistic
        super().__init__(
            f"Likelihood ratio statistic {statistic:.6g} is negative: the constrained "
            "model found a better optimum than the full model"
        )


class UsageError(LatentMarkovError):
    """The command line could not be parsed."""
