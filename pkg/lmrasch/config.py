"""Estimation settings and the flat ``key=value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

from lmrasch.exceptions import InvalidArgument, LoadError


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by every estimation entry point.

    Attributes:
        max_iters: EM iterations per start.
        tol: stop when ``|delta loglik| / (|loglik| + 1)`` falls below this.
        n_random_starts: perturbed starts on top of the deterministic one.
        rng_seed: seed of the perturbed starts.
        mstep_max_newton: Newton iterations per M-step component.
        mstep_tol: gradient max-norm at which a Newton solve stops.
        threads: worker threads for E-steps, M-step components, starts and grid cells.
        clamp: bound on the absolute value of every free coefficient.
        separation_warning: coefficients beyond this are logged as quasi-separated.
        inner: ``"full"`` solves each M-step component to convergence.
        n_students: sample size for BIC; defaults to the number of subjects.
    """

    max_iters: int = 5000
    tol: float = 1e-8
    n_random_starts: int = 9
    rng_seed: int = 0
    mstep_max_newton: int = 100
    mstep_tol: float = 1e-8
    threads: int = 1
    clamp: float = 50.0
    separation_warning: float = 30.0
    inner: Literal["full"] = "full"
    n_students: int | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidArgument(f"tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise InvalidArgument(f"max_iters must be at least 1, got {self.max_iters}")
        if self.n_random_starts < 0:
            raise InvalidArgument(
                f"n_random_starts must be non-negative, got {self.n_random_starts}"
            )
        if self.threads < 1:
            raise InvalidArgument(f"threads must be at least 1, got {self.threads}")
        if self.mstep_max_newton < 1 or not self.mstep_tol > 0:
            raise InvalidArgument("mstep_max_newton must be >= 1 and mstep_tol positive")
        if not 0 < self.separation_warning <= self.clamp:
            raise InvalidArgument("separation_warning must be in (0, clamp]")
        if self.inner != "full":
            raise InvalidArgument(f'inner must be "full", got "{self.inner}"')
        if self.n_students is not None and self.n_students < 1:
            raise InvalidArgument(f"n_students must be at least 1, got {self.n_students}")

    def replace(self, **overrides: Any) -> FitConfig:
        """A copy with the given fields changed; ``None`` values are ignored."""
        return dataclasses.replace(
            self, **{key: value for key, value in overrides.items() if value is not None}
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELDS = {field.name: field for field in dataclasses.fields(FitConfig)}
_CASTS = {"int": int, "float": float, "int | None": int}


def _cast(name: str, text: str) -> Any:
    kind = str(_FIELDS[name].type)
    if text.lower() == "none" and "None" in kind:
        return None
    return _CASTS.get(kind, str)(text)


def load_config(path: str | Path) -> FitConfig:
    """Read a ``key=value`` file into a :class:`FitConfig`.

    Blank lines and lines starting with ``#`` are skipped. Unknown keys and
    unparsable values raise :class:`~lmrasch.exceptions.LoadError` with the
    line number.
    """
    path = Path(path)
    values: dict[str, Any] = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise LoadError(f"cannot read config ({exc.strerror})", path=str(path)) from None
    for number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, text = line.partition("=")
        key = key.strip()
        if not sep:
            raise LoadError('expected "key=value"', path=str(path), line=number)
        if key not in _FIELDS:
            raise LoadError(f'unknown setting "{key}"', path=str(path), line=number, column=key)
        try:
            values[key] = _cast(key, text.strip())
        except ValueError:
            raise LoadError(
                f'invalid value "{text.strip()}"', path=str(path), line=number, column=key
            ) from None
    try:
        return FitConfig(**values)
    except InvalidArgument as exc:
        raise LoadError(str(exc), path=str(path)) from None
