# errors.py
# Exception hierarchy for the nowcasting toolkit
# -------------------------------------------------------------
# Every error raised on purpose derives from NowcastError so the
# command line can turn it into a non-zero exit with a diagnostic.
# -------------------------------------------------------------

from __future__ import annotations

from typing import Iterable, List, Optional


class NowcastError(Exception):
    """Base class for all toolkit errors."""


class InvalidSpecError(NowcastError):
    """An architecture spec, permutation or schedule argument breaks its contract."""


class UnsupportedArchitectureError(NowcastError):
    """Layer kind or edge type outside the fixed vocabulary."""


class ShapeError(NowcastError):
    """Array or tensor sizes do not line up."""


class TrajectoryError(NowcastError):
    """Trajectory store is inconsistent, corrupted or empty."""


class DataMissingError(NowcastError):
    """A dataset is not present in the local cache."""

    def __init__(self, dataset: str, root: str, hint: str) -> None:
        self.dataset = dataset
        self.root = root
        super().__init__(f"dataset '{dataset}' not found under {root}. {hint}")


class NonFiniteLossError(NowcastError):
    """Training or meta-training produced a NaN/inf loss."""

    def __init__(self, step: int, value: float, last_good: Optional[str] = None) -> None:
        self.step = step
        self.value = value
        self.last_good = last_good
        msg = f"non-finite loss {value} at step {step}"
        if last_good:
            msg += f"; last good checkpoint: {last_good}"
        super().__init__(msg)


class ConfigError(NowcastError):
    """Run configuration failed validation. Holds every problem found."""

    def __init__(self, problems: Iterable[str]) -> None:
        self.problems: List[str] = list(problems)
        lines = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"{len(self.problems)} configuration problem(s):\n{lines}")
