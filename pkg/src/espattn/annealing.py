"""Exponential SoftSort temperature annealing and the soft-to-hard switch."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ParameterError

DEFAULT_FLOOR = 1e-8


@dataclass(frozen=True)
class AnnealSchedule:
    """``temp(e) = max(floor, initial * gamma**e)``.

    With ``switch_to_hard_at`` set, training switches to hard sorting once the
    temperature reaches that threshold (inclusive).
    """

    initial_temperature: float = 1e-3
    gamma: float = 0.8
    floor: float = DEFAULT_FLOOR
    switch_to_hard_at: float | None = None

    def __post_init__(self):
        if not self.initial_temperature > 0:
            raise ParameterError("initial_temperature must be > 0")
        if not 0 < self.gamma < 1:
            raise ParameterError("gamma must lie in (0, 1)")
        if not self.floor >= 0:
            raise ParameterError("floor must be >= 0")


def temperature_at(schedule: AnnealSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    return max(schedule.floor, schedule.initial_temperature * schedule.gamma ** epoch)


def effective_mode(schedule: AnnealSchedule, epoch: int, training: bool) -> tuple[str, float]:
    """``("hard", t)`` at inference or past the switch threshold, else ``("soft", t)``."""
    t = temperature_at(schedule, epoch)
    if not training:
        return "hard", t
    if schedule.switch_to_hard_at is not None and t <= schedule.switch_to_hard_at:
        return "hard", t
    return "soft", t
