"""Critical-learning-regime detection and the loss-tolerance schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def clr_triggered(prev_norm: float, curr_norm: float, eta: float = 0.5) -> bool:
    """Relative change of the gradient norm is at least ``eta``.

    A zero previous norm counts as triggered (unbounded relative change),
    unless the current norm is zero too.
    """
    if prev_norm <= 0.0:
        return curr_norm > 0.0 or prev_norm < 0.0
    return abs(prev_norm - curr_norm) / prev_norm >= eta


def l2_norm(tensors) -> float:
    """Global L2 norm over all elements of all tensors, accumulated in float64."""
    if len(tensors) == 0:
        raise ValueError("l2_norm needs at least one tensor")
    return math.sqrt(sum(float(np.dot(a, a)) for a in (np.asarray(t, dtype=np.float64).ravel() for t in tensors)))


@dataclass
class ToleranceSchedule:
    """Switches between ``p_low`` (inside a CLR window) and ``p_high``.

    Detection runs every ``freq`` steps. ``compare="check"`` compares against
    the norm seen at the previous check step; ``compare="step"`` compares
    against the norm of the immediately preceding step.
    """

    p_low: float
    p_high: float
    eta: float = 0.5
    freq: int = 10
    compare: str = "check"
    clr_remaining: int = 0
    prev_norm: float | None = None
    active: float | None = None
    step: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_low < self.p_high < 1.0:
            raise ValueError(f"need 0 <= p_low < p_high < 1, got {self.p_low}, {self.p_high}")
        if self.freq < 1:
            raise ValueError("freq must be >= 1")
        if self.compare not in ("check", "step"):
            raise ValueError(f"unknown compare mode {self.compare!r}")
        if self.active is None:
            self.active = self.p_low

    @property
    def in_clr(self) -> bool:
        return self.active == self.p_low

    def advance(self, step: int, curr_norm: float) -> float:
        if self.step is not None and step != self.step + 1:
            raise ValueError(f"steps must advance by one: {self.step} -> {step}")
        self.step = step
        if step == 0:
            self.clr_remaining = 0
            self.prev_norm = curr_norm
            self.active = self.p_low
            return self.active
        if step % self.freq == 0:
            hit = clr_triggered(self.prev_norm, curr_norm, self.eta)
            self.clr_remaining = self.freq if hit else 0
            self.prev_norm = curr_norm
        else:
            self.clr_remaining = max(0, self.clr_remaining - 1)
            if self.compare == "step":
                self.prev_norm = curr_norm
        self.active = self.p_low if self.clr_remaining > 0 else self.p_high
        return self.active


@dataclass
class FixedTolerance:
    """Baseline policy: one tolerance for the whole run."""

    p: float

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"tolerance must lie in [0, 1), got {self.p}")

    @property
    def active(self) -> float:
        return self.p

    in_clr = False

    def advance(self, step: int, curr_norm: float) -> float:
        return self.p


def advance(schedule, step: int, curr_norm: float) -> float:
    return schedule.advance(step, curr_norm)
