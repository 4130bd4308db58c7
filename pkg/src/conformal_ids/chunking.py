"""Adaptive chunk-size controller driven by an EMA of the drift rate."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Optional


@dataclass
class ControllerState:
    """Chunk-size feedback controller.

    After every chunk, ``observe`` updates the cumulative drift rate
    ``t_drift / t_chunks``, folds it into the EMA and halves the chunk size
    when the EMA is above ``ema_high`` or grows it by ``delta`` when below
    ``ema_low``. ``window`` switches the rate to the last ``window``
    observations instead of the whole run.
    """

    chi: int = 100
    chi_min: int = 10
    chi_max: int = 5000
    lam: float = 0.9
    delta: int = 100
    ema_high: float = 0.2
    ema_low: float = 0.05
    window: Optional[int] = None
    ema: float = 0.0
    t_drift: int = 0
    t_chunks: int = 0
    trace: list = field(default_factory=list)
    _recent: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if not self.chi_min <= self.chi <= self.chi_max:
            raise ValueError(f"need chi_min <= chi0 <= chi_max, got "
                             f"{self.chi_min}, {self.chi}, {self.chi_max}")
        if self.chi_min < 1:
            raise ValueError("chi_min must be >= 1")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lambda must be in (0, 1)")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if not 0.0 <= self.ema_low <= self.ema_high <= 1.0:
            raise ValueError("need 0 <= ema_low <= ema_high <= 1")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")

    def drift_rate(self) -> float:
        if self.window is None:
            return self.t_drift / self.t_chunks
        return sum(self._recent) / len(self._recent)

    def observe(self, drift_detected: bool) -> int:
        """Record one chunk outcome and return the size of the next chunk."""
        if drift_detected:
            self.t_drift += 1
        self.t_chunks += 1
        if self.window is not None:
            self._recent.append(1 if drift_detected else 0)
            if len(self._recent) > self.window:
                self._recent.popleft()
        r = self.drift_rate()
        self.ema = self.lam * self.ema + (1.0 - self.lam) * r
        if self.ema > self.ema_high:
            self.chi = max(self.chi_min, self.chi // 2)
        elif self.ema < self.ema_low:
            self.chi = min(self.chi_max, self.chi + self.delta)
        self.trace.append(self.chi)
        return self.chi


def controller_new(chi0: int = 100, chi_min: int = 10, chi_max: int = 5000,
                   lam: float = 0.9, delta: int = 100, **kwargs) -> ControllerState:
    return ControllerState(chi=chi0, chi_min=chi_min, chi_max=chi_max,
                           lam=lam, delta=delta, **kwargs)


def observe(state: ControllerState, drift_detected: bool) -> int:
    return state.observe(drift_detected)


def write_trace_csv(sizes, path) -> None:
    """Write ``chunk_index,chunk_size`` rows for the chunks actually consumed."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chunk_index", "chunk_size"])
        for i, size in enumerate(sizes):
            writer.writerow([i, size])
