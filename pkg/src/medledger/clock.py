"""Logical millisecond clock. All timestamps in the system are logical, never
wall time, so runs replay identically."""

from __future__ import annotations


class LogicalClock:
    def __init__(self, start: int = 0):
        self._now = start

    @property
    def now(self) -> int:
        return self._now

    def tick(self) -> int:
        """Advance by one millisecond and return the new time."""
        self._now += 1
        return self._now

    def advance_to(self, t: int) -> None:
        """Move forward to t; never moves backwards."""
        if t > self._now:
            self._now = t
