from __future__ import annotations

from dataclasses import dataclass

SNIPPET = "snippet"
TIME = "time"


@dataclass(frozen=True, order=True)
class TemporalSpan:
    """Half-open interval ``[start, end)`` in snippet indices or seconds."""

    start: float
    end: float
    mode: str = TIME

    def __post_init__(self):
        object.__setattr__(self, "start", float(self.start))
        object.__setattr__(self, "end", float(self.end))
        if self.mode not in (SNIPPET, TIME):
            raise ValueError(f"unknown span mode {self.mode!r}")
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    @property
    def length(self) -> float:
        return self.end - self.start

    def to_time(self, snippet_duration: float) -> "TemporalSpan":
        if self.mode == TIME:
            return self
        return TemporalSpan(self.start * snippet_duration, self.end * snippet_duration, TIME)
