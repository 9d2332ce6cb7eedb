from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass
class OverheadLedger:
    """Hours spent on the four checkpoint-related overheads of one run."""

    save_hours: float = 0.0
    load_hours: float = 0.0
    lost_hours: float = 0.0
    reschedule_hours: float = 0.0

    @property
    def total(self) -> float:
        return self.save_hours + self.load_hours + self.lost_hours + self.reschedule_hours

    def as_dict(self) -> dict:
        return asdict(self)
