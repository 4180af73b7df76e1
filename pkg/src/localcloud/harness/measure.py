"""Per-phase timing of scenario runs and the manual-onboarding comparison."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Any

PHASES = ("onboarding", "operation", "deregistration")
# seconds a technician spends creating and deploying certificates by hand
MANUAL_CERTIFICATE_SECONDS = 205.0


@dataclass
class TimingBreakdown:
    """Phase durations in milliseconds, one list entry per repetition."""

    label: str = "automated"
    samples: dict[str, list[float]] = field(default_factory=lambda: {p: [] for p in PHASES})

    def add(self, onboarding: float, operation: float, deregistration: float) -> None:
        for phase, value in zip(PHASES, (onboarding, operation, deregistration)):
            if value < 0 or math.isnan(value):
                raise ValueError(f"{phase} duration must be non-negative, got {value}")
            self.samples[phase].append(float(value))

    @property
    def repetitions(self) -> int:
        return len(self.samples["onboarding"])

    def mean(self, phase: str) -> float:
        values = self.samples[phase]
        return math.fsum(values) / len(values) if values else 0.0

    def spread(self, phase: str) -> float:
        values = self.samples[phase]
        return statistics.stdev(values) if len(values) > 1 else 0.0

    @property
    def phase_totals(self) -> dict[str, float]:
        return {p: math.fsum(self.samples[p]) for p in PHASES}

    @property
    def total(self) -> float:
        return math.fsum(self.phase_totals.values())

    @property
    def mean_total(self) -> float:
        return self.total / self.repetitions if self.repetitions else 0.0

    @property
    def fractions(self) -> dict[str, float]:
        total = self.total
        if total == 0:
            return {p: 0.0 for p in PHASES}
        return {p: v / total for p, v in self.phase_totals.items()}

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "repetitions": self.repetitions,
            "unit": "ms",
            "phases": {
                p: {"mean": self.mean(p), "spread": self.spread(p), "samples": list(self.samples[p])} for p in PHASES
            },
            "fractions": self.fractions,
            "meanTotal": self.mean_total,
        }


def simulated_manual(automated: TimingBreakdown, registration_ms: list[float], stand_in_seconds: float) -> TimingBreakdown:
    """Replace each onboarding sample with the stand-in cost plus the registration calls.

    Manual deployment still needs the registry calls once certificates exist,
    so only certificate creation and deployment is substituted.  Nothing sleeps.
    """
    manual = TimingBreakdown("simulated manual baseline")
    for i in range(automated.repetitions):
        manual.add(
            stand_in_seconds * 1000.0 + registration_ms[i],
            automated.samples["operation"][i],
            automated.samples["deregistration"][i],
        )
    return manual


def compare(automated: TimingBreakdown, manual: TimingBreakdown) -> dict[str, Any]:
    ratio = manual.mean_total / automated.mean_total if automated.mean_total else None
    return {
        "automated": automated.to_dict(),
        "manual": manual.to_dict(),
        "manualOverAutomated": ratio,
        "automatedFaster": automated.repetitions > 0 and automated.mean_total < manual.mean_total,
    }
