"""Boot a local cloud, drive agents through it and measure the result."""

from .cloud import LocalCloud, build_system
from .config import CloudConfig
from .measure import TimingBreakdown, compare, simulated_manual
from .scenario import ScenarioReport, run_smart_charging
from .security import RowResult, security_suite, suite_passed

__all__ = [
    "CloudConfig",
    "LocalCloud",
    "RowResult",
    "ScenarioReport",
    "TimingBreakdown",
    "build_system",
    "compare",
    "run_smart_charging",
    "security_suite",
    "simulated_manual",
    "suite_passed",
]
