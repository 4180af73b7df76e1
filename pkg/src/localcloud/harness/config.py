"""Cloud configuration file (JSON)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .. import errors, naming
from ..context import CORE_SYSTEMS

PROFILES = ("default", "hardened")
MODES = ("threads", "processes")


@dataclass
class CloudConfig:
    cloud_name: str = "testcloud"
    data_dir: Path = Path("./cloud-data")
    host: str = "127.0.0.1"
    ports: dict[str, int] = field(default_factory=dict)
    key_algorithm: str = "ec-p256"
    validity_days: int = 365
    manufacturer_anchors: list[Path] = field(default_factory=list)
    shared_secrets: dict[str, str] = field(default_factory=dict)
    shared_secret_fallback: Optional[str] = None
    authorization_rules: list[dict[str, str]] = field(default_factory=list)
    orchestration_rules: list[dict[str, Any]] = field(default_factory=list)
    intercloud_rules: list[dict[str, str]] = field(default_factory=list)
    profile: str = "default"
    mode: str = "threads"
    verification_mode: str = "cache"
    gating: bool = True
    token_ttl: float = 300.0

    def __post_init__(self) -> None:
        try:
            naming.check_label(self.cloud_name, "cloud name")
        except errors.LocalCloudError as exc:
            raise errors.BadConfig(str(exc)) from None
        self.data_dir = Path(self.data_dir)
        self.manufacturer_anchors = [Path(p) for p in self.manufacturer_anchors]
        unknown = set(self.ports) - set(CORE_SYSTEMS)
        if unknown:
            raise errors.BadConfig(f"ports given for unknown systems: {sorted(unknown)}")
        fixed = [p for p in self.ports.values() if p]
        if len(fixed) != len(set(fixed)):
            raise errors.BadConfig("core system ports must be distinct")
        for system, port in self.ports.items():
            if isinstance(port, bool) or not isinstance(port, int) or not 0 <= port <= 65535:
                raise errors.BadConfig(f"bad port for {system}: {port!r}")
        if self.profile not in PROFILES:
            raise errors.BadConfig(f"profile must be one of {PROFILES}")
        if self.mode not in MODES:
            raise errors.BadConfig(f"mode must be one of {MODES}")
        if self.verification_mode not in ("cache", "ca"):
            raise errors.BadConfig("verification_mode must be 'cache' or 'ca'")
        if not isinstance(self.validity_days, int) or self.validity_days <= 0:
            raise errors.BadConfig("validity_days must be a positive integer")
        if self.token_ttl <= 0:
            raise errors.BadConfig("token_ttl must be positive")

    @property
    def hardened(self) -> bool:
        return self.profile == "hardened"

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CloudConfig":
        if not isinstance(data, dict):
            raise errors.BadConfig("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise errors.BadConfig(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise errors.BadConfig(str(exc)) from None

    @classmethod
    def load(cls, path: Path) -> "CloudConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise errors.BadConfig(f"cannot read {path}: {exc}") from None
        config = cls.from_dict(data)
        if not config.data_dir.is_absolute():
            config.data_dir = (Path(path).parent / config.data_dir).resolve()
        return config

    def to_dict(self) -> dict[str, Any]:
        return {
            "cloud_name": self.cloud_name,
            "data_dir": str(self.data_dir),
            "host": self.host,
            "ports": dict(self.ports),
            "key_algorithm": self.key_algorithm,
            "validity_days": self.validity_days,
            "manufacturer_anchors": [str(p) for p in self.manufacturer_anchors],
            "shared_secrets": dict(self.shared_secrets),
            "shared_secret_fallback": self.shared_secret_fallback,
            "authorization_rules": list(self.authorization_rules),
            "orchestration_rules": list(self.orchestration_rules),
            "intercloud_rules": list(self.intercloud_rules),
            "profile": self.profile,
            "mode": self.mode,
            "verification_mode": self.verification_mode,
            "gating": self.gating,
            "token_ttl": self.token_ttl,
        }

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
