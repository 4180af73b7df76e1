"""What a device hosts: its identity, its systems and their services."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .. import errors, naming
from ..messages import check_metadata
from ..registries.base import check_address, check_uri
from ..registries.service import check_interfaces


@dataclass(frozen=True)
class ProvidedService:
    service_definition: str
    service_uri: str
    interfaces: tuple[str, ...] = ("HTTPS-SECURE-JSON",)
    metadata: dict[str, str] = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self) -> None:
        naming.check_label(self.service_definition, "serviceDefinition")
        check_uri(self.service_uri)


@dataclass(frozen=True)
class HostedSystem:
    name: str
    address: str = "127.0.0.1"
    port: int = 0
    provides: tuple[ProvidedService, ...] = ()
    consumes: tuple[str, ...] = ()
    metadata: dict[str, str] = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self) -> None:
        naming.check_label(self.name, "system name")
        check_address(self.address)
        if self.port:
            naming.check_port(self.port)
        for definition in self.consumes:
            naming.check_label(definition, "consumed service")
        uris = [s.service_uri for s in self.provides]
        if len(set(uris)) != len(uris):
            raise errors.InvalidRequest(f"system {self.name!r} reuses a service URI")


@dataclass(frozen=True)
class HostedManifest:
    device_name: str
    mac_address: str
    systems: tuple[HostedSystem, ...]
    address: Optional[str] = None
    metadata: dict[str, str] = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self) -> None:
        naming.check_label(self.device_name, "device name")
        object.__setattr__(self, "mac_address", naming.normalize_mac(self.mac_address))
        if not self.systems:
            raise errors.InvalidRequest("a manifest needs at least one system")
        names = [s.name for s in self.systems]
        if len(set(names)) != len(names):
            raise errors.InvalidRequest("system names must be unique within a device")
        if self.address is not None:
            check_address(self.address)

    def system(self, name: str) -> HostedSystem:
        for s in self.systems:
            if s.name == name:
                return s
        raise errors.NotFound(f"no system {name!r} in manifest")

    @classmethod
    def from_dict(cls, data: Any) -> "HostedManifest":
        if not isinstance(data, dict):
            raise errors.InvalidRequest("manifest must be a JSON object")
        try:
            device = data["device"]
            systems = tuple(
                HostedSystem(
                    s["name"],
                    s.get("address", "127.0.0.1"),
                    int(s.get("port", 0)),
                    tuple(
                        ProvidedService(
                            p["serviceDefinition"],
                            p["serviceUri"],
                            tuple(check_interfaces(p.get("interfaces"))),
                            check_metadata(p.get("metadata")),
                        )
                        for p in s.get("provides", [])
                    ),
                    tuple(s.get("consumes", [])),
                    check_metadata(s.get("metadata")),
                )
                for s in data["systems"]
            )
            return cls(
                device["name"],
                device["macAddress"],
                systems,
                device.get("address"),
                check_metadata(device.get("metadata")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise errors.InvalidRequest(f"malformed manifest: {exc}") from None

    @classmethod
    def load(cls, path: Path) -> "HostedManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict[str, Any]:
        device: dict[str, Any] = {"name": self.device_name, "macAddress": naming.format_mac(self.mac_address)}
        if self.address is not None:
            device["address"] = self.address
        if self.metadata:
            device["metadata"] = dict(self.metadata)
        return {
            "device": device,
            "systems": [
                {
                    "name": s.name,
                    "address": s.address,
                    "port": s.port,
                    "provides": [
                        {
                            "serviceDefinition": p.service_definition,
                            "serviceUri": p.service_uri,
                            "interfaces": list(p.interfaces),
                            "metadata": dict(p.metadata),
                        }
                        for p in s.provides
                    ],
                    "consumes": list(s.consumes),
                    "metadata": dict(s.metadata),
                }
                for s in self.systems
            ],
        }
