"""ServiceRegistry: services offered by registered systems.

Only the system that registered a service may remove it; the owner's common
name is stored alongside the entry.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import re
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .. import errors, naming
from ..context import SERVICE_REGISTRY, SYSTEM_REGISTRY, CloudContext, health_route
from ..messages import check_metadata, format_time, parse_time, require_str
from ..pki import CertificateKind, VerifiedIdentity
from ..transport import Request, Routes
from .base import RegistryBase, check_uri, lookup, row_times
from .store import KeyedLocks, Repository, dumps_meta, loads_meta
from .system import parse_system_ref

logger = logging.getLogger(__name__)

_INTERFACE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")
MAX_INTERFACES = 8

SCHEMA = """
CREATE TABLE IF NOT EXISTS services (
    service_definition TEXT NOT NULL,
    system_name TEXT NOT NULL,
    address TEXT NOT NULL,
    port INTEGER NOT NULL,
    owner_cn TEXT NOT NULL,
    service_uri TEXT NOT NULL,
    interfaces TEXT NOT NULL,
    end_of_validity TEXT NOT NULL,
    eov_epoch REAL NOT NULL,
    metadata TEXT NOT NULL,
    UNIQUE (service_definition, system_name, address, port)
)
"""


def check_interfaces(value: Any) -> list[str]:
    if value is None:
        return ["HTTPS-SECURE-JSON"]
    if not isinstance(value, list) or not 0 < len(value) <= MAX_INTERFACES:
        raise errors.MalformedRequest("interfaces must be a non-empty list")
    for item in value:
        if not isinstance(item, str) or not _INTERFACE.match(item):
            raise errors.MalformedRequest("interface names must match [A-Za-z0-9_-]+")
    return list(value)


@dataclass
class ServiceRegistryEntry:
    service_definition: str
    system_name: str
    address: str
    port: int
    service_uri: str
    interfaces: list[str]
    end_of_validity: dt.datetime
    metadata: dict[str, str] = field(default_factory=dict)
    owner_cn: str = ""

    @property
    def endpoint(self) -> str:
        host = f"[{self.address}]" if ":" in self.address else self.address
        return f"https://{host}:{self.port}{self.service_uri}"

    def to_row(self) -> dict[str, Any]:
        return {
            "service_definition": self.service_definition,
            "system_name": self.system_name,
            "address": self.address,
            "port": self.port,
            "owner_cn": self.owner_cn,
            "service_uri": self.service_uri,
            "interfaces": json.dumps(self.interfaces),
            "metadata": dumps_meta(self.metadata),
            **row_times(self.end_of_validity),
        }

    @classmethod
    def from_row(cls, row: dict) -> "ServiceRegistryEntry":
        return cls(
            row["service_definition"],
            row["system_name"],
            row["address"],
            row["port"],
            row["service_uri"],
            json.loads(row["interfaces"]),
            parse_time(row["end_of_validity"]),
            loads_meta(row["metadata"]),
            row["owner_cn"],
        )

    def to_wire(self) -> dict[str, Any]:
        return {
            "serviceDefinition": self.service_definition,
            "providerSystem": {"systemName": self.system_name, "address": self.address, "port": self.port},
            "providerCommonName": self.owner_cn,
            "serviceUri": self.service_uri,
            "interfaces": list(self.interfaces),
            "endOfValidity": format_time(self.end_of_validity),
            "metadata": dict(self.metadata),
            "endpoint": self.endpoint,
        }


class ServiceRegistry(RegistryBase):
    system_name = SERVICE_REGISTRY

    def __init__(self, ctx: CloudContext, path: Optional[Path] = None):
        super().__init__(ctx, Repository(path, "services", SCHEMA, "service_definition"))
        self._locks = KeyedLocks()

    def entry_to_wire(self, row: dict) -> dict:
        return ServiceRegistryEntry.from_row(row).to_wire()

    def _provider_cn(self, name: str, address: str, port: int) -> str:
        try:
            found = lookup(
                self.ctx, SYSTEM_REGISTRY, name, lambda e: e["address"] == address and e["port"] == port
            )
        except (errors.ServiceUnavailable, errors.TransportRejected) as exc:
            raise errors.ServiceUnavailable(f"system registry unavailable ({exc.code})") from None
        if found is None:
            raise errors.UnknownProviderSystem(f"system {name!r} at {address}:{port} is not registered")
        return found["commonName"]

    def service_register(self, body: dict, caller: VerifiedIdentity) -> dict:
        self.ctx.require_kind(caller, CertificateKind.SYSTEM)
        definition = naming.check_label(require_str(body, "serviceDefinition", 63), "serviceDefinition")
        name, address, port = parse_system_ref(body.get("providerSystem"))
        uri = check_uri(body.get("serviceUri"))
        interfaces = check_interfaces(body.get("interfaces"))
        end = self.end_of_validity(body.get("endOfValidity"))
        meta = check_metadata(body.get("metadata"))
        owner = self._provider_cn(name, address, port)
        self.ctx.require_common_name(caller, owner)
        entry = ServiceRegistryEntry(definition, name, address, port, uri, interfaces, end, meta, owner)
        with self._locks((definition, name, address, port)):
            try:
                self.repo.insert(entry.to_row())
            except sqlite3.IntegrityError:
                raise errors.DuplicateService(f"service {definition!r} is already registered by {name!r}") from None
        logger.info("registered service %s on %s", definition, owner)
        return entry.to_wire()

    def service_unregister(
        self, address: str, port: Any, service_definition: str, system_name: str, caller: VerifiedIdentity
    ) -> None:
        self.ctx.require_kind(caller, CertificateKind.SYSTEM)
        try:
            port = int(port)
        except (TypeError, ValueError):
            raise errors.MalformedRequest("port must be an integer") from None
        name, address, port = parse_system_ref({"systemName": system_name, "address": address, "port": port})
        definition = naming.check_label(service_definition, "serviceDefinition")
        key = dict(service_definition=definition, system_name=name, address=address, port=port)
        with self._locks((definition, name, address, port)):
            rows = self.repo.find(**key)
            if not rows:
                raise errors.NotFound(f"service {definition!r} is not registered")
            self.ctx.require_common_name(caller, rows[0]["owner_cn"])
            self.repo.delete(**key)

    def remove_for_systems(self, systems: list[tuple[str, str, int]]) -> int:
        removed = 0
        with self.repo.transaction() as db:
            for name, address, port in systems:
                removed += db.execute(
                    "DELETE FROM services WHERE system_name = ? AND address = ? AND port = ?", (name, address, port)
                ).rowcount
        return removed

    # -- HTTP -------------------------------------------------------------

    def routes(self) -> Routes:
        def register(req: Request):
            caller = self.ctx.authenticate(req)
            return self.service_register(req.json_object(), caller)

        def unregister(req: Request):
            caller = self.ctx.authenticate(req)
            q = req.query
            self.service_unregister(
                q.get("address", ""), q.get("port"), q.get("serviceDefinition", ""), q.get("systemName", ""), caller
            )
            return {"removed": 1}

        def cascade(req: Request):
            caller = self.ctx.authenticate(req)
            self.ctx.require_core(caller, SYSTEM_REGISTRY)
            systems = req.json_object().get("systems")
            if not isinstance(systems, list):
                raise errors.MalformedRequest("systems must be a list")
            return {"removed": self.remove_for_systems([parse_system_ref(s) for s in systems])}

        return {
            ("POST", "/service-registry/register"): register,
            ("DELETE", "/service-registry/unregister"): unregister,
            ("POST", "/service-registry/query"): self.http_query,
            ("POST", "/service-registry/cascade"): cascade,
            ("GET", "/health"): health_route(SERVICE_REGISTRY),
        }
