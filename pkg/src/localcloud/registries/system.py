"""SystemRegistry: issues System certificates to devices that already hold a
Device certificate, one per hosted system."""

from __future__ import annotations

import datetime as dt
import logging
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .. import errors, naming
from ..context import DEVICE_REGISTRY, SERVICE_REGISTRY, SYSTEM_REGISTRY, CloudContext, health_route
from ..messages import check_metadata, format_time, parse_time, require_int, require_str
from ..pki import CertificateKind, VerifiedIdentity, b64
from ..transport import Request, Routes
from .base import RegistryBase, cascade_call, check_address, lookup, row_times
from .device import parse_device_ref
from .store import KeyedLocks, Repository, dumps_meta, loads_meta

logger = logging.getLogger(__name__)

SCHEMA = """
CREATE TABLE IF NOT EXISTS systems (
    system_name TEXT NOT NULL,
    address TEXT NOT NULL,
    port INTEGER NOT NULL,
    device_name TEXT NOT NULL,
    mac_address TEXT NOT NULL,
    common_name TEXT NOT NULL UNIQUE,
    authentication_info BLOB NOT NULL,
    end_of_validity TEXT NOT NULL,
    eov_epoch REAL NOT NULL,
    metadata TEXT NOT NULL,
    UNIQUE (system_name, address, port)
)
"""


@dataclass
class SystemRegistryEntry:
    system_name: str
    address: str
    port: int
    authentication_info: bytes
    device_name: str
    mac_address: str
    common_name: str
    end_of_validity: dt.datetime
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def endpoint(self) -> str:
        host = f"[{self.address}]" if ":" in self.address else self.address
        return f"https://{host}:{self.port}"

    def to_row(self) -> dict[str, Any]:
        return {
            "system_name": self.system_name,
            "address": self.address,
            "port": self.port,
            "device_name": self.device_name,
            "mac_address": self.mac_address,
            "common_name": self.common_name,
            "authentication_info": self.authentication_info,
            "metadata": dumps_meta(self.metadata),
            **row_times(self.end_of_validity),
        }

    @classmethod
    def from_row(cls, row: dict) -> "SystemRegistryEntry":
        return cls(
            row["system_name"],
            row["address"],
            row["port"],
            bytes(row["authentication_info"]),
            row["device_name"],
            row["mac_address"],
            row["common_name"],
            parse_time(row["end_of_validity"]),
            loads_meta(row["metadata"]),
        )

    def to_wire(self) -> dict[str, Any]:
        return {
            "systemName": self.system_name,
            "address": self.address,
            "port": self.port,
            "authenticationInfo": b64(self.authentication_info),
            "provider": {"deviceName": self.device_name, "macAddress": naming.format_mac(self.mac_address)},
            "commonName": self.common_name,
            "endOfValidity": format_time(self.end_of_validity),
            "metadata": dict(self.metadata),
            "endpoint": self.endpoint,
        }


def parse_system_ref(body: Any) -> tuple[str, str, int]:
    if not isinstance(body, dict):
        raise errors.MalformedRequest("system reference must be an object")
    name = naming.check_label(require_str(body, "systemName", 63), "systemName")
    address = check_address(require_str(body, "address", 253))
    port = naming.check_port(require_int(body, "port"))
    return name, address, port


class SystemRegistry(RegistryBase):
    system_name = SYSTEM_REGISTRY

    def __init__(self, ctx: CloudContext, path: Optional[Path] = None, key_algorithm: str = "ec-p256"):
        super().__init__(ctx, Repository(path, "systems", SCHEMA, "system_name"), key_algorithm)
        self._locks = KeyedLocks()

    def entry_to_wire(self, row: dict) -> dict:
        return SystemRegistryEntry.from_row(row).to_wire()

    def _parse(self, body: dict):
        name, address, port = parse_system_ref(body)
        device, mac = parse_device_ref(body.get("provider"))
        return name, address, port, device, mac, self.end_of_validity(body.get("endOfValidity")), check_metadata(body.get("metadata"))

    def _require_device(self, device: str, mac: str) -> None:
        try:
            found = lookup(self.ctx, DEVICE_REGISTRY, device, lambda e: naming.normalize_mac(e["macAddress"]) == mac)
        except (errors.ServiceUnavailable, errors.TransportRejected) as exc:
            raise errors.ServiceUnavailable(f"device registry unavailable ({exc.code})") from None
        if found is None:
            raise errors.UnknownProviderDevice(f"device {device!r} is not registered")

    def _insert(self, entry: SystemRegistryEntry) -> None:
        if self.repo.find(system_name=entry.system_name, address=entry.address, port=entry.port) or self.repo.find(
            common_name=entry.common_name
        ):
            raise errors.DuplicateSystem(f"system {entry.system_name!r} is already registered")
        try:
            self.repo.insert(entry.to_row())
        except sqlite3.IntegrityError:
            raise errors.DuplicateSystem(f"system {entry.system_name!r} is already registered") from None

    # -- registry operations-----------------------------------------------

    def system_onboard(self, body: dict, caller: VerifiedIdentity) -> dict:
        """Register a hosted system and return its System certificate."""
        self.ctx.require_kind(caller, CertificateKind.DEVICE)
        name, address, port, device, mac, end, meta = self._parse(body)
        self.ctx.require_common_name(caller, naming.device_common_name(device, self.ctx.cloud_name))
        cn = naming.system_common_name(name, device, self.ctx.cloud_name)
        self._require_device(device, mac)
        with self._locks(cn):
            if self.repo.find(common_name=cn) or self.repo.find(system_name=name, address=address, port=port):
                raise errors.DuplicateSystem(f"system {name!r} is already registered")
            encoded, keys = self.csr_from_request(body, cn)
            signed = self.request_certificate(encoded, CertificateKind.SYSTEM)
            entry = SystemRegistryEntry(name, address, port, signed.certificate.public_key, device, mac, cn, end, meta)
            self._insert(entry)
        logger.info("onboarded system %s", cn)
        return {"systemEntry": entry.to_wire(), **self.grant_wire(signed, keys, "systemCertificate")}

    def system_register(self, body: dict, caller: VerifiedIdentity) -> dict:
        self.ctx.require_kind(caller, CertificateKind.SYSTEM)
        name, address, port, device, mac, end, meta = self._parse(body)
        cn = naming.system_common_name(name, device, self.ctx.cloud_name)
        self.ctx.require_common_name(caller, cn)
        self._require_device(device, mac)
        with self._locks(cn):
            entry = SystemRegistryEntry(name, address, port, caller.certificate.public_key, device, mac, cn, end, meta)
            self._insert(entry)
        return entry.to_wire()

    def system_unregister(self, system_name: str, address: str, port: Any, caller: VerifiedIdentity) -> None:
        self.ctx.require_kind(caller, CertificateKind.SYSTEM)
        try:
            port = int(port)
        except (TypeError, ValueError):
            raise errors.MalformedRequest("port must be an integer") from None
        name, address, port = parse_system_ref({"systemName": system_name, "address": address, "port": port})
        rows = self.repo.find(system_name=name, address=address, port=port)
        if not rows:
            raise errors.NotFound(f"system {name!r} is not registered")
        self.ctx.require_common_name(caller, rows[0]["common_name"])
        with self._locks(rows[0]["common_name"]):
            if not self.repo.delete(system_name=name, address=address, port=port):
                raise errors.NotFound(f"system {name!r} is not registered")
        self.cascade_removed(rows)

    def remove_for_devices(self, devices: list[tuple[str, str]]) -> int:
        removed: list[dict] = []
        with self.repo.transaction() as db:
            for device, mac in devices:
                rows = db.execute(
                    "SELECT * FROM systems WHERE device_name = ? AND mac_address = ?", (device, mac)
                ).fetchall()
                removed += [dict(r) for r in rows]
                db.execute("DELETE FROM systems WHERE device_name = ? AND mac_address = ?", (device, mac))
        if removed:
            self.cascade_removed(removed)
        return len(removed)

    def cascade_removed(self, rows: list[dict]) -> None:
        systems = [{"systemName": r["system_name"], "address": r["address"], "port": r["port"]} for r in rows]
        cascade_call(self.ctx, SERVICE_REGISTRY, {"systems": systems})

    # -- HTTP -------------------------------------------------------------

    def routes(self) -> Routes:
        def onboard_name(req: Request):
            caller = self.ctx.authenticate(req)
            body = req.json_object()
            body.pop("certificateSigningRequest", None)
            return self.system_onboard(body, caller)

        def onboard_csr(req: Request):
            caller = self.ctx.authenticate(req)
            body = req.json_object()
            require_str(body, "certificateSigningRequest", 16384)
            return self.system_onboard(body, caller)

        def register(req: Request):
            caller = self.ctx.authenticate(req)
            return self.system_register(req.json_object(), caller)

        def unregister(req: Request):
            caller = self.ctx.authenticate(req)
            q = req.query
            self.system_unregister(q.get("systemName", ""), q.get("address", ""), q.get("port"), caller)
            return {"removed": 1}

        def cascade(req: Request):
            caller = self.ctx.authenticate(req)
            self.ctx.require_core(caller, DEVICE_REGISTRY)
            devices = req.json_object().get("devices")
            if not isinstance(devices, list):
                raise errors.MalformedRequest("devices must be a list")
            return {"removed": self.remove_for_devices([parse_device_ref(d) for d in devices])}

        return {
            ("POST", "/system-registry/onboarding/name"): onboard_name,
            ("POST", "/system-registry/onboarding/csr"): onboard_csr,
            ("POST", "/system-registry/register"): register,
            ("DELETE", "/system-registry/unregister"): unregister,
            ("POST", "/system-registry/query"): self.http_query,
            ("POST", "/system-registry/cascade"): cascade,
            ("GET", "/health"): health_route(SYSTEM_REGISTRY),
        }
