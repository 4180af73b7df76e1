"""DeviceRegistry: the only core function that accepts an Onboarding certificate."""

from __future__ import annotations

import datetime as dt
import logging
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .. import errors, naming
from ..context import DEVICE_REGISTRY, SYSTEM_REGISTRY, CloudContext, health_route
from ..messages import check_metadata, format_time, optional_str, parse_time, require_str
from ..pki import CertificateKind, VerifiedIdentity, b64
from ..transport import Request, Routes
from .base import RegistryBase, cascade_call, check_address, row_times
from .store import KeyedLocks, Repository, dumps_meta, loads_meta

logger = logging.getLogger(__name__)

SCHEMA = """
CREATE TABLE IF NOT EXISTS devices (
    device_name TEXT NOT NULL UNIQUE,
    mac_address TEXT NOT NULL,
    address TEXT,
    public_key BLOB NOT NULL,
    end_of_validity TEXT NOT NULL,
    eov_epoch REAL NOT NULL,
    metadata TEXT NOT NULL,
    UNIQUE (device_name, mac_address)
)
"""


@dataclass
class DeviceRegistryEntry:
    device_name: str
    mac_address: str
    public_key: bytes
    end_of_validity: dt.datetime
    metadata: dict[str, str] = field(default_factory=dict)
    address: Optional[str] = None

    def to_row(self) -> dict[str, Any]:
        return {
            "device_name": self.device_name,
            "mac_address": self.mac_address,
            "address": self.address,
            "public_key": self.public_key,
            "metadata": dumps_meta(self.metadata),
            **row_times(self.end_of_validity),
        }

    @classmethod
    def from_row(cls, row: dict) -> "DeviceRegistryEntry":
        return cls(
            row["device_name"],
            row["mac_address"],
            bytes(row["public_key"]),
            parse_time(row["end_of_validity"]),
            loads_meta(row["metadata"]),
            row["address"],
        )

    def to_wire(self) -> dict[str, Any]:
        out = {
            "deviceName": self.device_name,
            "macAddress": naming.format_mac(self.mac_address),
            "publicKey": b64(self.public_key),
            "endOfValidity": format_time(self.end_of_validity),
            "metadata": dict(self.metadata),
            "endpoint": self.address,
        }
        if self.address is not None:
            out["address"] = self.address
        return out


def parse_device_ref(body: Any) -> tuple[str, str]:
    """``{deviceName, macAddress}`` with the MAC normalized."""
    if not isinstance(body, dict):
        raise errors.MalformedRequest("device reference must be an object")
    name = naming.check_label(require_str(body, "deviceName", 63), "deviceName")
    mac = naming.normalize_mac(require_str(body, "macAddress", 32))
    return name, mac


class DeviceRegistry(RegistryBase):
    system_name = DEVICE_REGISTRY

    def __init__(self, ctx: CloudContext, path: Optional[Path] = None, key_algorithm: str = "ec-p256"):
        super().__init__(ctx, Repository(path, "devices", SCHEMA, "device_name"), key_algorithm)
        self._locks = KeyedLocks()

    def entry_to_wire(self, row: dict) -> dict:
        return DeviceRegistryEntry.from_row(row).to_wire()

    def _parse(self, body: dict) -> tuple[str, str, Optional[str], dt.datetime, dict]:
        name, mac = parse_device_ref(body)
        if name == self.ctx.reserved_device:
            raise errors.InvalidRequest(f"device name {name!r} is reserved for core systems")
        address = optional_str(body, "address", 253)
        if address is not None:
            check_address(address)
        return name, mac, address, self.end_of_validity(body.get("endOfValidity")), check_metadata(body.get("metadata"))

    def _insert(self, entry: DeviceRegistryEntry) -> None:
        try:
            self.repo.insert(entry.to_row())
        except sqlite3.IntegrityError:
            raise errors.DuplicateDevice(f"device {entry.device_name!r} is already registered") from None

    def _check_absent(self, name: str) -> None:
        if self.repo.find(device_name=name):
            raise errors.DuplicateDevice(f"device {name!r} is already registered")

    # -- registry operations-----------------------------------------------

    def device_onboard(self, body: dict, caller: VerifiedIdentity) -> dict:
        """Register the device and return a Device certificate for it."""
        self.ctx.require_kind(caller, CertificateKind.ONBOARDING)
        name, mac, address, end, meta = self._parse(body)
        cn = naming.device_common_name(name, self.ctx.cloud_name)
        self.ctx.require_common_name(caller, cn)
        with self._locks(name):
            self._check_absent(name)
            encoded, keys = self.csr_from_request(body, cn)
            signed = self.request_certificate(encoded, CertificateKind.DEVICE)
            entry = DeviceRegistryEntry(name, mac, signed.certificate.public_key, end, meta, address)
            self._insert(entry)
        logger.info("onboarded device %s", name)
        return {"deviceEntry": entry.to_wire(), **self.grant_wire(signed, keys, "deviceCertificate")}

    def device_register(self, body: dict, caller: VerifiedIdentity) -> dict:
        self.ctx.require_kind(caller, CertificateKind.DEVICE)
        name, mac, address, end, meta = self._parse(body)
        self.ctx.require_common_name(caller, naming.device_common_name(name, self.ctx.cloud_name))
        with self._locks(name):
            self._check_absent(name)
            entry = DeviceRegistryEntry(name, mac, caller.certificate.public_key, end, meta, address)
            self._insert(entry)
        return entry.to_wire()

    def device_unregister(self, device_name: str, mac_address: str, caller: VerifiedIdentity) -> None:
        self.ctx.require_kind(caller, CertificateKind.DEVICE)
        name, mac = parse_device_ref({"deviceName": device_name, "macAddress": mac_address})
        self.ctx.require_common_name(caller, naming.device_common_name(name, self.ctx.cloud_name))
        with self._locks(name):
            rows = self.repo.find(device_name=name, mac_address=mac)
            if not rows or not self.repo.delete(device_name=name, mac_address=mac):
                raise errors.NotFound(f"device {name!r} is not registered")
        self.cascade_removed(rows)

    def cascade_removed(self, rows: list[dict]) -> None:
        devices = [{"deviceName": r["device_name"], "macAddress": r["mac_address"]} for r in rows]
        cascade_call(self.ctx, SYSTEM_REGISTRY, {"devices": devices})

    # -- HTTP -------------------------------------------------------------

    def routes(self) -> Routes:
        def onboard_name(req: Request):
            caller = self.ctx.authenticate(req)
            body = req.json_object()
            body.pop("certificateSigningRequest", None)
            return self.device_onboard(body, caller)

        def onboard_csr(req: Request):
            caller = self.ctx.authenticate(req)
            body = req.json_object()
            require_str(body, "certificateSigningRequest", 16384)
            return self.device_onboard(body, caller)

        def register(req: Request):
            caller = self.ctx.authenticate(req)
            return self.device_register(req.json_object(), caller)

        def unregister(req: Request):
            caller = self.ctx.authenticate(req)
            self.device_unregister(req.query.get("deviceName", ""), req.query.get("macAddress", ""), caller)
            return {"removed": 1}

        return {
            ("POST", "/device-registry/onboarding/name"): onboard_name,
            ("POST", "/device-registry/onboarding/csr"): onboard_csr,
            ("POST", "/device-registry/register"): register,
            ("DELETE", "/device-registry/unregister"): unregister,
            ("POST", "/device-registry/query"): self.http_query,
            ("GET", "/health"): health_route(DEVICE_REGISTRY),
        }
