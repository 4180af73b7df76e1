"""Structured identifiers for clouds, devices, systems and services.

Identifiers render to underscore-prefixed, dot-separated templates in the
DNS-SD style::

    cloud    _gatekeeper._InterCloudNegotiations._protocol._transport._InterCloudNegotiations:port
    device   _devicename._localcloudname._interface._macprotocol._macaddress
    system   _systemname._devicename._protocol._transport._domain
    service  _servicename._sysname._protocol._transport_domain:port

Note the service template joins transport and domain with ``_`` rather than
``._``; it is reproduced as written.

Certificate common names use a dotted ``entity.parent....cloud`` form:

    device   devicename.cloud
    system   systemname.devicename.cloud
    service  servicename.systemname.port.cloud

Label counts differ per kind and every label is a DNS label, so the mapping
is injective over (kind, naming key) within one cloud.  Transport details
(interface, MAC, protocol, domain) are not part of the name.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Union

from .errors import MalformedIdentifier

LABEL_PATTERN = r"[a-z0-9](?:[a-z0-9-]{0,61}[a-z0-9])?"
_LABEL_RE = re.compile(rf"^{LABEL_PATTERN}$")
_PORT = r"[1-9][0-9]{0,4}"
_MAC_HEX_RE = re.compile(r"^[0-9a-f]{12}$")
_MAC_COLON_RE = re.compile(r"^[0-9a-fA-F]{2}([:-][0-9a-fA-F]{2}){5}$")

INTERCLOUD = "InterCloudNegotiations"


class IdentifierKind(str, Enum):
    CLOUD = "cloud"
    DEVICE = "device"
    SYSTEM = "system"
    SERVICE = "service"


def is_label(text: object) -> bool:
    return isinstance(text, str) and bool(_LABEL_RE.match(text))


def check_label(text: object, field: str = "label") -> str:
    if not is_label(text):
        raise MalformedIdentifier(f"{field} is not a valid label")
    return text  # type: ignore[return-value]


def check_port(port: object, field: str = "port") -> int:
    if isinstance(port, bool) or not isinstance(port, int) or not 1 <= port <= 65535:
        raise MalformedIdentifier(f"{field} must be an integer in 1..65535")
    return port


def normalize_mac(mac: Union[str, bytes]) -> str:
    """Return the 12-hex-digit lowercase form of a 6-octet hardware address."""
    if isinstance(mac, (bytes, bytearray)):
        if len(mac) != 6:
            raise MalformedIdentifier("MAC address must be 6 octets")
        return bytes(mac).hex()
    if not isinstance(mac, str):
        raise MalformedIdentifier("MAC address must be a string")
    if _MAC_HEX_RE.match(mac):
        return mac
    if _MAC_COLON_RE.match(mac):
        return re.sub(r"[:-]", "", mac).lower()
    raise MalformedIdentifier("bad MAC address")


def format_mac(mac: str) -> str:
    """Colon form ``aa:bb:cc:dd:ee:ff`` of a normalized MAC."""
    return ":".join(mac[i : i + 2] for i in range(0, 12, 2))


@dataclass(frozen=True)
class CloudIdentifier:
    gatekeeper_system_name: str
    protocol: str
    transport: str
    port: int

    kind = IdentifierKind.CLOUD

    def __post_init__(self) -> None:
        check_label(self.gatekeeper_system_name, "gatekeeper_system_name")
        check_label(self.protocol, "protocol")
        check_label(self.transport, "transport")
        check_port(self.port)

    def render(self) -> str:
        return (
            f"_{self.gatekeeper_system_name}._{INTERCLOUD}._{self.protocol}"
            f"._{self.transport}._{INTERCLOUD}:{self.port}"
        )


@dataclass(frozen=True)
class DeviceIdentifier:
    device_name: str
    local_cloud_name: str
    interface: str
    mac_protocol: str
    mac_address: str

    kind = IdentifierKind.DEVICE

    def __post_init__(self) -> None:
        check_label(self.device_name, "device_name")
        check_label(self.local_cloud_name, "local_cloud_name")
        check_label(self.interface, "interface")
        check_label(self.mac_protocol, "mac_protocol")
        object.__setattr__(self, "mac_address", normalize_mac(self.mac_address))

    def render(self) -> str:
        return (
            f"_{self.device_name}._{self.local_cloud_name}._{self.interface}"
            f"._{self.mac_protocol}._{self.mac_address}"
        )


@dataclass(frozen=True)
class SystemIdentifier:
    system_name: str
    device_name: str
    protocol: str = "https"
    transport: str = "tcp"
    domain: str = "local"

    kind = IdentifierKind.SYSTEM

    def __post_init__(self) -> None:
        check_label(self.system_name, "system_name")
        check_label(self.device_name, "device_name")
        check_label(self.protocol, "protocol")
        check_label(self.transport, "transport")
        check_label(self.domain, "domain")

    def render(self) -> str:
        return (
            f"_{self.system_name}._{self.device_name}._{self.protocol}"
            f"._{self.transport}._{self.domain}"
        )


@dataclass(frozen=True)
class ServiceIdentifier:
    service_name: str
    system_name: str
    protocol: str
    transport: str
    domain: str
    port: int

    kind = IdentifierKind.SERVICE

    def __post_init__(self) -> None:
        check_label(self.service_name, "service_name")
        check_label(self.system_name, "system_name")
        check_label(self.protocol, "protocol")
        check_label(self.transport, "transport")
        check_label(self.domain, "domain")
        check_port(self.port)

    def render(self) -> str:
        return (
            f"_{self.service_name}._{self.system_name}._{self.protocol}"
            f"._{self.transport}_{self.domain}:{self.port}"
        )


Identifier = Union[CloudIdentifier, DeviceIdentifier, SystemIdentifier, ServiceIdentifier]

_L = f"({LABEL_PATTERN})"
_PATTERNS = {
    IdentifierKind.CLOUD: re.compile(
        rf"^_{_L}\._{INTERCLOUD}\._{_L}\._{_L}\._{INTERCLOUD}:({_PORT})$"
    ),
    IdentifierKind.DEVICE: re.compile(rf"^_{_L}\._{_L}\._{_L}\._{_L}\._([0-9a-f]{{12}})$"),
    IdentifierKind.SYSTEM: re.compile(rf"^_{_L}\._{_L}\._{_L}\._{_L}\._{_L}$"),
    IdentifierKind.SERVICE: re.compile(rf"^_{_L}\._{_L}\._{_L}\._{_L}_{_L}:({_PORT})$"),
}
_CLASSES = {
    IdentifierKind.CLOUD: CloudIdentifier,
    IdentifierKind.DEVICE: DeviceIdentifier,
    IdentifierKind.SYSTEM: SystemIdentifier,
    IdentifierKind.SERVICE: ServiceIdentifier,
}


def render(identifier: Identifier) -> str:
    return identifier.render()


def parse(text: str, kind: Union[IdentifierKind, str]) -> Identifier:
    """Inverse of :func:`render`; raises :class:`MalformedIdentifier`."""
    try:
        kind = IdentifierKind(kind)
    except ValueError:
        raise MalformedIdentifier(f"unknown identifier kind {kind!r}") from None
    if not isinstance(text, str) or not text:
        raise MalformedIdentifier("empty identifier")
    m = _PATTERNS[kind].match(text)
    if m is None:
        raise MalformedIdentifier(f"not a {kind.value} identifier")
    fields = list(m.groups())
    if kind in (IdentifierKind.CLOUD, IdentifierKind.SERVICE):
        fields[-1] = int(fields[-1])
    try:
        return _CLASSES[kind](*fields)
    except MalformedIdentifier:
        raise
    except ValueError as exc:  # pragma: no cover - regex already constrains
        raise MalformedIdentifier(str(exc)) from None


def common_name(identifier: Identifier, cloud: str) -> str:
    check_label(cloud, "cloud")
    if isinstance(identifier, CloudIdentifier):
        return cloud
    if isinstance(identifier, DeviceIdentifier):
        return device_common_name(identifier.device_name, cloud)
    if isinstance(identifier, SystemIdentifier):
        return system_common_name(identifier.system_name, identifier.device_name, cloud)
    if isinstance(identifier, ServiceIdentifier):
        return f"{identifier.service_name}.{identifier.system_name}.{identifier.port}.{cloud}"
    raise MalformedIdentifier(f"not an identifier: {type(identifier).__name__}")


def device_common_name(device_name: str, cloud: str) -> str:
    return f"{device_name}.{cloud}"


def system_common_name(system_name: str, device_name: str, cloud: str) -> str:
    return f"{system_name}.{device_name}.{cloud}"


def split_common_name(cn: str) -> list[str]:
    """Split a dotted common name into labels, validating each."""
    if not isinstance(cn, str) or not cn or len(cn) > 64:
        raise MalformedIdentifier("common name must be 1..64 characters")
    parts = cn.split(".")
    for part in parts:
        check_label(part, "common name label")
    return parts
