"""Device, system and service registries."""

from .device import DeviceRegistry, DeviceRegistryEntry
from .service import ServiceRegistry, ServiceRegistryEntry
from .store import QueryForm, Repository
from .system import SystemRegistry, SystemRegistryEntry

__all__ = [
    "DeviceRegistry",
    "DeviceRegistryEntry",
    "QueryForm",
    "Repository",
    "ServiceRegistry",
    "ServiceRegistryEntry",
    "SystemRegistry",
    "SystemRegistryEntry",
]
