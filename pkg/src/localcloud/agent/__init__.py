"""Device-side onboarding agent and its secure element."""

from .agent import (
    STEPS,
    AgentConfig,
    AgentState,
    CredentialType,
    DeviceAgent,
    InjectedFault,
    OnboardingAborted,
    Registration,
)
from .manifest import HostedManifest, HostedSystem, ProvidedService
from .secure_element import (
    ARROWHEAD_SLOT,
    DEVICE_SLOT,
    MANUFACTURER_SLOT,
    ONBOARDING_SLOT,
    SecureElement,
    system_slot,
)

__all__ = [
    "ARROWHEAD_SLOT",
    "DEVICE_SLOT",
    "MANUFACTURER_SLOT",
    "ONBOARDING_SLOT",
    "STEPS",
    "AgentConfig",
    "AgentState",
    "CredentialType",
    "DeviceAgent",
    "HostedManifest",
    "HostedSystem",
    "InjectedFault",
    "OnboardingAborted",
    "ProvidedService",
    "Registration",
    "SecureElement",
    "system_slot",
]
