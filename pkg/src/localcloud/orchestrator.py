"""Orchestrator: run-time matchmaking between consumers and providers.

Store mode answers from predefined rules; dynamic mode asks the
ServiceRegistry.  Each application result carries an access token from the
Authorization system; providers the consumer is not permitted to use are
dropped.  Public core services are published as wildcard store rules and
come back without a token.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Protocol

from . import errors, naming
from .authorization import WILDCARD, AuthorizationSystem
from .context import (
    AUTHORIZATION,
    CORE_SERVICES,
    ORCHESTRATOR,
    SERVICE_REGISTRY,
    SYSOP,
    CloudContext,
    health_route,
)
from .messages import check_metadata, require_int, require_str
from .pki import CertificateKind, VerifiedIdentity
from .transport import Request, Routes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OrchestrationRule:
    consumer_system: str
    service_definition: str
    provider_system: str
    provider_endpoint: str
    priority: int = 0
    provider_common_name: str = ""
    metadata: dict[str, str] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self) -> None:
        if self.consumer_system != WILDCARD:
            naming.check_label(self.consumer_system, "consumer system")
        naming.check_label(self.service_definition, "service definition")
        naming.check_label(self.provider_system, "provider system")
        if not isinstance(self.provider_endpoint, str) or not self.provider_endpoint.startswith("https://"):
            raise errors.MalformedRequest("provider endpoint must be an https URL")

    @property
    def public(self) -> bool:
        return self.consumer_system == WILDCARD

    @classmethod
    def from_wire(cls, body: Any) -> "OrchestrationRule":
        if not isinstance(body, dict):
            raise errors.MalformedRequest("orchestration rule must be an object")
        return cls(
            require_str(body, "consumerSystem", 63),
            require_str(body, "serviceDefinition", 63),
            require_str(body, "providerSystem", 63),
            require_str(body, "providerEndpoint", 512),
            require_int(body, "priority") if "priority" in body else 0,
            str(body.get("providerCommonName", "")),
            check_metadata(body.get("metadata")),
        )

    def to_wire(self) -> dict[str, Any]:
        return {
            "consumerSystem": self.consumer_system,
            "serviceDefinition": self.service_definition,
            "providerSystem": self.provider_system,
            "providerEndpoint": self.provider_endpoint,
            "priority": self.priority,
            "providerCommonName": self.provider_common_name,
            "metadata": dict(self.metadata),
        }


class TokenSource(Protocol):
    def __call__(self, consumer: str, consumer_cn: str, provider: str, provider_cn: str, service: str) -> str: ...


def remote_tokens(ctx: CloudContext) -> TokenSource:
    """Fetch tokens from the Authorization system over mutual TLS."""

    def issue(consumer: str, consumer_cn: str, provider: str, provider_cn: str, service: str) -> str:
        body = ctx.client().post(
            ctx.url(AUTHORIZATION) + "/authorization/token",
            {
                "consumer": consumer,
                "consumerCommonName": consumer_cn,
                "provider": provider,
                "providerCommonName": provider_cn,
                "serviceDefinition": service,
            },
            expect_peer=ctx.common_name(AUTHORIZATION),
        )
        return body["token"]

    return issue


def local_tokens(authorization: AuthorizationSystem, orchestrator_identity: VerifiedIdentity) -> TokenSource:
    """In-process token source for tests that skip the network hop."""

    def issue(consumer: str, consumer_cn: str, provider: str, provider_cn: str, service: str) -> str:
        return authorization.generate_token(
            orchestrator_identity, consumer, provider, service, consumer_cn=consumer_cn, provider_cn=provider_cn
        )

    return issue


def core_rules(ctx: CloudContext) -> list[OrchestrationRule]:
    return [
        OrchestrationRule(WILDCARD, definition, system, ctx.endpoints[system], 0, ctx.common_name(system))
        for definition, system in CORE_SERVICES.items()
        if system in ctx.endpoints
    ]


class Orchestrator:
    def __init__(
        self,
        ctx: CloudContext,
        rules: Iterable[OrchestrationRule] = (),
        *,
        tokens: Optional[TokenSource] = None,
        registry_query: Optional[Callable[[str], list[dict]]] = None,
    ):
        self.ctx = ctx
        self._rules: list[OrchestrationRule] = [*core_rules(ctx), *rules]
        self._lock = threading.RLock()
        self.tokens = tokens or remote_tokens(ctx)
        self.registry_query = registry_query or self._query_service_registry
        self.requests = 0

    # -- store ----------------------------------------------------------------

    @property
    def rules(self) -> list[OrchestrationRule]:
        with self._lock:
            return list(self._rules)

    def add_rule(self, rule: OrchestrationRule) -> None:
        with self._lock:
            if rule not in self._rules:
                self._rules.append(rule)

    def remove_rule(self, rule: OrchestrationRule) -> None:
        with self._lock:
            self._rules = [r for r in self._rules if r != rule]

    # -- matchmaking ----------------------------------------------------------

    def _query_service_registry(self, service_definition: str) -> list[dict]:
        body = self.ctx.client().post(
            self.ctx.url(SERVICE_REGISTRY) + "/service-registry/query",
            {"namePattern": service_definition, "validOnly": True},
            expect_peer=self.ctx.common_name(SERVICE_REGISTRY),
        )
        return body.get("entries", [])

    def _candidates(self, consumer: str, service_definition: str, dynamic: bool) -> list[dict]:
        if dynamic and service_definition not in CORE_SERVICES:
            return [
                {
                    "provider": e["providerSystem"],
                    "providerCommonName": e.get("providerCommonName", ""),
                    "serviceUri": e.get("serviceUri", ""),
                    "endpoint": e["endpoint"],
                    "metadata": e.get("metadata", {}),
                    "interfaces": e.get("interfaces", []),
                    "public": False,
                    "priority": 0,
                }
                for e in self.registry_query(service_definition)
            ]
        out = []
        for rule in self.rules:
            if rule.service_definition == service_definition and rule.consumer_system in (consumer, WILDCARD):
                out.append(
                    {
                        "provider": {"systemName": rule.provider_system},
                        "providerCommonName": rule.provider_common_name,
                        "serviceUri": "",
                        "endpoint": rule.provider_endpoint,
                        "metadata": dict(rule.metadata),
                        "interfaces": [],
                        "public": rule.public,
                        "priority": rule.priority,
                    }
                )
        return out

    def orchestrate(self, consumer: VerifiedIdentity, service_definition: str, dynamic: bool = False) -> list[dict]:
        self.requests += 1
        self.ctx.require_kind(consumer, CertificateKind.SYSTEM)
        naming.check_label(service_definition, "requestedService")
        consumer_name = naming.split_common_name(consumer.common_name)[0]
        candidates = self._candidates(consumer_name, service_definition, dynamic)
        if not candidates:
            raise errors.NoProviderFound(f"no provider for {service_definition!r}")
        candidates.sort(key=lambda c: (c["priority"], c["providerCommonName"]))
        results = []
        for c in candidates:
            entry = {k: v for k, v in c.items() if k not in ("public", "priority")}
            if not c["public"]:
                provider = c["provider"]["systemName"]
                try:
                    entry["authorizationToken"] = self.tokens(
                        consumer_name, consumer.common_name, provider, c["providerCommonName"], service_definition
                    )
                except errors.ForbiddenCaller:
                    raise
                except errors.Unauthorized:
                    continue
            results.append(entry)
        if not results:
            raise errors.Unauthorized(f"no authorization rule permits {consumer_name!r} to use {service_definition!r}")
        return results

    # -- HTTP -----------------------------------------------------------------

    def routes(self) -> Routes:
        def orchestration(req: Request):
            caller = self.ctx.authenticate(req)
            body = req.json_object()
            service = require_str(body, "requestedService", 63)
            claimed = body.get("consumerSystem")
            if claimed is not None:
                name = claimed.get("systemName") if isinstance(claimed, dict) else claimed
                if self.ctx.gating and name != naming.split_common_name(caller.common_name)[0]:
                    raise errors.OwnershipMismatch("consumerSystem does not match the presented certificate")
            flags = body.get("flags") or {}
            if not isinstance(flags, dict) or not isinstance(flags.get("dynamic", False), bool):
                raise errors.MalformedRequest("flags.dynamic must be a boolean")
            return {"response": self.orchestrate(caller, service, flags.get("dynamic", False))}

        def store(req: Request):
            caller = self.ctx.authenticate(req)
            self.ctx.require_core(caller, SYSOP)
            body = req.json_object()
            for item in body.get("add", []):
                self.add_rule(OrchestrationRule.from_wire(item))
            for item in body.get("remove", []):
                self.remove_rule(OrchestrationRule.from_wire(item))
            return {"rules": [r.to_wire() for r in self.rules]}

        return {
            ("POST", "/orchestrator/orchestration"): orchestration,
            ("POST", "/orchestrator/store"): store,
            ("GET", "/health"): health_route(ORCHESTRATOR),
        }
