"""Authorization system: intra-cloud access rules and ES256 session tokens.

Tokens are only released to the Orchestrator.  Providers validate them
offline with :func:`token_verify` against the key published at
``/authorization/publickey``.  Every issuance is appended to a signed,
hash-chained JSON-lines audit log.
"""

from __future__ import annotations

import base64
import datetime as dt
import hashlib
import json
import logging
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import jwt
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec

from . import errors, naming
from .context import AUTHORIZATION, ORCHESTRATOR, SYSOP, CloudContext, health_route
from .messages import require_str
from .pki import (
    KeyPair,
    VerifiedIdentity,
    b64,
    generate_keypair,
    load_keypair,
    save_keypair,
    unb64,
    verify_signature,
)
from .transport import Request, Routes

logger = logging.getLogger(__name__)

TOKEN_ALGORITHM = "ES256"
DEFAULT_TOKEN_TTL = 300.0
WILDCARD = "*"


@dataclass(frozen=True)
class AuthorizationRule:
    consumer_system: str
    provider_system: str
    service_definition: str

    def __post_init__(self) -> None:
        naming.check_label(self.consumer_system, "consumer system")
        naming.check_label(self.provider_system, "provider system")
        naming.check_label(self.service_definition, "service definition")

    @classmethod
    def from_wire(cls, body: Any) -> "AuthorizationRule":
        if not isinstance(body, dict):
            raise errors.MalformedRequest("authorization rule must be an object")
        return cls(
            require_str(body, "consumerSystem", 63),
            require_str(body, "providerSystem", 63),
            require_str(body, "serviceDefinition", 63),
        )

    def to_wire(self) -> dict[str, str]:
        return {
            "consumerSystem": self.consumer_system,
            "providerSystem": self.provider_system,
            "serviceDefinition": self.service_definition,
        }


@dataclass(frozen=True)
class InterCloudRule:
    """Parsed from config for completeness; no Gatekeeper exists to consult it."""

    consumer_cloud: str
    provider_system: str
    service_definition: str


@dataclass(frozen=True)
class TokenVerdict:
    accepted: bool
    reason: str
    claims: Optional[dict] = None

    def __bool__(self) -> bool:
        return self.accepted


def key_id(public_der: bytes) -> str:
    return hashlib.sha256(public_der).hexdigest()[:16]


def load_public_key(value: Union[str, bytes, ec.EllipticCurvePublicKey]):
    if isinstance(value, ec.EllipticCurvePublicKey):
        return value
    der = unb64(value, "public key") if isinstance(value, str) else value
    key = serialization.load_der_public_key(der)
    if not isinstance(key, ec.EllipticCurvePublicKey):
        raise errors.UnsupportedAlgorithm("authorization key must be an EC key")
    return key


def token_verify(
    token: str,
    provider_identity: str,
    service_definition: str,
    public_key: Union[str, bytes, ec.EllipticCurvePublicKey],
    now: Optional[dt.datetime] = None,
) -> TokenVerdict:
    """Accept iff the signature is valid, the token is live and it names this
    provider and service."""
    if not isinstance(token, str) or not token:
        return TokenVerdict(False, "missing-token")
    try:
        claims = jwt.decode(
            token,
            load_public_key(public_key),
            algorithms=[TOKEN_ALGORITHM],
            options={"verify_exp": False, "verify_iat": False, "verify_nbf": False},
        )
    except jwt.InvalidSignatureError:
        return TokenVerdict(False, "bad-signature")
    except (jwt.InvalidTokenError, errors.LocalCloudError, ValueError):
        return TokenVerdict(False, "malformed")
    when = (now or dt.datetime.now(dt.timezone.utc)).timestamp()
    exp, iat = claims.get("exp"), claims.get("iat")
    if not isinstance(exp, (int, float)) or not isinstance(iat, (int, float)) or exp <= iat:
        return TokenVerdict(False, "malformed", claims)
    if when >= exp:
        return TokenVerdict(False, "expired", claims)
    if claims.get("prv") != provider_identity:
        return TokenVerdict(False, "provider-mismatch", claims)
    if claims.get("svc") != service_definition:
        return TokenVerdict(False, "service-mismatch", claims)
    return TokenVerdict(True, "ok", claims)


class AuditLog:
    """Append-only JSON lines; each record is hash-chained and signed."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._lock = threading.Lock()
        self._prev = "0" * 64
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self.records.append(json.loads(line))
            if self.records:
                self._prev = self._digest(self.records[-1])

    @staticmethod
    def _canonical(record: dict) -> bytes:
        return json.dumps({k: v for k, v in record.items() if k != "sig"}, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def _digest(cls, record: dict) -> str:
        return hashlib.sha256(cls._canonical(record) + record.get("sig", "").encode()).hexdigest()

    def append(self, keys: KeyPair, event: str, **fields: Any) -> dict:
        with self._lock:
            record = {
                "seq": len(self.records),
                "at": dt.datetime.now(dt.timezone.utc).isoformat(),
                "event": event,
                "kid": key_id(keys.public_key_bytes),
                "prev": self._prev,
                **fields,
            }
            record["sig"] = b64(keys.sign(self._canonical(record)))
            self.records.append(record)
            self._prev = self._digest(record)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            return record

    @classmethod
    def verify_records(cls, records: Iterable[dict], public_keys: dict[str, bytes]) -> list[int]:
        """Sequence numbers of records whose signature or chain link is broken."""
        bad, prev = [], "0" * 64
        for record in records:
            der = public_keys.get(record.get("kid", ""))
            ok = der is not None and record.get("prev") == prev
            if ok:
                try:
                    ok = verify_signature(
                        serialization.load_der_public_key(der), unb64(record["sig"], "sig"), cls._canonical(record)
                    )
                except (errors.LocalCloudError, KeyError, ValueError):
                    ok = False
            if not ok:
                bad.append(record.get("seq", -1))
            prev = cls._digest(record)
        return bad


class AuthorizationSystem:
    def __init__(
        self,
        ctx: CloudContext,
        rules: Iterable[AuthorizationRule] = (),
        *,
        data_dir: Optional[Path] = None,
        token_ttl: float = DEFAULT_TOKEN_TTL,
        intercloud_rules: Iterable[InterCloudRule] = (),
    ):
        self.ctx = ctx
        self.token_ttl = token_ttl
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.intercloud_rules = tuple(intercloud_rules)
        self._rules: set[AuthorizationRule] = set(rules)
        self._rules_lock = threading.RLock()
        self._sign_lock = threading.Lock()
        self._keys = self._load_or_create_key()
        self.known_keys: dict[str, bytes] = self._load_known_keys()
        self._remember_key()
        self.audit = AuditLog(self.data_dir / "audit.jsonl" if self.data_dir else None)
        self.tokens_issued = 0

    def _load_or_create_key(self) -> KeyPair:
        path = self.data_dir / "token-key.pem" if self.data_dir else None
        if path is not None and path.exists():
            return load_keypair(path)
        keys = generate_keypair("ec-p256")
        if path is not None:
            save_keypair(path, keys)
        return keys

    def _load_known_keys(self) -> dict[str, bytes]:
        path = self.data_dir / "known-keys.json" if self.data_dir else None
        if path is None or not path.exists():
            return {}
        return {k: unb64(v) for k, v in json.loads(path.read_text()).items()}

    def _remember_key(self) -> None:
        self.known_keys[self.key_id] = self._keys.public_key_bytes
        if self.data_dir is not None:
            (self.data_dir / "known-keys.json").write_text(json.dumps({k: b64(v) for k, v in self.known_keys.items()}))

    # -- rules --------------------------------------------------------------

    @property
    def rules(self) -> frozenset[AuthorizationRule]:
        with self._rules_lock:
            return frozenset(self._rules)

    def add_rule(self, rule: AuthorizationRule) -> None:
        with self._rules_lock:
            self._rules.add(rule)

    def remove_rule(self, rule: AuthorizationRule) -> None:
        with self._rules_lock:
            self._rules.discard(rule)

    def clear_rules(self) -> None:
        with self._rules_lock:
            self._rules.clear()

    def is_permitted(self, consumer: str, provider: str, service_definition: str) -> bool:
        with self._rules_lock:
            return AuthorizationRule(consumer, provider, service_definition) in self._rules

    # -- keys and tokens ----------------------------------------------------

    @property
    def key_id(self) -> str:
        return key_id(self._keys.public_key_bytes)

    def get_public_key(self) -> str:
        return b64(self._keys.public_key_bytes)

    def rotate(self) -> str:
        """Start a new key epoch; tokens signed before this no longer verify."""
        with self._sign_lock:
            self._keys = generate_keypair("ec-p256")
            if self.data_dir is not None:
                save_keypair(self.data_dir / "token-key.pem", self._keys)
            self._remember_key()
            self.audit.append(self._keys, "key-rotated")
        logger.info("authorization key rotated to %s", self.key_id)
        return self.get_public_key()

    def generate_token(
        self,
        caller: VerifiedIdentity,
        consumer: str,
        provider: str,
        service_definition: str,
        *,
        consumer_cn: str = "",
        provider_cn: str = "",
        ttl: Optional[float] = None,
    ) -> str:
        self.ctx.require_core(caller, ORCHESTRATOR)
        if not self.is_permitted(consumer, provider, service_definition):
            raise errors.Unauthorized(f"no rule lets {consumer!r} use {service_definition!r} on {provider!r}")
        now = self.ctx.clock()
        ttl = self.token_ttl if ttl is None else ttl
        if ttl <= 0:
            raise errors.InvalidRequest("token lifetime must be positive")
        claims = {
            "iss": self.ctx.common_name(AUTHORIZATION),
            "sub": consumer,
            "cns": consumer_cn,
            "prv": provider,
            "pcn": provider_cn,
            "svc": service_definition,
            "iat": now.timestamp(),
            "exp": now.timestamp() + ttl,
            "jti": uuid.uuid4().hex,
        }
        with self._sign_lock:
            token = jwt.encode(claims, self._keys.private, algorithm=TOKEN_ALGORITHM, headers={"kid": self.key_id})
            self.audit.append(
                self._keys,
                "token-issued",
                consumer=consumer,
                provider=provider,
                service=service_definition,
                jti=claims["jti"],
                token_sha256=hashlib.sha256(token.encode()).hexdigest(),
            )
            self.tokens_issued += 1
        return token

    # -- HTTP ---------------------------------------------------------------

    def routes(self) -> Routes:
        def publickey(req: Request):
            return {"publicKey": self.get_public_key(), "algorithm": TOKEN_ALGORITHM, "keyId": self.key_id}

        def token(req: Request):
            caller = self.ctx.authenticate(req)
            self.ctx.require_core(caller, ORCHESTRATOR)
            body = req.json_object()
            ttl = body.get("ttl")
            if ttl is not None and (isinstance(ttl, bool) or not isinstance(ttl, (int, float))):
                raise errors.MalformedRequest("ttl must be a number")
            value = self.generate_token(
                caller,
                require_str(body, "consumer", 63),
                require_str(body, "provider", 63),
                require_str(body, "serviceDefinition", 63),
                consumer_cn=str(body.get("consumerCommonName", ""))[:64],
                provider_cn=str(body.get("providerCommonName", ""))[:64],
                ttl=ttl,
            )
            return {"token": value}

        def rules(req: Request):
            caller = self.ctx.authenticate(req)
            self.ctx.require_core(caller, SYSOP)
            body = req.json_object()
            for item in body.get("add", []):
                self.add_rule(AuthorizationRule.from_wire(item))
            for item in body.get("remove", []):
                self.remove_rule(AuthorizationRule.from_wire(item))
            return {"rules": [r.to_wire() for r in sorted(self.rules, key=lambda r: (r.consumer_system, r.provider_system, r.service_definition))]}

        def rotate(req: Request):
            caller = self.ctx.authenticate(req)
            self.ctx.require_core(caller, SYSOP)
            return {"publicKey": self.rotate(), "keyId": self.key_id}

        def audit(req: Request):
            caller = self.ctx.authenticate(req)
            self.ctx.require_core(caller, SYSOP)
            return {"records": list(self.audit.records), "keys": {k: b64(v) for k, v in self.known_keys.items()}}

        return {
            ("GET", "/authorization/publickey"): publickey,
            ("POST", "/authorization/token"): token,
            ("POST", "/authorization/rules"): rules,
            ("POST", "/authorization/rotate"): rotate,
            ("GET", "/authorization/audit"): audit,
            ("GET", "/health"): health_route(AUTHORIZATION),
        }


def decode_unverified(token: str) -> dict:
    """Claims without signature checking, for diagnostics only."""
    try:
        payload = token.split(".")[1]
        return json.loads(base64.urlsafe_b64decode(payload + "=" * (-len(payload) % 4)))
    except (IndexError, ValueError):
        raise errors.MalformedRequest("not a compact token") from None
