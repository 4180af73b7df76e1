from __future__ import annotations

import datetime as dt
import logging
import re
from typing import Any, Callable, Optional

from .. import errors, naming
from ..context import CA, CloudContext
from ..messages import CertificateGrant, format_time, parse_time
from ..pki import (
    DEFAULT_VALIDITY,
    CertificateKind,
    CertificateSigningRequest,
    CertificateSigningResponse,
    KeyPair,
    VerifiedIdentity,
    build_csr,
    generate_keypair,
)
from ..transport import Request
from .store import QueryForm, Repository

logger = logging.getLogger(__name__)

_HOST = re.compile(r"^[A-Za-z0-9.:-]{1,253}$")
_URI = re.compile(r"^/[A-Za-z0-9._~/-]{0,255}$")


def check_address(value: Any, field: str = "address") -> str:
    if not isinstance(value, str) or not _HOST.match(value):
        raise errors.MalformedRequest(f"{field} must be a host name or IP address")
    return value


def check_uri(value: Any) -> str:
    if not isinstance(value, str) or not _URI.match(value):
        raise errors.MalformedRequest("serviceUri must be an absolute path")
    if any(part in (".", "..") for part in value.split("/")):
        raise errors.MalformedRequest("serviceUri must not contain dot segments")
    return value


def epoch(t: dt.datetime) -> float:
    return t.timestamp()


class RegistryBase:
    """Shared plumbing: validity handling, CA calls and the query endpoint."""

    system_name: str

    def __init__(self, ctx: CloudContext, repo: Repository, key_algorithm: str = "ec-p256"):
        self.ctx = ctx
        self.repo = repo
        self.key_algorithm = key_algorithm
        self.ca_calls = 0

    # -- helpers ------------------------------------------------------------

    def now(self) -> dt.datetime:
        return self.ctx.clock()

    def end_of_validity(self, value: Any) -> dt.datetime:
        if value is None:
            return self.now() + DEFAULT_VALIDITY
        end = parse_time(value, "endOfValidity")
        if end <= self.now():
            raise errors.InvalidRequest("endOfValidity must be in the future")
        return end

    def csr_from_request(self, body: dict, expected_cn: str) -> tuple[str, Optional[KeyPair]]:
        """CSR flow: validate the supplied CSR.  Name flow: make one here."""
        encoded = body.get("certificateSigningRequest")
        if encoded is None:
            cn = body.get("commonName", expected_cn)
            if cn != expected_cn:
                raise errors.InvalidRequest(f"commonName must be {expected_cn!r}")
            keys = generate_keypair(self.key_algorithm)
            return build_csr(expected_cn, keys).encode(), keys
        if not isinstance(encoded, str) or len(encoded) > 16384:
            raise errors.InvalidCsr("certificateSigningRequest must be a Base64 string")
        csr = CertificateSigningRequest.decode(encoded)
        if csr.subject_common_name != expected_cn:
            raise errors.InvalidRequest(f"CSR subject must be {expected_cn!r}")
        return encoded, None

    def request_certificate(self, encoded_csr: str, kind: CertificateKind) -> CertificateSigningResponse:
        self.ca_calls += 1
        try:
            body = self.ctx.client().post(
                self.ctx.url(CA) + "/certificate-authority/getSignedCertificate",
                {"encodedCsr": encoded_csr, "kind": kind.value},
                expect_peer=self.ctx.common_name(CA),
            )
        except (errors.ServiceUnavailable, errors.TransportRejected) as exc:
            raise errors.CaUnavailable(f"certificate authority unavailable ({exc.code})") from None
        return CertificateSigningResponse.from_wire(body)

    def grant_wire(self, signed: CertificateSigningResponse, keys: Optional[KeyPair], cert_key: str) -> dict:
        return CertificateGrant.from_signing(signed, keys).to_wire(cert_key)

    # -- query ----------------------------------------------------------------

    def entry_to_wire(self, row: dict) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError

    def query(self, form: QueryForm, caller: Optional[VerifiedIdentity] = None) -> list[dict]:
        rows = self.repo.query(form, epoch(self.now()))
        return [self.entry_to_wire(r) for r in rows]

    def http_query(self, req: Request):
        self.ctx.authenticate(req)
        form = QueryForm.from_wire(req.json() if req.body else {})
        entries = self.query(form)
        return {"entries": entries, "count": len(entries)}

    def expire_entries(self, now: Optional[dt.datetime] = None) -> int:
        removed = self.repo.delete_expired(epoch(now or self.now()))
        if removed:
            logger.info("%s: expired %d entries", self.system_name, len(removed))
            self.cascade_removed(removed)
        return len(removed)

    def cascade_removed(self, rows: list[dict]) -> None:
        """Remove children of deleted rows in the next registry down."""

    def count(self) -> int:
        return self.repo.count()


def row_times(end: dt.datetime) -> dict[str, Any]:
    return {"end_of_validity": format_time(end), "eov_epoch": epoch(end)}


def cascade_call(ctx: CloudContext, target: str, body: dict) -> None:
    try:
        ctx.client().post(ctx.url(target) + f"/{target}/cascade", body, expect_peer=ctx.common_name(target))
    except errors.LocalCloudError as exc:
        logger.warning("cascade to %s failed: %s", target, exc.code)


def lookup(ctx: CloudContext, target: str, name: str, predicate: Callable[[dict], bool]) -> Optional[dict]:
    """Read the parent registry for an entry called ``name`` satisfying ``predicate``."""
    naming.check_label(name)
    body = ctx.client().post(
        ctx.url(target) + f"/{target}/query",
        {"namePattern": name, "validOnly": True},
        expect_peer=ctx.common_name(target),
    )
    return next((e for e in body.get("entries", []) if predicate(e)), None)
