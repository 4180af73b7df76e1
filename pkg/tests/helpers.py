"""Small builders shared by the test modules."""

from __future__ import annotations

import hashlib

from localcloud.agent import HostedManifest, HostedSystem, ProvidedService


def mac_for(name: str) -> str:
    digest = hashlib.sha256(name.encode()).digest()
    return ":".join(f"{b:02x}" for b in (b"\x02" + digest[:5]))


def manifest(device: str, systems: dict[str, list[str]] | None = None) -> HostedManifest:
    """``systems`` maps system name to the service definitions it provides."""
    systems = systems or {f"{device}-sys": [f"{device}-svc"]}
    return HostedManifest(
        device,
        mac_for(device),
        tuple(
            HostedSystem(name, provides=tuple(ProvidedService(d, f"/{name}/{d}") for d in defs))
            for name, defs in systems.items()
        ),
    )


def onboard(cloud, tmp_path, device: str, credential: str = "manufacturer", secret: str | None = None, **kw):
    """Onboard ``device`` with the default one-system manifest; returns the agent."""
    if credential == "shared-secret":
        secret = secret or f"secret-{device}"
        cloud.set_shared_secret(f"{device}.{cloud.config.cloud_name}", secret)
    agent = cloud.new_agent(device, tmp_path / device, credential=credential, **kw)
    agent.run_onboarding(manifest(device), credential, secret)
    return agent


def oracle_accepts(leaf, intermediates, anchors, now) -> bool:
    """Independent RFC 5280 path validation (cryptography's verifier)."""
    from cryptography.x509.verification import PolicyBuilder, Store, VerificationError

    verifier = PolicyBuilder().store(Store([a.x509 for a in anchors])).time(now).build_client_verifier()
    try:
        verifier.verify(leaf.x509, [c.x509 for c in intermediates])
    except VerificationError:
        return False
    return True


def openssl_csr_ok(csr_der: bytes, tmp_path) -> bool:
    """The openssl CLI's verdict on a PKCS#10 self-signature."""
    import subprocess

    path = tmp_path / "oracle.csr"
    path.write_bytes(csr_der)
    out = subprocess.run(
        ["openssl", "req", "-in", str(path), "-inform", "DER", "-verify", "-noout"],
        capture_output=True,
        text=True,
        check=False,
    )
    text = out.stdout + out.stderr
    return "verify OK" in text and "failure" not in text
