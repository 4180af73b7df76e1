import datetime as dt

import pytest
from cryptography.hazmat.primitives import serialization

from localcloud import errors
from localcloud.agent import SecureElement
from localcloud.agent.secure_element import MANUFACTURER_SLOT
from localcloud.context import CA, CONTROLLER, DEVICE_REGISTRY, ORCHESTRATOR, SERVICE_REGISTRY, SYSTEM_REGISTRY
from localcloud.messages import OnboardingResponse
from localcloud.onboarding import (
    ArrowheadCert,
    ManufacturerCert,
    SharedSecret,
    SharedSecretStore,
    basic_auth_header,
    parse_basic_auth,
)
from localcloud.pki import (
    CertificateAuthority,
    CertificateKind,
    TrustStore,
    _build,
    build_csr,
    create_root,
    generate_keypair,
    pem_chain,
    public_key_der,
    utcnow,
    verify_chain,
)
from localcloud.transport import HttpsClient, client_context


def _url(cloud, path):
    return cloud.controller_url + "/onboarding/" + path


def _manufactured(cloud, tmp_path, serial="serial-1"):
    se = SecureElement(tmp_path / serial)
    cloud.manufacturer.provision(se, serial)
    return HttpsClient(se.client_context(MANUFACTURER_SLOT, cloud.trust_pem), identity=se.certificate(MANUFACTURER_SLOT))


def _anonymous(cloud, **kw):
    return HttpsClient(client_context(cloud.trust_pem), **kw)


def _post(cloud, client, path, body, **kw):
    return client.post(_url(cloud, path), body, expect_peer=cloud.core_cn(CONTROLLER), **kw)


def _csr(cn):
    return build_csr(cn, generate_keypair()).encode()


def _check_response(cloud, body, cn):
    response = OnboardingResponse.from_wire(body)
    cert = response.grant.certificate
    assert cert.kind is CertificateKind.ONBOARDING
    assert cert.subject_common_name == cn
    assert verify_chain(cert, response.grant.intermediate_chain, TrustStore([cloud.pki.root])).kind is CertificateKind.ONBOARDING
    assert set(response.endpoints) == {"deviceRegistry", "systemRegistry", "serviceRegistry", "orchestrator"}
    for key, system in (
        ("deviceRegistry", DEVICE_REGISTRY),
        ("systemRegistry", SYSTEM_REGISTRY),
        ("serviceRegistry", SERVICE_REGISTRY),
        ("orchestrator", ORCHESTRATOR),
    ):
        assert response.endpoints[key].startswith(cloud.endpoints[system])
    return response


def test_manufacturer_certificate_gets_onboarding_certificate(cloud, tmp_path):
    body = _post(cloud, _manufactured(cloud, tmp_path), "certificate/csr", {"certificateSigningRequest": _csr("mdev.testcloud")})
    response = _check_response(cloud, body, "mdev.testcloud")
    assert body["success"] is True
    assert response.grant.private_key is None and "privateKey" not in body


def test_shared_secret_csr_flow(cloud):
    cloud.set_shared_secret("ssdev.testcloud", "correct horse")
    client = _anonymous(cloud)
    body = _post(
        cloud, client, "sharedsecret/csr", {"certificateSigningRequest": _csr("ssdev.testcloud")},
        headers={"Authorization": basic_auth_header("correct horse")},
    )
    _check_response(cloud, body, "ssdev.testcloud")


def test_wrong_shared_secret_is_refused_without_reaching_the_ca(cloud):
    cloud.set_shared_secret("ssdev2.testcloud", "right")
    before = cloud.systems[CA].sign_calls
    with pytest.raises(errors.BadSecret):
        _post(
            cloud, _anonymous(cloud), "sharedsecret/csr", {"certificateSigningRequest": _csr("ssdev2.testcloud")},
            headers={"Authorization": basic_auth_header("wrong")},
        )
    with pytest.raises(errors.BadSecret):
        _post(cloud, _anonymous(cloud), "sharedsecret/csr", {"certificateSigningRequest": _csr("ssdev2.testcloud")})
    assert cloud.systems[CA].sign_calls == before


def test_secret_for_one_device_does_not_onboard_another(cloud):
    cloud.set_shared_secret("alice.testcloud", "alice-secret")
    with pytest.raises(errors.BadSecret):
        _post(
            cloud, _anonymous(cloud), "sharedsecret/csr", {"certificateSigningRequest": _csr("mallory.testcloud")},
            headers={"Authorization": basic_auth_header("alice-secret")},
        )


def test_certificate_route_requires_a_certificate(cloud):
    with pytest.raises(errors.UntrustedCredential):
        _post(cloud, _anonymous(cloud), "certificate/csr", {"certificateSigningRequest": _csr("x.testcloud")})


def test_unknown_self_signed_certificate_is_rejected(cloud, tmp_path):
    keys = generate_keypair()
    now = utcnow()
    rogue = _build("rogue", keys.public, "rogue", keys.private, CertificateKind.MANUFACTURER, 7, now, now + dt.timedelta(days=1))
    client = HttpsClient(client_context(cloud.trust_pem, pem_chain([rogue]), keys.private_key_pem()), identity=rogue)
    # the TLS layer refuses the handshake outright
    with pytest.raises(errors.TransportRejected):
        _post(cloud, client, "certificate/csr", {"certificateSigningRequest": _csr("rogue.testcloud")})
    controller = cloud.systems[CONTROLLER]
    with pytest.raises(errors.UntrustedCredential):
        controller.authenticate(ManufacturerCert((rogue,)), "rogue.testcloud")


def test_foreign_and_expired_arrowhead_certificates(cloud):
    controller = cloud.systems[CONTROLLER]
    other_keys = generate_keypair()
    other_root = create_root("arrowhead-root", other_keys)
    foreign = CertificateAuthority(other_keys, other_root).issue("f.testcloud", generate_keypair(), CertificateKind.CLOUD_CA)
    with pytest.raises(errors.UntrustedCredential):
        controller.authenticate(ArrowheadCert((foreign,)), "f.testcloud")

    past = utcnow() - dt.timedelta(days=30)
    expired = _build(
        "old.testcloud", generate_keypair().public, "testcloud", cloud.pki.cloud_ca_keys.private,
        CertificateKind.DEVICE, 12345, past, past + dt.timedelta(days=1),
    )
    with pytest.raises(errors.UntrustedCredential):
        controller.authenticate(ArrowheadCert((expired,)), "old.testcloud")


def test_arrowhead_certificate_only_onboards_its_own_device(cloud):
    controller = cloud.systems[CONTROLLER]
    ca = cloud.pki.offline_authority()
    device = ca.issue("own.testcloud", generate_keypair(), CertificateKind.DEVICE)
    system = ca.issue("app.own.testcloud", generate_keypair(), CertificateKind.SYSTEM)
    for cert in (device, system):
        controller.authenticate(ArrowheadCert((cert,)), "own.testcloud")
        with pytest.raises(errors.UntrustedCredential):
            controller.authenticate(ArrowheadCert((cert,)), "other.testcloud")


def test_manufacturer_certificate_cannot_pose_as_arrowhead(cloud, tmp_path):
    se = SecureElement(tmp_path / "se")
    cert = cloud.manufacturer.provision(se, "serial-x")
    with pytest.raises(errors.UntrustedCredential):
        cloud.systems[CONTROLLER].authenticate(ArrowheadCert((cert,)), "x.testcloud")


def test_malformed_csr(cloud, tmp_path):
    client = _manufactured(cloud, tmp_path)
    with pytest.raises(errors.InvalidCsr):
        _post(cloud, client, "certificate/csr", {"certificateSigningRequest": "bm90IGEgY3Ny"})
    with pytest.raises(errors.MalformedRequest):
        _post(cloud, client, "certificate/csr", {"certificateSigningRequest": 42})
    with pytest.raises(errors.MalformedRequest):
        _post(cloud, client, "certificate/csr", {"certificateSigningRequest": _csr("Bad_Name")})


def test_name_flow_returns_a_private_key(cloud, tmp_path):
    body = _post(cloud, _manufactured(cloud, tmp_path), "certificate/name", {"commonName": "named.testcloud"})
    response = _check_response(cloud, body, "named.testcloud")
    assert body["privateKeyFormat"] == "PKCS#8"
    private = serialization.load_der_private_key(response.grant.private_key, None)
    assert public_key_der(private.public_key()) == response.grant.certificate.public_key


@pytest.mark.parametrize("name", ["", None, 17])
def test_name_flow_needs_a_name(cloud, tmp_path, name):
    with pytest.raises(errors.InvalidRequest):
        _post(cloud, _manufactured(cloud, tmp_path), "certificate/name", {"commonName": name})


def test_hardened_profile(make_cloud, tmp_path):
    cloud = make_cloud(profile="hardened")
    with pytest.raises(errors.NameFlowDisabled):
        _post(cloud, _manufactured(cloud, tmp_path), "certificate/name", {"commonName": "named.testcloud"})

    cloud.set_shared_secret("once.testcloud", "s3cret")
    auth = {"Authorization": basic_auth_header("s3cret")}
    _post(cloud, _anonymous(cloud), "sharedsecret/csr", {"certificateSigningRequest": _csr("once.testcloud")}, headers=auth)
    with pytest.raises(errors.BadSecret):
        _post(cloud, _anonymous(cloud), "sharedsecret/csr", {"certificateSigningRequest": _csr("once.testcloud")}, headers=auth)


def test_core_endpoints_are_cached(cloud, tmp_path):
    controller = cloud.systems[CONTROLLER]
    controller.invalidate_endpoints()
    before = controller.orchestrator_calls
    client = _manufactured(cloud, tmp_path)
    for i in range(3):
        _post(cloud, client, "certificate/csr", {"certificateSigningRequest": _csr(f"cached{i}.testcloud")})
    assert controller.orchestrator_calls == before + 1
    controller.invalidate_endpoints()
    _post(cloud, client, "certificate/csr", {"certificateSigningRequest": _csr("cached9.testcloud")})
    assert controller.orchestrator_calls == before + 2


def test_orchestrator_down_reports_failure(make_cloud, tmp_path):
    cloud = make_cloud()
    cloud.kill(ORCHESTRATOR)
    cloud.systems[CONTROLLER].invalidate_endpoints()
    seen = []
    client = _manufactured(cloud, tmp_path)
    client.recorder = seen.append
    with pytest.raises(errors.OrchestrationFailure):
        _post(cloud, client, "certificate/csr", {"certificateSigningRequest": _csr("lonely.testcloud")})
    assert b'"success": false' in seen[-1].response


def test_ca_down_reports_unavailable(make_cloud, tmp_path):
    cloud = make_cloud()
    cloud.kill(CA)
    with pytest.raises(errors.CaUnavailable):
        _post(cloud, _manufactured(cloud, tmp_path), "certificate/csr", {"certificateSigningRequest": _csr("nca.testcloud")})


def test_basic_auth_codec():
    assert parse_basic_auth(basic_auth_header("pa:ss")) == SharedSecret("pa:ss")
    assert "pa" not in repr(SharedSecret("pa:ss"))
    for bad in (None, "Bearer x", "Basic !!!", basic_auth_header("")):
        with pytest.raises(errors.BadSecret):
            parse_basic_auth(bad)


def test_secret_store_fallback_and_single_use():
    store = SharedSecretStore({"a.c": "one"}, fallback="any")
    store.check("a.c", SharedSecret("one"))
    store.check("b.c", SharedSecret("any"))
    with pytest.raises(errors.BadSecret):
        store.check("a.c", SharedSecret("any"))
    once = SharedSecretStore({"a.c": "one"}, single_use=True)
    once.check("a.c", SharedSecret("one"))
    with pytest.raises(errors.BadSecret):
        once.check("a.c", SharedSecret("one"))
    once.set("a.c", "two")
    once.check("a.c", SharedSecret("two"))
    with pytest.raises(errors.BadSecret):
        SharedSecretStore().check("a.c", SharedSecret("x"))
