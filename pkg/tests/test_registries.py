import datetime as dt
import itertools
import json
import uuid

import pytest
from hypothesis import given, settings, strategies as st

from helpers import mac_for
from localcloud import errors
from localcloud.context import DEVICE_REGISTRY, SERVICE_REGISTRY, SYSTEM_REGISTRY
from localcloud.messages import CertificateGrant, format_time
from localcloud.pki import (
    CertificateKind as K,
    VerifiedIdentity,
    build_csr,
    generate_keypair,
    utcnow,
)
from localcloud.registries import store
from localcloud.registries.device import SCHEMA as DEVICE_SCHEMA
from localcloud.registries.store import QueryForm, Repository

CLOUD = "testcloud"


def _name(prefix="d"):
    return f"{prefix}{uuid.uuid4().hex[:10]}"


def _who(cn, kind, cert=None):
    return VerifiedIdentity(cn, kind, cert)


class Chain:
    """Drive the three registries directly with synthetic, already-verified callers."""

    def __init__(self, cloud):
        self.cloud = cloud
        self.devices = cloud.systems[DEVICE_REGISTRY]
        self.systems = cloud.systems[SYSTEM_REGISTRY]
        self.services = cloud.systems[SERVICE_REGISTRY]

    def device(self, name=None, **extra):
        name = name or _name()
        cn = f"{name}.{CLOUD}"
        csr = build_csr(cn, generate_keypair()).encode()
        body = {"deviceName": name, "macAddress": mac_for(name), "certificateSigningRequest": csr, **extra}
        out = self.devices.device_onboard(body, _who(cn, K.ONBOARDING))
        return name, out

    def system(self, device, name=None, port=None, **extra):
        name = name or _name("s")
        port = port or 20000 + int(uuid.uuid4().int % 20000)
        body = {
            "systemName": name,
            "address": "127.0.0.1",
            "port": port,
            "provider": {"deviceName": device, "macAddress": mac_for(device)},
            **extra,
        }
        out = self.systems.system_onboard(body, _who(f"{device}.{CLOUD}", K.DEVICE))
        return name, port, out

    def service(self, device, system, port, definition=None, **extra):
        definition = definition or _name("v")
        body = {
            "serviceDefinition": definition,
            "providerSystem": {"systemName": system, "address": "127.0.0.1", "port": port},
            "serviceUri": f"/{system}/{definition}",
            **extra,
        }
        out = self.services.service_register(body, _who(f"{system}.{device}.{CLOUD}", K.SYSTEM))
        return definition, out

    def tree(self):
        device, _ = self.device()
        system, port, _ = self.system(device)
        definition, _ = self.service(device, system, port)
        return device, system, port, definition


@pytest.fixture
def chain(cloud):
    return Chain(cloud)


def test_device_onboarding_issues_a_device_certificate(chain):
    name, out = chain.device(metadata={"room": "garage"})
    signed = CertificateGrant.from_wire(out, "deviceCertificate")
    assert signed.certificate.kind is K.DEVICE
    assert signed.certificate.subject_common_name == f"{name}.{CLOUD}"
    assert out["deviceEntry"]["metadata"] == {"room": "garage"}
    assert out["deviceEntry"]["macAddress"] == mac_for(name)
    assert "privateKey" not in out


def test_device_name_flow_returns_key(chain):
    name = _name()
    out = chain.devices.device_onboard(
        {"deviceName": name, "macAddress": mac_for(name)}, _who(f"{name}.{CLOUD}", K.ONBOARDING)
    )
    assert out["privateKeyFormat"] == "PKCS#8"


def test_system_onboarding_issues_a_system_certificate(chain):
    device, _ = chain.device()
    system, port, out = chain.system(device)
    assert out["systemEntry"]["commonName"] == f"{system}.{device}.{CLOUD}"
    assert out["systemEntry"]["endpoint"] == f"https://127.0.0.1:{port}"
    signed = CertificateGrant.from_wire(out, "systemCertificate")
    assert signed.certificate.kind is K.SYSTEM


def test_service_registration_and_query(chain):
    device, system, port, definition = chain.tree()
    rows = chain.services.query(QueryForm(definition))
    assert len(rows) == 1
    assert rows[0]["endpoint"] == f"https://127.0.0.1:{port}/{system}/{definition}"
    assert rows[0]["providerCommonName"] == f"{system}.{device}.{CLOUD}"
    assert rows[0]["interfaces"] == ["HTTPS-SECURE-JSON"]


def test_duplicates_are_conflicts(chain):
    device, system, port, definition = chain.tree()
    with pytest.raises(errors.DuplicateDevice):
        chain.device(device)
    with pytest.raises(errors.DuplicateSystem):
        chain.system(device, system, port)
    with pytest.raises(errors.DuplicateService):
        chain.service(device, system, port, definition)


def test_reserved_core_device_name(chain):
    with pytest.raises(errors.InvalidRequest):
        chain.device("core")


def test_children_need_registered_parents(chain):
    ghost = _name()
    with pytest.raises(errors.UnknownProviderDevice):
        chain.system(ghost)
    device, _ = chain.device()
    with pytest.raises(errors.UnknownProviderSystem):
        chain.service(device, "nosuch", 1234)


def test_csr_must_carry_the_expected_name(chain):
    name = _name()
    csr = build_csr(f"other.{CLOUD}", generate_keypair()).encode()
    with pytest.raises(errors.InvalidRequest):
        chain.devices.device_onboard(
            {"deviceName": name, "macAddress": mac_for(name), "certificateSigningRequest": csr},
            _who(f"{name}.{CLOUD}", K.ONBOARDING),
        )


@pytest.mark.parametrize(
    "extra,error",
    [
        ({"endOfValidity": "2001-01-01T00:00:00Z"}, errors.InvalidRequest),
        ({"endOfValidity": "soon"}, errors.MalformedRequest),
        ({"metadata": {"bad key": "v"}}, errors.MalformedRequest),
        ({"metadata": {"k": 5}}, errors.MalformedRequest),
        ({"address": "evil host; rm"}, errors.MalformedRequest),
        ({"macAddress": "zz"}, errors.MalformedRequest),
    ],
)
def test_device_input_validation(chain, extra, error):
    with pytest.raises(error):
        chain.device(**extra)


@pytest.mark.parametrize("uri", ["relative", "/../../etc/passwd", "/a/./b", "/a b", "/" + "x" * 300])
def test_service_uri_validation(chain, uri):
    device, _ = chain.device()
    system, port, _ = chain.system(device)
    with pytest.raises(errors.MalformedRequest):
        chain.service(device, system, port, serviceUri=uri)


def test_service_interfaces_validation(chain):
    device, _ = chain.device()
    system, port, _ = chain.system(device)
    for bad in ([], ["a b"], "HTTPS", [1], ["x"] * 9):
        with pytest.raises(errors.MalformedRequest):
            chain.service(device, system, port, interfaces=bad)


# -- certificate gating -----------------------------------------------------------


def _gated_calls(chain, device, system, port, definition):
    """Each registry function with its required kind and the owner common name it checks."""
    dev_cn, sys_cn = f"{device}.{CLOUD}", f"{system}.{device}.{CLOUD}"
    fresh = _name()
    return {
        "device-onboard": (
            K.ONBOARDING,
            f"{fresh}.{CLOUD}",
            lambda who: chain.devices.device_onboard({"deviceName": fresh, "macAddress": mac_for(fresh)}, who),
        ),
        "device-register": (
            K.DEVICE,
            dev_cn,
            lambda who: chain.devices.device_register({"deviceName": device, "macAddress": mac_for(device)}, who),
        ),
        "device-unregister": (
            K.DEVICE,
            dev_cn,
            lambda who: chain.devices.device_unregister(device, mac_for(device), who),
        ),
        "system-onboard": (
            K.DEVICE,
            dev_cn,
            lambda who: chain.systems.system_onboard(
                {"systemName": _name("s"), "address": "127.0.0.1", "port": 1,
                 "provider": {"deviceName": device, "macAddress": mac_for(device)}},
                who,
            ),
        ),
        "system-register": (
            K.SYSTEM,
            sys_cn,
            lambda who: chain.systems.system_register(
                {"systemName": system, "address": "127.0.0.1", "port": port,
                 "provider": {"deviceName": device, "macAddress": mac_for(device)}},
                who,
            ),
        ),
        "system-unregister": (K.SYSTEM, sys_cn, lambda who: chain.systems.system_unregister(system, "127.0.0.1", port, who)),
        "service-register": (
            K.SYSTEM,
            sys_cn,
            lambda who: chain.services.service_register(
                {"serviceDefinition": _name("v"), "serviceUri": "/x",
                 "providerSystem": {"systemName": system, "address": "127.0.0.1", "port": port}},
                who,
            ),
        ),
        "service-unregister": (
            K.SYSTEM,
            sys_cn,
            lambda who: chain.services.service_unregister("127.0.0.1", port, definition, system, who),
        ),
    }


def test_gating_matrix(chain):
    """Every registry function refuses every certificate kind but its own, and foreign owners."""
    device, system, port, definition = chain.tree()
    outcomes = {}
    for label, (kind, owner, call) in _gated_calls(chain, device, system, port, definition).items():
        for presented in (K.ONBOARDING, K.DEVICE, K.SYSTEM):
            try:
                call(_who(owner, presented))
                outcome = "ok"
            except errors.WrongCertificateKind:
                outcome = "wrong-kind"
            except errors.LocalCloudError:
                outcome = "passed-gate"
            outcomes[label, presented.value] = outcome
            assert (outcome == "wrong-kind") == (presented is not kind), outcomes


def test_ownership_is_enforced(chain):
    device, system, port, definition = chain.tree()
    for label, (kind, owner, call) in _gated_calls(chain, device, system, port, definition).items():
        with pytest.raises(errors.OwnershipMismatch):
            call(_who("intruder.other.testcloud", kind))


def test_gating_off_lets_wrong_kinds_through(make_cloud):
    chain = Chain(make_cloud(gating=False))
    device, system, port, definition = chain.tree()
    for label, (kind, owner, call) in _gated_calls(chain, device, system, port, definition).items():
        wrong = K.SYSTEM if kind is not K.SYSTEM else K.ONBOARDING
        try:
            call(_who(owner, wrong))
        except (errors.WrongCertificateKind, errors.OwnershipMismatch) as exc:
            pytest.fail(f"{label}: gate still active ({exc.code})")
        except errors.LocalCloudError:
            pass


# -- removal ------------------------------------------------------------------------


def test_unregister_cascades_down_the_hierarchy(chain):
    device, system, port, definition = chain.tree()
    chain.service(device, system, port)
    chain.devices.device_unregister(device, mac_for(device), _who(f"{device}.{CLOUD}", K.DEVICE))
    assert chain.devices.repo.find(device_name=device) == []
    assert chain.systems.repo.find(device_name=device) == []
    assert chain.services.repo.find(system_name=system) == []


def test_system_unregister_removes_its_services_only(chain):
    device, system, port, definition = chain.tree()
    other, other_port, _ = chain.system(device)
    other_def, _ = chain.service(device, other, other_port)
    chain.systems.system_unregister(system, "127.0.0.1", port, _who(f"{system}.{device}.{CLOUD}", K.SYSTEM))
    assert chain.services.repo.find(system_name=system) == []
    assert len(chain.services.repo.find(service_definition=other_def)) == 1


def test_unregister_twice_is_not_found(chain):
    device, system, port, definition = chain.tree()
    who = _who(f"{system}.{device}.{CLOUD}", K.SYSTEM)
    chain.services.service_unregister("127.0.0.1", port, definition, system, who)
    with pytest.raises(errors.NotFound):
        chain.services.service_unregister("127.0.0.1", port, definition, system, who)


def test_expiry_sweep_cascades(chain):
    device, _ = chain.device(endOfValidity=format_time(utcnow() + dt.timedelta(seconds=30)))
    system, port, _ = chain.system(device)
    definition, _ = chain.service(device, system, port)
    assert chain.devices.query(QueryForm(device))
    later = utcnow() + dt.timedelta(minutes=5)
    assert chain.devices.expire_entries(later) >= 1
    assert chain.systems.repo.find(device_name=device) == []
    assert chain.services.repo.find(service_definition=definition) == []


def test_storage_is_separate_per_registry(chain, cloud):
    device, system, port, definition = chain.tree()
    device_dump = chain.devices.repo.raw_dump()
    system_dump = chain.systems.repo.raw_dump()
    service_dump = chain.services.repo.raw_dump()
    assert device.encode() in device_dump
    assert system.encode() not in device_dump and definition.encode() not in device_dump
    assert definition.encode() not in system_dump
    assert definition.encode() in service_dump
    files = {p.name for p in (cloud.config.data_dir / "registries").glob("*.db")}
    assert files == {"devices.db", "systems.db", "services.db"}


# -- query engine against a brute-force reference -----------------------------------

NAMES = ["alpha", "alpine", "beta", "al", "a", "gamma-1", "gamma-2"]
META_KEYS = ["room", "floor", "x.y"]
META_VALUES = ["1", "2", "garage", "it's", 'q"uote']


def _reference(rows, pattern, meta, valid_only, now):
    """Independent reading of the query semantics."""
    out = []
    for r in rows:
        name = r["device_name"]
        if pattern is not None:
            if pattern.endswith("*") and not name.startswith(pattern[:-1]):
                continue
            if not pattern.endswith("*") and name != pattern:
                continue
        stored = json.loads(r["metadata"])
        if not all(k in stored and stored[k] == v for k, v in meta.items()):
            continue
        if valid_only and not r["eov_epoch"] > now:
            continue
        out.append(r["device_name"])
    return out


@pytest.fixture(scope="module")
def populated():
    repo = Repository(None, "devices", DEVICE_SCHEMA, "device_name")
    now = 1_000_000.0
    for i, (name, suffix) in enumerate(itertools.product(NAMES, range(6))):
        meta = {k: META_VALUES[(i * (j + 3)) % len(META_VALUES)] for j, k in enumerate(META_KEYS) if (i + j) % 3}
        repo.insert(
            {"device_name": f"{name}{suffix}" if suffix else name, "mac_address": f"{i:012x}", "address": None,
             "public_key": b"k", "end_of_validity": "-", "eov_epoch": now + (i % 5 - 2) * 10.0,
             "metadata": store.dumps_meta(meta)}
        )
    return repo, now


patterns = st.one_of(st.none(), st.sampled_from(NAMES), st.sampled_from(NAMES).map(lambda n: n[: len(n) // 2] + "*"), st.just("*"))
metas = st.dictionaries(st.sampled_from(META_KEYS), st.sampled_from(META_VALUES), max_size=2)


@settings(max_examples=300, deadline=None)
@given(patterns, metas, st.booleans())
def test_query_matches_reference(populated, pattern, meta, valid_only):
    repo, now = populated
    form = QueryForm(pattern, meta, valid_only)
    got = [r["device_name"] for r in repo.query(form, now)]
    assert got == _reference(repo.all(), pattern, meta, valid_only, now)


@pytest.mark.parametrize(
    "body",
    [
        {"namePattern": "a%"},
        {"namePattern": "x' OR '1'='1"},
        {"namePattern": "*a"},
        {"namePattern": ""},
        {"validOnly": "yes"},
        {"metadata": {"k": 1}},
        {"extra": 1},
        [],
    ],
)
def test_malformed_query_forms(body):
    with pytest.raises(errors.MalformedQuery):
        QueryForm.from_wire(body)


def test_query_over_https(cloud, chain):
    device, system, port, definition = chain.tree()
    body = cloud.sysop().post(
        cloud.endpoints[SERVICE_REGISTRY] + "/service-registry/query",
        {"namePattern": definition},
        expect_peer=cloud.core_cn(SERVICE_REGISTRY),
    )
    assert body["count"] == 1 and body["entries"][0]["serviceDefinition"] == definition
