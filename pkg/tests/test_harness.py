import datetime as dt
import json
import math

import pytest

from localcloud import errors
from localcloud.agent import HostedManifest, HostedSystem, ProvidedService
from localcloud.cli import main
from localcloud.context import CA, DEVICE_REGISTRY
from localcloud.harness import (
    CloudConfig,
    LocalCloud,
    TimingBreakdown,
    compare,
    run_smart_charging,
    security_suite,
    simulated_manual,
    suite_passed,
)
from localcloud.harness.bootstrap import ensure_pki
from localcloud.harness.security import OUT_OF_SCOPE, ROWS


@pytest.mark.parametrize(
    "settings",
    [
        {"ports": {CA: 9100, DEVICE_REGISTRY: 9100}},
        {"ports": {"coffee-machine": 9000}},
        {"ports": {CA: 70000}},
        {"profile": "paranoid"},
        {"mode": "fibers"},
        {"verification_mode": "ocsp"},
        {"validity_days": 0},
        {"token_ttl": 0},
        {"cloud_name": "Bad_Cloud"},
    ],
)
def test_bad_config_is_rejected(tmp_path, settings):
    with pytest.raises(errors.BadConfig):
        CloudConfig(data_dir=tmp_path, **settings)


def test_config_file_round_trip_and_unknown_keys(tmp_path):
    config = CloudConfig(cloud_name="plant", data_dir="data", ports={CA: 9443})
    path = tmp_path / "cloud.json"
    config.save(path)
    loaded = CloudConfig.load(path)
    assert loaded.cloud_name == "plant" and loaded.ports == {CA: 9443}
    assert loaded.data_dir == (tmp_path / "data").resolve()

    path.write_text(json.dumps({"cloud_name": "plant", "colour": "blue"}))
    with pytest.raises(errors.BadConfig):
        CloudConfig.load(path)
    path.write_text("{not json")
    with pytest.raises(errors.BadConfig):
        CloudConfig.load(path)


def test_pki_survives_a_restart(tmp_path):
    first = ensure_pki(tmp_path, "testcloud")
    second = ensure_pki(tmp_path, "testcloud")
    assert first.root == second.root and first.cloud_ca == second.cloud_ca
    assert first.cloud_ca_keys.public_key_bytes == second.cloud_ca_keys.public_key_bytes
    assert first.identity(CA) == second.identity(CA)


def test_core_identities_are_renewed_near_expiry(tmp_path):
    pki = ensure_pki(tmp_path, "testcloud")
    before = pki.identity(CA)
    assert ensure_pki(tmp_path, "testcloud", now=pki.cloud_ca.not_before + dt.timedelta(days=300)).identity(CA) == before
    later = ensure_pki(tmp_path, "testcloud", now=pki.cloud_ca.not_before + dt.timedelta(days=364))
    assert later.identity(CA) != before
    assert later.root == pki.root


def test_cloud_keeps_root_across_down_and_up(tmp_path):
    config = CloudConfig(data_dir=tmp_path)
    with LocalCloud(config) as cloud:
        root = cloud.pki.root
    with LocalCloud(config) as cloud:
        assert cloud.pki.root == root
        assert all(cloud.health().values())


def test_timing_breakdown_arithmetic():
    timing = TimingBreakdown()
    assert timing.repetitions == 0 and timing.mean_total == 0.0
    assert timing.fractions == {"onboarding": 0.0, "operation": 0.0, "deregistration": 0.0}
    timing.add(10.0, 30.0, 10.0)
    timing.add(30.0, 10.0, 10.0)
    assert timing.mean("onboarding") == 20.0
    assert timing.spread("onboarding") == pytest.approx(math.sqrt(200))
    assert timing.total == 100.0 and timing.mean_total == 50.0
    assert timing.fractions == {"onboarding": 0.4, "operation": 0.4, "deregistration": 0.2}
    assert math.fsum(timing.fractions.values()) == pytest.approx(1.0)
    assert timing.to_dict()["phases"]["operation"]["samples"] == [30.0, 10.0]
    for bad in (-1.0, float("nan")):
        with pytest.raises(ValueError):
            timing.add(bad, 1.0, 1.0)


def test_simulated_manual_baseline_is_slower():
    automated = TimingBreakdown()
    automated.add(400.0, 1100.0, 50.0)
    automated.add(420.0, 1050.0, 60.0)
    manual = simulated_manual(automated, [40.0, 45.0], 205.0)
    assert manual.samples["onboarding"] == [205040.0, 205045.0]
    assert manual.samples["operation"] == automated.samples["operation"]
    result = compare(automated, manual)
    assert result["automatedFaster"] is True
    assert result["manualOverAutomated"] == pytest.approx(manual.mean_total / automated.mean_total)
    empty = compare(TimingBreakdown(), TimingBreakdown())
    assert empty["manualOverAutomated"] is None and empty["automatedFaster"] is False


def test_smart_charging_scenario_passes(make_cloud, tmp_path):
    cloud = make_cloud()
    report = run_smart_charging(cloud, repetitions=2, charge_ms=50, event_path=tmp_path / "events.jsonl")
    assert report.passed, report.failures
    assert report.timing.repetitions == 2
    assert all(v == 0 for v in cloud.registry_counts().values())
    lines = (tmp_path / "events.jsonl").read_text().splitlines()
    assert len(lines) == len(report.events)
    kinds = [json.loads(line)["step"] for line in lines]
    assert kinds.index("rfid-verification") < kinds.index("charge-start") < kinds.index("charge-end")


def test_wrong_rfid_fails_the_charge(make_cloud):
    cloud = make_cloud()
    report = run_smart_charging(cloud, charge_ms=10, wrong_rfid=True)
    assert not report.passed
    assert report.assertions["charge-accepted"] is False
    assert report.assertions["deregistration"] and report.assertions["registries-empty"]
    failure = report.failures[0]
    assert failure["assertion"] == "charge-accepted"
    flagged = next(e for e in report.events if e.seq == failure["eventIndex"])
    assert (flagged.actor, flagged.step, flagged.outcome) == ("chargingstation", "rfid-verification", "failed")


def test_security_matrix_passes(cloud):
    matrix = security_suite(cloud)
    assert list(matrix) == list(ROWS)
    assert suite_passed(matrix), {r: m.detail for r, m in matrix.items() if m.verdict == "FAIL"}
    for row in OUT_OF_SCOPE:
        assert matrix[row].verdict == "OUT-OF-SCOPE"


def test_security_matrix_detects_disabled_gating(make_cloud):
    matrix = security_suite(make_cloud(gating=False))
    assert matrix["S01"].verdict == "FAIL"
    assert matrix["E01"].verdict == "FAIL"
    assert not suite_passed(matrix)


def test_cli_scenario_and_measure(tmp_path, capsys):
    report = tmp_path / "scenario.json"
    assert main(["scenario", "smart-charging", "--charge-ms", "20", "--report", str(report)]) == 0
    assert json.loads(report.read_text())["passed"] is True
    assert "PASS charge-accepted" in capsys.readouterr().out

    measured = tmp_path / "measure.json"
    assert main(["measure", "--mode", "manual", "--reps", "1", "--charge-ms", "20", "--report", str(measured)]) == 0
    data = json.loads(measured.read_text())
    assert data["automatedFaster"] is True and data["manualOverAutomated"] > 1

    assert main(["scenario", "smart-charging", "--charge-ms", "5", "--wrong-rfid", "--report", str(report)]) == 1
    assert "FAIL charge-accepted" in capsys.readouterr().out


def test_cli_security_suite(tmp_path, capsys):
    report = tmp_path / "security.json"
    assert main(["security-suite", "--report", str(report)]) == 0
    assert {row["verdict"] for row in json.loads(report.read_text()).values()} == {"PASS", "OUT-OF-SCOPE"}
    assert main(["security-suite", "--disable-gating", "--report", str(report)]) == 1
    assert "S01  FAIL" in capsys.readouterr().out


def test_cli_reports_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"profile": "paranoid"}))
    assert main(["security-suite", "--config", str(bad)]) == 2
    assert "BadConfig" in capsys.readouterr().err


def test_cli_agent_onboards_against_a_running_cloud(tmp_path, capsys):
    config = CloudConfig(data_dir=tmp_path / "data")
    config_path = tmp_path / "cloud.json"
    config.save(config_path)
    manifest = tmp_path / "device.json"
    manifest.write_text(json.dumps(HostedManifest(
        "clidev", "02:00:00:00:aa:01", (HostedSystem("clisys", provides=(ProvidedService("cli-svc", "/cli"),)),)
    ).to_dict()))
    with LocalCloud(config):
        code = main([
            "agent", "onboard", "--config", str(config_path), "--manifest", str(manifest),
            "--credential", "manufacturer", "--report", str(tmp_path / "agent.json"),
        ])
    assert code == 0
    summary = json.loads((tmp_path / "agent.json").read_text())
    assert summary["state"] == "services-registered"
    assert summary["registrations"] == ["device:clidev", "system:clisys", "service:cli-svc@clisys"]


def test_processes_mode_boots_and_onboards(tmp_path):
    from helpers import onboard

    with LocalCloud(CloudConfig(data_dir=tmp_path / "data", mode="processes")) as cloud:
        assert all(cloud.health().values())
        agent = onboard(cloud, tmp_path, "procdev")
        assert set(agent.deregister_all().values()) == {"ok"}
