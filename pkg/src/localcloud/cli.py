"""Command line entry point: ``localcloud <command>`` or ``python3 -m localcloud``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import signal
import sys
import tempfile
import threading
from pathlib import Path
from typing import Iterator, Optional

from . import errors
from .agent import HostedManifest, OnboardingAborted
from .context import DEVICE_REGISTRY, SERVICE_REGISTRY, SYSTEM_REGISTRY
from .harness.bootstrap import ensure_pki
from .harness.cloud import LocalCloud, Sweeper, build_system
from .harness.config import CloudConfig
from .harness.measure import MANUAL_CERTIFICATE_SECONDS, compare, simulated_manual
from .harness.scenario import run_smart_charging
from .harness.security import security_suite, suite_passed
from .transport import TlsServer

log = logging.getLogger("localcloud")


def _write_report(path: Optional[str], name: str, data: dict) -> Path:
    out = Path(path) if path else Path("reports") / f"{name}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(data, indent=2, default=str))
    return out


@contextlib.contextmanager
def _cloud(args, **overrides) -> Iterator[LocalCloud]:
    """A cloud from ``--config``, or a throwaway one in a temporary directory."""
    with contextlib.ExitStack() as stack:
        if args.config:
            config = CloudConfig.load(args.config)
        else:
            config = CloudConfig(data_dir=Path(stack.enter_context(tempfile.TemporaryDirectory(prefix="localcloud-"))))
        for key, value in overrides.items():
            setattr(config, key, value)
        cloud = stack.enter_context(LocalCloud(config))
        yield cloud


def _wait_for_signal() -> None:
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass


def cmd_cloud_up(args) -> int:
    config = CloudConfig.load(args.config)
    with LocalCloud(config) as cloud:
        print(json.dumps({"cloud": config.cloud_name, "endpoints": cloud.endpoints, "health": cloud.health()}, indent=2))
        sys.stdout.flush()
        _wait_for_signal()
    return 0


def cmd_serve(args) -> int:
    """Run a single core system (used by ``processes`` mode)."""
    config = CloudConfig.load(args.config)
    pki = ensure_pki(config.data_dir, config.cloud_name, config.key_algorithm, config.validity_days)
    endpoints = {s: f"https://{'127.0.0.1' if config.host in ('0.0.0.0', '') else config.host}:{p}" for s, p in config.ports.items()}
    ctx, system = build_system(config, pki, args.system, endpoints)
    server = TlsServer(system.routes(), ctx.server_context(), config.host, config.ports[args.system], args.system).start()
    sweeper = Sweeper([system]).start() if args.system in (DEVICE_REGISTRY, SYSTEM_REGISTRY, SERVICE_REGISTRY) else None
    log.info("%s listening on %s", args.system, server.url)
    try:
        _wait_for_signal()
    finally:
        if sweeper:
            sweeper.stop()
        server.stop()
    return 0


def cmd_scenario(args) -> int:
    with _cloud(args) as cloud:
        report = run_smart_charging(
            cloud, args.reps, args.charge_ms, wrong_rfid=args.wrong_rfid, event_path=args.events
        )
    out = _write_report(args.report, "smart-charging", report.to_dict())
    for name, ok in report.assertions.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"fractions {json.dumps(report.timing.fractions)}")
    print(f"report written to {out}")
    return 0 if report.passed else 1


def cmd_measure(args) -> int:
    with _cloud(args) as cloud:
        report = run_smart_charging(cloud, args.reps, args.charge_ms)
    automated = report.timing
    if args.mode == "automated":
        result = {"automated": automated.to_dict()}
        ok = report.passed
    else:
        manual = simulated_manual(automated, report.registration_ms, args.stand_in)
        result = compare(automated, manual)
        ok = report.passed and (args.reps == 0 or result["automatedFaster"])
    out = _write_report(args.report, f"measure-{args.mode}", result)
    for label, breakdown in result.items():
        if isinstance(breakdown, dict):
            means = {p: round(v["mean"], 1) for p, v in breakdown["phases"].items()}
            print(f"{breakdown['label']}: mean total {breakdown['meanTotal']:.1f} ms, phases {means}")
    if "manualOverAutomated" in result:
        print(f"manual / automated = {result['manualOverAutomated']}")
    print(f"report written to {out}")
    return 0 if ok else 1


def cmd_security(args) -> int:
    with _cloud(args, gating=not args.disable_gating) as cloud:
        matrix = security_suite(cloud)
    for result in matrix.values():
        print(f"{result.row:4} {result.verdict:13} {result.detail}")
    out = _write_report(args.report, "security-suite", {r: m.to_dict() for r, m in matrix.items()})
    print(f"report written to {out}")
    return 0 if suite_passed(matrix) else 1


def cmd_agent_onboard(args) -> int:
    config = CloudConfig.load(args.config)
    cloud = LocalCloud(config).attach()
    manifest = HostedManifest.load(args.manifest)
    directory = Path(args.dir or Path(config.data_dir) / "agents" / manifest.device_name)
    if args.credential == "shared-secret" and not args.secret:
        raise errors.BadConfig("--secret is required for the shared-secret credential")
    agent = cloud.new_agent(manifest.device_name, directory, credential=args.credential, flow=args.flow)
    try:
        state = agent.run_onboarding(manifest, args.credential, args.secret)
    except OnboardingAborted as exc:
        print(f"onboarding aborted at step {exc.step}: {exc.cause!r}", file=sys.stderr)
        return 1
    summary = {"device": manifest.device_name, "state": state.value, "registrations": [r.label for r in agent.registrations]}
    _write_report(args.report, f"agent-{manifest.device_name}", summary)
    print(json.dumps(summary, indent=2))
    if args.serve:
        _wait_for_signal()
    agent.shutdown()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="localcloud", description="Secure local cloud with automated device onboarding.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    cloud = sub.add_parser("cloud", help="run the core systems")
    cloud_sub = cloud.add_subparsers(dest="action", required=True)
    up = cloud_sub.add_parser("up", help="boot every core system and wait")
    up.add_argument("--config", required=True)
    up.set_defaults(func=cmd_cloud_up)

    serve = sub.add_parser("serve", help="run one core system (process mode)")
    serve.add_argument("--config", required=True)
    serve.add_argument("--system", required=True)
    serve.set_defaults(func=cmd_serve)

    scenario = sub.add_parser("scenario", help="run an application scenario")
    scenario_sub = scenario.add_subparsers(dest="name", required=True)
    charging = scenario_sub.add_parser("smart-charging")
    charging.add_argument("--reps", type=int, default=1)
    charging.add_argument("--charge-ms", type=int, default=1000)
    charging.add_argument("--wrong-rfid", action="store_true", help="vehicle presents a forged tag")
    charging.add_argument("--events", type=Path, help="JSON-lines event log")
    charging.add_argument("--config")
    charging.add_argument("--report")
    charging.set_defaults(func=cmd_scenario)

    measure = sub.add_parser("measure", help="phase timing, automated vs manual onboarding")
    measure.add_argument("--mode", choices=("automated", "manual"), default="automated")
    measure.add_argument("--reps", type=int, default=10)
    measure.add_argument("--charge-ms", type=int, default=1000)
    measure.add_argument("--stand-in", type=float, default=MANUAL_CERTIFICATE_SECONDS, help="seconds per manual certificate deployment")
    measure.add_argument("--config")
    measure.add_argument("--report")
    measure.set_defaults(func=cmd_measure)

    security = sub.add_parser("security-suite", help="run the threat matrix")
    security.add_argument("--config")
    security.add_argument("--report")
    security.add_argument("--disable-gating", action="store_true", help="debug: turn off certificate gating")
    security.set_defaults(func=cmd_security)

    agent = sub.add_parser("agent", help="device agent")
    agent_sub = agent.add_subparsers(dest="action", required=True)
    onboard = agent_sub.add_parser("onboard", help="onboard a device against a running cloud")
    onboard.add_argument("--config", required=True)
    onboard.add_argument("--manifest", required=True)
    onboard.add_argument("--credential", choices=("manufacturer", "arrowhead", "shared-secret"), required=True)
    onboard.add_argument("--secret")
    onboard.add_argument("--flow", choices=("csr", "name"), default="csr")
    onboard.add_argument("--dir")
    onboard.add_argument("--report")
    onboard.add_argument("--serve", action="store_true", help="keep the device's systems up until interrupted")
    onboard.set_defaults(func=cmd_agent_onboard)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except errors.LocalCloudError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
