from __future__ import annotations

import contextlib
import sys

import pytest

from localcloud.harness import CloudConfig, LocalCloud


@pytest.fixture(scope="session")
def cloud(tmp_path_factory):
    """One healthy cloud shared by tests that leave it clean."""
    config = CloudConfig(cloud_name="testcloud", data_dir=tmp_path_factory.mktemp("cloud"))
    with LocalCloud(config) as running:
        yield running


@pytest.fixture
def make_cloud(tmp_path):
    """Factory for throwaway clouds with non-default settings."""
    with contextlib.ExitStack() as stack:
        counter = iter(range(100))

        def make(**settings) -> LocalCloud:
            settings.setdefault("data_dir", tmp_path / f"cloud-{next(counter)}")
            return stack.enter_context(LocalCloud(CloudConfig(**settings)))

        yield make


@pytest.fixture(scope="module")
def make_module_cloud(tmp_path_factory):
    """Like ``make_cloud`` but the clouds live for the whole module."""
    with contextlib.ExitStack() as stack:

        def make(**settings) -> LocalCloud:
            settings.setdefault("data_dir", tmp_path_factory.mktemp("module-cloud"))
            return stack.enter_context(LocalCloud(CloudConfig(**settings)))

        yield make


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
