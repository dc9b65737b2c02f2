from __future__ import annotations

import time
from collections import defaultdict
from pathlib import Path

import pytest

from icono.config import read_kv, write_kv
from icono.fixtures import make_fixture

GOLDEN = Path(__file__).parent / "golden"

_criteria: dict = defaultdict(list)
_criterion_text: dict = {}


@pytest.fixture(scope="session")
def fixture_cfg(tmp_path_factory) -> Path:
    """The shipped synthetic corpus plus weight assets; returns run.cfg."""
    return make_fixture(tmp_path_factory.mktemp("fixture"))


@pytest.fixture(scope="session")
def fixture_data(fixture_cfg) -> Path:
    return fixture_cfg.parent / "data"


def config_variant(cfg_path: Path, name: str, **changes) -> Path:
    """Copy of ``cfg_path`` next to it with keys replaced (None drops a key)."""
    values = read_kv(cfg_path)
    for key, value in changes.items():
        key = key.replace("__", ".")
        if value is None:
            values.pop(key, None)
        else:
            values[key] = value
    out = cfg_path.with_name(name)
    write_kv(values, out)
    return out


@pytest.fixture(scope="session")
def fixture_run(fixture_cfg):
    """One complete run-all on the fixture; yields (config, output_root, seconds)."""
    from icono.pipeline import run_all, validate_config

    cfg = validate_config(fixture_cfg)
    start = time.time()
    run_all(cfg)
    return cfg, cfg.output_root, time.time() - start


def pytest_collection_modifyitems(items):
    for item in items:
        if "fixture_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number = marker.args[0]
    _criterion_text[number] = marker.args[1] if len(marker.args) > 1 else ""
    if call.excinfo is None:
        _criteria[number].append("pass")
    elif call.excinfo.errisinstance(pytest.skip.Exception):
        _criteria[number].append("skip")
    else:
        _criteria[number].append("fail")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        outcomes = _criteria[number]
        status = "PASS" if outcomes and all(o == "pass" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"AC{number:<2} {status}  {_criterion_text[number]}")
