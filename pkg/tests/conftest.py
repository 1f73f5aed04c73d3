from __future__ import annotations

import numpy as np
import pytest

from mast.data_io import read_manifest, synth_dataset

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    synth_dataset(d, 32, 4, seed=0)
    return d


@pytest.fixture(scope="session")
def synth_manifest(synth_dir):
    return read_manifest(synth_dir / "manifest.jsonl")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
