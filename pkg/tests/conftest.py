"""Shared fixtures and the acceptance-summary hook.

Acceptance tests record one line per criterion through `criterion_log`;
the terminal summary prints the collected lines after the test run so the
pass/fail status of every criterion is visible in one block.
"""

from pathlib import Path

import pytest

from dissim.datasets import load_dataset, synth_dataset

_CRITERION_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    _CRITERION_LINES[number] = line
    print(line)


@pytest.fixture(scope="session")
def criterion_log():
    return record_criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERION_LINES):
        terminalreporter.write_line(_CRITERION_LINES[number])


@pytest.fixture(scope="session")
def data_root(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("data")


@pytest.fixture(scope="session")
def tiny_dataset(data_root):
    """12 mixed images: OoD objects and corrupted predictions present."""
    path, _ = synth_dataset(
        data_root / "tiny", n=12, seed=99, ood_rate=0.4, corrupt_rate=0.3,
        size=64, patch_size=32,
    )
    return load_dataset(path)


@pytest.fixture(scope="session")
def clean_dataset(data_root):
    """10 in-distribution images with exact predictions."""
    path, _ = synth_dataset(
        data_root / "clean", n=10, seed=7, ood_rate=0.0, corrupt_rate=0.0,
        size=64, patch_size=32,
    )
    return load_dataset(path)
