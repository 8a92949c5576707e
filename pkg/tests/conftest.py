"""Shared fixtures and the acceptance-criteria summary."""

import os
import time
from pathlib import Path

import pytest

from cdrl.config import load_config
from cdrl.trainer import Trainer

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

_ACCEPTANCE: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    line = f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}"
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def checkerboard_run(tmp_path_factory):
    """Train the desk checkerboard model once per session.

    Set ``CDRL_CHECKERBOARD_CKPT`` to reuse an existing checkpoint (the
    wall-clock figure is then reported as unknown).
    """
    reuse = os.environ.get("CDRL_CHECKERBOARD_CKPT")
    if reuse:
        return Trainer.load(reuse), None
    cfg = load_config(CONFIGS / "checkerboard.cfg")
    t0 = time.perf_counter()
    tr = Trainer(cfg)
    tr.run()
    elapsed = time.perf_counter() - t0
    tr.save(tmp_path_factory.mktemp("a1") / "checkerboard.cdrl")
    return tr, elapsed
