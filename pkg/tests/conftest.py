from __future__ import annotations

import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from dragforge import cli
from dragforge.dataset import Dataset, load

logging.getLogger("dragforge").setLevel(logging.WARNING)


@dataclass(frozen=True)
class GeneratedCase:
    dataset: Dataset
    seconds: float
    out: Path
    config: str


def _jobs() -> int:
    # acceptance budgets assume a 4-core laptop
    return max(1, min(4, os.cpu_count() or 1))


@pytest.fixture(scope="session")
def generate_case(tmp_path_factory):
    """Run ``dragforge gen-dataset`` once per (width, levels) and cache it."""
    cache: dict[tuple[float, int], GeneratedCase] = {}

    def run(width: float, levels: int) -> GeneratedCase:
        key = (width, levels)
        if key not in cache:
            out = tmp_path_factory.mktemp(f"gen-w{width}-l{levels}")
            cfg = out / "config.json"
            cfg.write_text(json.dumps({"width": width, "levels": levels}))
            t0 = time.perf_counter()
            code = cli.main(["gen-dataset", "--config", str(cfg), "--out", str(out),
                             "--jobs", str(_jobs())])
            seconds = time.perf_counter() - t0
            assert code == cli.EXIT_OK
            cache[key] = GeneratedCase(load(out / "dataset.csv"), seconds, out, str(cfg))
        return cache[key]

    return run


@pytest.fixture(scope="session")
def smoke_dataset(generate_case) -> Dataset:
    """81-shape dataset at width 0.18 with the default solver settings."""
    return generate_case(0.18, 3).dataset


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
