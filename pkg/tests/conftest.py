from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest
import torch

from thermal_past.dataset import PairTable, make_pairs
from thermal_past.synth import generate_scene, simulate_clip
from thermal_past.vocabulary import build_vocabulary

torch.set_num_threads(1)

CACHE_ENV = "THERMAL_PAST_CACHE"


@pytest.fixture(scope="session")
def small_table():
    """Typed pairs from two short synthetic clips plus an 8-type vocabulary."""
    tables = []
    for s in (21, 22):
        clip = simulate_clip(generate_scene(s), s, 30.0, clip_id=f"c{s}")
        tables.append(PairTable.from_pairs(make_pairs(clip, stride=5)))
    table = PairTable.concat(tables)
    vec = (np.delete(table.past, 8, axis=1) - table.past[:, 8:9]).reshape(len(table), -1)
    vocab = build_vocabulary(vec, k=8, seed=0)
    return table.with_types(vocab), vocab


@pytest.fixture(scope="session")
def bench():
    """The fixed-seed synthetic benchmark, cached between runs."""
    from thermal_past.benchmark import Benchmark, BenchmarkConfig

    cache = Path(os.environ.get(CACHE_ENV, Path(__file__).resolve().parents[1] / ".cache" / "benchmark"))
    b = Benchmark(BenchmarkConfig(), cache)
    b.summary()
    return b


# ---------------------------------------------------------------- per-criterion summary

_outcomes: dict = {}


def pytest_runtest_logreport(report):
    mark = _criteria.get(report.nodeid)
    if mark is None:
        return
    if report.when == "call" or report.outcome != "passed":
        prev = _outcomes.get(mark, "PASS")
        now = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _outcomes[mark] = "FAIL" if "FAIL" in (prev, now) else ("SKIP" if "SKIP" in (prev, now) else "PASS")


_criteria: dict = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criteria[item.nodeid] = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    numbered = sorted((k for k in _outcomes if isinstance(k[0], int)), key=lambda k: k[0])
    named = [k for k in _outcomes if not isinstance(k[0], int)]
    for key in numbered:
        terminalreporter.write_line(f"CRITERION {key[0]:>2} {_outcomes[key]}  {key[1]}")
    for key in named:
        terminalreporter.write_line(f"EXAMPLE {key[0]} {_outcomes[key]}  {key[1]}")
