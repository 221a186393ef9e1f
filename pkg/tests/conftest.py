"""Shared fixtures: one desk-scale benchmark dataset reused across suites.

Generating the 50-scene benchmark takes under a second, but several suites
(re-ranking, evaluation, acceptance) want the exact same dataset, score
table, and position index, so they are built once per session here.

The acceptance suite additionally wants its verdicts visible in the final
terminal summary, so a module-level list collects one line per criterion and
a ``pytest_terminal_summary`` hook prints them after the run.
"""

import os

# The acceptance criteria carry wall-clock budgets that assume a single
# core; pin the BLAS thread pool before numpy is first imported so timings
# are honest and runs are reproducible across machines.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from semloc.evalkit import PositionIndex
from semloc.synth import SceneSpec, generate_dataset, synth_rgb_scores

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def bench_spec():
    return SceneSpec(seed=0)


@pytest.fixture(scope="session")
def bench(bench_spec):
    """(dataset, truth) for the default 50-scene benchmark."""
    return generate_dataset(bench_spec)


@pytest.fixture(scope="session")
def bench_scores(bench, bench_spec):
    dataset, truth = bench
    return synth_rgb_scores(dataset, bench_spec, truth=truth)


@pytest.fixture(scope="session")
def bench_index(bench):
    dataset, _ = bench
    return PositionIndex.from_dataset(dataset)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def criterion_log():
    """Sink for per-criterion verdict lines printed at end of run."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
