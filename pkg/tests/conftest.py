"""Shared fixtures: small on-disk synthetic datasets built once per session."""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))   # make oracles importable

from lczfusion.dataio import split, write_manifest
from lczfusion.rng import derive_rng
from lczfusion.synth import SynthConfig, synth_generate


# one line per acceptance check, echoed into the terminal summary so the
# verdicts are visible even when every test passes
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def _build(base, task, classes, per_class, noise, seed):
    cfg = SynthConfig(task=task, classes=classes, samples_per_class=per_class,
                      noise_sigma=noise, seed=seed)
    records = synth_generate(cfg, base)
    records = split(records, "sample_pool", rng=derive_rng(seed, "split"))
    write_manifest(records, os.path.join(base, "manifest.jsonl"))
    return base


@pytest.fixture(scope="session")
def spectral_ds(tmp_path_factory):
    """Two spectral classes, 15 samples each, split 11/3/1 per class."""
    base = tmp_path_factory.mktemp("spectral_ds")
    return _build(str(base), "spectral", 2, 15, 0.05, 101)


@pytest.fixture(scope="session")
def layout_ds(tmp_path_factory):
    """Three layout classes, 10 samples each."""
    base = tmp_path_factory.mktemp("layout_ds")
    return _build(str(base), "layout", 3, 10, 0.05, 202)


@pytest.fixture(scope="session")
def product_ds(tmp_path_factory):
    """Four product classes (2 spectral x 2 layout), 8 samples each."""
    base = tmp_path_factory.mktemp("product_ds")
    return _build(str(base), "product", 4, 8, 0.05, 303)
