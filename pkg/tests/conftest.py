import numpy as np


def brute_force_auc(scores, labels):
    """Pairwise count of poisoned-over-clean wins, ties counting half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def random_binary_instance(rng, n_max=50, tie_levels=None):
    n = int(rng.integers(2, n_max + 1))
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    if tie_levels:
        s = rng.integers(0, tie_levels, size=n).astype(float)
    else:
        s = rng.normal(size=n)
    return s, y


import pytest

from weightdetect.zoo import ZooConfig, generate_zoo


@pytest.fixture(scope="session")
def small_zoo(tmp_path_factory):
    """40 models (20 clean, 20 poisoned) with default training settings."""
    out = tmp_path_factory.mktemp("zoo40")
    manifest, stats = generate_zoo(ZooConfig(n_clean=20, n_poisoned=20, seed=0), out)
    return out, manifest, stats


CRITERIA: dict[int, str] = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:2d} {status}: {self.title}"
        if self.detail:
            line += f" [{self.detail}]"
        CRITERIA[self.number] = line
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


@pytest.fixture(scope="session")
def zoo200(tmp_path_factory):
    """100 clean + 100 poisoned models, seed 0, plus their stats rows."""
    from weightdetect.weight_store import load_models
    from weightdetect.zoo import read_zoo_stats

    out = tmp_path_factory.mktemp("zoo200")
    manifest, _ = generate_zoo(ZooConfig(n_clean=100, n_poisoned=100, seed=0), out)
    return manifest, load_models(manifest, out), read_zoo_stats(out / "zoo_stats.json")
