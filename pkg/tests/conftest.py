import numpy as np
import pytest
import torch

from saddel.synth import TASK_TAGS, TaskConfig, generate_corpus, make_toy_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_pools(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return make_toy_corpus(root, n_speakers=4, utterances_per_speaker=3, seed=5, n_noise=4)


@pytest.fixture(scope="session")
def small_corpus(toy_pools, tmp_path_factory):
    """A few written items of every task configuration."""
    speech, noise = toy_pools
    out = tmp_path_factory.mktemp("corpus")
    return generate_corpus(speech, noise, [(TaskConfig.from_tag(t), 3) for t in TASK_TAGS], out, 9)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance criterion reporting -------------------------------------------

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(name, passed, detail)`` prints one PASS/FAIL line and asserts."""

    def check(name: str, passed: bool, detail: str = ""):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _CRITERIA.append(line)
        print(line)
        assert passed, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
