import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from mdjpt.synth import DatasetSpec, SynthSpec, generate_corpus

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(datasets=(DatasetSpec(n_subjects=4, n_trials=3, trial_s=8.0),) * 2, seed=7)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory, small_spec):
    """Two raw synthetic datasets on disk (16 channels, 125 Hz)."""
    out = tmp_path_factory.mktemp("corpus")
    return generate_corpus(small_spec, out)


@pytest.fixture(scope="session")
def prepped_corpus(tmp_path_factory, small_corpus):
    from mdjpt.preprocessing import prep_dataset

    out = tmp_path_factory.mktemp("prepped")
    return [prep_dataset(m, out / m.dataset_id) for m in small_corpus]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
