import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from genmark.metrics import FeatureExtractor
from genmark.watermark import DetectorConfig, DetectorModel, GeneratorConfig, GeneratorModel

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ext8():
    return FeatureExtractor(8, 3)


@pytest.fixture(scope="session")
def ext32():
    return FeatureExtractor(32, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_models():
    """Untrained 32x32 generator and detector with fixed weights."""
    torch.manual_seed(0)
    g = GeneratorModel(GeneratorConfig(k=16, resolution=32, base_width=32))
    d = DetectorModel(DetectorConfig(resolution=32, widths=(8, 16, 16)))
    return g, d
