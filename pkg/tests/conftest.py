import sys

import numpy as np
import pytest
import torch

from starmt.datagen import GenConfig, build_dataset
from starmt.detector import DetectorConfig, TinyVOD

torch.set_num_threads(1)

SMALL_GEN = GenConfig(T=4, H=32, W=32, n_objects=(1, 2), size_range=(8.0, 14.0), max_speed=1.0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six tiny labelled sequences: 4 train, 2 test."""
    root = tmp_path_factory.mktemp("small") / "clean"
    return build_dataset(SMALL_GEN, 6, (4 / 6, 0.0, 2 / 6), seed=7, root=root)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    model = TinyVOD(DetectorConfig(n_classes=4, widths=(4, 6, 8, 8), tam_hidden=8))
    # a non-trivial TAM so aggregation actually changes the scores
    torch.nn.init.normal_(model.tam.proj[-1].weight, std=0.3)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
