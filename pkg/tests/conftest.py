import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from trunet.experiments import ExperimentConfig
from trunet.models import toy_res_unet_config, toy_trunet_config
from trunet.phantom import PhantomSpec
from trunet.training import TrainConfig


def tiny_experiment(**overrides) -> ExperimentConfig:
    """Seconds-scale experiment: 16^3 models, four short patients."""
    cfg = ExperimentConfig(model=toy_trunet_config(input_extent=16),
                           baseline=toy_res_unet_config(input_extent=16, unet_channels=(2, 2, 2, 2, 2)),
                           train=TrainConfig(epochs=1, target_extent=16),
                           phantom=PhantomSpec(num_patients=4, timepoints=2),
                           n_val=1, n_test=1, localizer_epochs=1)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(tiny_experiment(out_dir=str(tmp_path / "run")).to_json())
    return path


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
