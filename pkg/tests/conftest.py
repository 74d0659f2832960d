import numpy as np
import pytest

from fcasim import heterodata as hd
from fcasim.config import ExperimentConfig, from_dict
from fcasim.federation import derive_seed


def tiny_config(**overrides) -> ExperimentConfig:
    """A seconds-scale experiment: 16x16 images, two adapter layers, two rounds."""
    base = {
        "data": {"n_samples": 48, "image_size": 16, "num_classes": 3},
        "model": {"num_layers": 2, "channels": 4},
        "optim": {"batch_size": 8, "lr": 0.01},
        "federation": {"num_clients": 3, "rounds": 2, "local_epochs": 1},
        "output": {"checkpoints": True},
    }
    for section, values in overrides.items():
        base.setdefault(section, {}).update(values)
    return from_dict(base)


def equal_shard_seed(cfg: ExperimentConfig, limit: int = 500) -> int:
    """First data seed whose partition gives every client the same number of training samples."""
    d, f = cfg.data, cfg.federation
    for seed in range(limit):
        labels = np.random.default_rng(seed).integers(0, d.num_classes, size=d.n_samples)
        plan = hd.dirichlet_partition(labels, f.num_clients, d.alpha, derive_seed(seed, 1))
        sizes = {len(hd.train_eval_split(ix, d.eval_fraction, 0)[0]) for ix in plan.indices}
        if len(sizes) == 1:
            return seed
    raise RuntimeError("no equal-shard seed found")


@pytest.fixture
def tiny():
    return tiny_config


# PASS/FAIL lines recorded by the acceptance suite, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
