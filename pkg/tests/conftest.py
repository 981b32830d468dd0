import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from mextract.config import VictimConfig
from mextract.data import load_dataset
from mextract.harness import load_victim, split_dataset

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def blobs_setup(tmp_path_factory):
    """Small 4-class image set and a victim trained on its reference split."""
    data = load_dataset("blobs")
    ref, test = split_dataset(data, 0.8, 0)
    ckpt = tmp_path_factory.mktemp("victim") / "blobs_victim.npz"
    cfg = VictimConfig(dataset="blobs", architecture="small_cnn", width=16, train_epochs=10,
                       checkpoint=str(ckpt), version="blobs-v1")
    victim = load_victim(cfg, data.subset(ref))
    return {"data": data, "ref": ref, "test": test, "victim": victim, "victim_cfg": cfg, "ckpt": ckpt}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
