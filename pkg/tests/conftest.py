import numpy as np
import pytest
import torch

from lpl_lab.autoencoder import Autoencoder, encode_batched, images_to_tensor
from lpl_lab.config import RunConfig
from lpl_lab.runtime import configure_torch
from lpl_lab.toydata import DataSpec, generate_textured_dataset

configure_torch()


def make_ae(seed: int = 0) -> Autoencoder:
    """Randomly initialised, frozen autoencoder; enough for anything but fidelity checks."""
    torch.manual_seed(seed)
    return Autoencoder().freeze()


@pytest.fixture(scope="session")
def ae():
    return make_ae(0)


@pytest.fixture(scope="session")
def small_data():
    return generate_textured_dataset(DataSpec(count=64, resolution=64, seed=3))


@pytest.fixture(scope="session")
def small_latents(ae, small_data):
    return encode_batched(ae, images_to_tensor(small_data.images))


def tiny_config(**overrides) -> RunConfig:
    """Small denoiser, short phases; used wherever real training would take too long."""
    data = {
        "data": {"count": 64},
        "trainer": {"pretrain_steps": 3, "posttrain_steps": 3, "batch": 8,
                    "checkpoint_every": 0},
        "model": {"base_channels": 16},
        "sampler": {"steps": 4, "count": 8, "batch": 8},
        "eval": {"num_samples": 16, "k": 3},
    }
    for dotted, value in overrides.items():
        node = data
        *parents, leaf = dotted.split("__")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return RunConfig.model_validate(data)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
