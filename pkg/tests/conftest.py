"""Shared fixtures: small synthetic bundles and reduced model configs."""

import pytest
import torch
from hypothesis import settings

from ranfup import bundle, model, synth, training

settings.register_profile("suite", max_examples=50, deadline=None, derandomize=True)
settings.load_profile("suite")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_bundle():
    # 8 subjects on a 42-point grid: enough structure for every code path.
    return synth.generate_bundle(
        8, "icosphere:1", sample_rate=48000, hrir_length=128, seed=3
    )


@pytest.fixture(scope="session")
def tiny_split(tiny_bundle):
    return bundle.make_split(
        tiny_bundle.subjects, bundle.SplitConfig(exclusions=(), sizes=(6, 1, 2))
    )


@pytest.fixture(scope="session")
def tiny_measured(tiny_bundle):
    return bundle.select_measured_subset(tiny_bundle.grid, 3)


def small_ranf_config(**overrides):
    base = dict(
        sample_rate=48000,
        hrir_length=128,
        channels=8,
        n_blocks=1,
        lstm_hidden=4,
        conv_channels=(2, 4, 4),
        n_post_layers=2,
        k_retrieved=2,
        tac_hidden=4,
        rff_features=8,
        n_itd_head_layers=2,
        itd_head_hidden=8,
        seed=0,
    )
    base.update(overrides)
    return model.RanfConfig(**base)


def small_train_config(**overrides):
    base = dict(pretrain_epochs=2, adapt_epochs=2, batch_size=16, seed=0)
    base.update(overrides)
    return training.TrainConfig(**base)


@pytest.fixture
def small_config():
    return small_ranf_config()
