"""Shared fixtures: a small synthetic dataset and a briefly trained model.

Session scope keeps the torch work to one training run for the whole
suite; tests that need fresh state build their own.
"""

import numpy as np
import pytest
import torch

from gridfree.core import RunConfig
from gridfree.pipeline import StationTable, fit_default_scalers, split_dataset
from gridfree.synthetic import generate_synthetic, make_field_spec
from gridfree.training import BatchSampler, prepare_data, train

torch.set_num_threads(1)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Collected by test_acceptance: one pass/fail line per criterion."""
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_spec():
    return make_field_spec(n_sites=30, n_days=25, n_sources=2,
                           noise_sd=0.3, seed=7)


@pytest.fixture(scope="session")
def tiny_records(tiny_spec):
    records, _ = generate_synthetic(tiny_spec, 7)
    return records


@pytest.fixture(scope="session")
def tiny_oracle(tiny_spec):
    records, oracle = generate_synthetic(tiny_spec, 7)
    return oracle


@pytest.fixture(scope="session")
def tiny_cfg():
    # 12 epochs keeps the session fixture under 3 s while training far
    # enough past random init for fit-quality checks to mean something
    return RunConfig(n_sensors=8, batch_size=16, n_batches=6, n_epochs=12,
                     seed=7)


@pytest.fixture(scope="session")
def tiny_scalers(tiny_records, tiny_cfg):
    return fit_default_scalers(tiny_records, tiny_cfg.feature_set)


@pytest.fixture(scope="session")
def tiny_data(tiny_records, tiny_scalers, tiny_cfg):
    split = split_dataset(tiny_records, tiny_cfg.split_fractions,
                          tiny_cfg.seed)
    return prepare_data(tiny_records, tiny_scalers, tiny_cfg, split=split)


@pytest.fixture(scope="session")
def tiny_table(tiny_records):
    return StationTable(tiny_records)


@pytest.fixture(scope="session")
def tiny_state(tiny_cfg, tiny_data, tiny_scalers):
    return train(tiny_cfg, tiny_data, tiny_scalers)


@pytest.fixture(scope="session")
def tiny_sampler(tiny_data, tiny_cfg):
    return BatchSampler(tiny_data.features, tiny_data.split.train, tiny_cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240814)
