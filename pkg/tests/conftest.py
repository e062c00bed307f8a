"""
Shared fixtures: seeded generators, a desk-sized configuration and small datasets for
both case studies.
"""

__author__ = "HybridODE contributors"
__license__ = "GPL-3.0"


import copy
import numpy as np
import pytest
from hybridode.models.datagen import (DoseProtocol, PendulumSampleSpec, assign_splits, gen_pendulum_dataset, gen_pk_cohort,
                                      gen_pk_dataset, label_optimal_doses)
from hybridode.models.mechanistic import PkParamTable
from hybridode.utils.config_parser import DEFAULT_CONFIG


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    config = copy.deepcopy(DEFAULT_CONFIG)
    config["service"]["log_level"] = "WARNING"
    config["data"].update({"n": 6, "n_test": 4})
    config["pendulum"]["encoder_data"]["n"] = 8
    config["pendulum"]["beta_source"] = "truth"
    config["pk"]["test_fraction"] = 0.5
    for case in ("pendulum", "pk"):
        for kind in ("hybrid", "data-driven"):
            config["model"][case][kind] = {"hidden_dim": 8, "num_blocks": 1, "gain": 0.3}
            config["training"][case][kind].update({"max_epochs": 2, "batch_size": 8, "batches_per_epoch": 1})
    config["training"]["pendulum"]["hybrid"]["window_len"] = 5
    config["training"]["pendulum"]["data-driven"]["window_len"] = 5
    config["training"]["pk"]["hybrid"]["window_len"] = 10
    config["training"]["pk"]["data-driven"]["window_len"] = 10
    config["model"]["pendulum"]["encoder"]["hidden_dim"] = 8
    config["encoder"].update({"max_epochs": 2, "batch_size": 4})
    return config


@pytest.fixture
def pendulum_train():
    return gen_pendulum_dataset(PendulumSampleSpec(n=6), [0, 1, 2, 3, 4], seed=3, name="train")


@pytest.fixture(scope="session")
def oracle_table():
    return PkParamTable.load("oracle")


@pytest.fixture(scope="session")
def prior_table():
    return PkParamTable.load("prior")


@pytest.fixture(scope="session")
def pk_cohort_dataset(oracle_table):
    protocol = DoseProtocol()
    cohort = gen_pk_cohort("synthetic", 16, seed=5)
    splits = assign_splits(cohort, seed=5, test_fraction=0.5)
    decisions = label_optimal_doses(cohort, protocol, oracle_table)
    dataset, excluded = gen_pk_dataset(cohort, splits, decisions, protocol, oracle_table, seed=5)
    return dataset
