import json
import os
import numpy as np
import pandas as pd
import pytest
from hybridode.models.datagen import (DatasetStore, DoseProtocol, PendulumSampleSpec, covariates_from_records, gen_counterfactual_dataset,
                                      gen_pendulum_dataset, gen_pk_cohort, label_optimal_dose, label_optimal_doses,
                                      STREAM_TEST_IN)
from hybridode.models.hybrid import build_model
from hybridode.models.odeint import TimeGrid
from hybridode.models.evaluation import (REPORT_COLUMNS, ModelBundle, absolute_performance_error, aggregate_cells, distance_from_training,
                                         dose_report, eval_counterfactual_outcomes, eval_reconstruction, load_test_sets,
                                         rollout_observed, run_replications, select_dose, select_doses, trajectory_mse, write_report)
from hybridode.utils.exceptions import ConfigurationError


class _ExplodingModel:
    """
    Decays for conditioning <= 0 and blows up otherwise.
    """
    state_dim = 2

    def initial_state(self, observed, conditioning=None, latent=None):
        return np.array(observed, dtype=np.float64)

    def rhs(self, conditioning):
        return lambda t, x, eta: np.where(conditioning[:, None] > 0.0, np.inf, -x)

    def observe(self, states, conditioning=None):
        return states


@pytest.fixture
def oracle_bundle(tiny_config, oracle_table):
    return ModelBundle("mechanistic", build_model("mechanistic", "pk", tiny_config), prior=oracle_table)


def _cells(frame, metric):
    return frame[frame["metric"] == metric]


def test_absolute_performance_error():
    assert absolute_performance_error(1.8, 2.0) == pytest.approx(10.0)
    assert absolute_performance_error(2.0, 2.0) == 0.0


def test_distance_from_training():
    taus = [10.0, 10.5, 11.0, 11.5, 12.0]
    assert distance_from_training(6.0, taus) == pytest.approx(4.0)
    assert distance_from_training(10.0, taus) == 0.0
    assert distance_from_training(13.5, taus) == pytest.approx(1.5)


def test_trajectory_mse():
    pred = np.zeros((2, 3, 2))
    target = np.zeros((2, 3, 2))
    target[1, :, 0] = 2.0
    np.testing.assert_allclose(trajectory_mse(pred, target), [0.0, 4.0])


def test_rollout_marks_diverged_units():
    grid = TimeGrid(0.0, 0.1, 5)
    with np.errstate(all="ignore"):
        result = rollout_observed(_ExplodingModel(), np.array([0.0, 1.0, 0.0]), np.ones((3, 2)), grid, np.zeros((3, 6, 1)))
    np.testing.assert_array_equal(result["diverged"], [1])
    assert np.all(np.isnan(result["observed"][1]))
    assert np.all(np.isfinite(result["observed"][[0, 2]]))
    assert result["observed"][0, -1, 0] == pytest.approx(np.exp(-0.5), rel=1e-6)


def test_pendulum_reconstruction_cells(tiny_config, pendulum_train):
    bundle = ModelBundle("mechanistic", build_model("mechanistic", "pendulum", tiny_config))
    test_in = gen_pendulum_dataset(PendulumSampleSpec(n=3), [0, 1, 2, 3, 4], seed=3, name="test_in", stream=STREAM_TEST_IN)
    report = eval_reconstruction([bundle], {"in_distribution": test_in, "train": pendulum_train}, threads=2)
    assert list(report.cells.columns) == REPORT_COLUMNS
    assert len(report.trajectories) == 3 + len(pendulum_train)
    mse = _cells(report.cells, "mse").set_index("split")
    assert mse.loc["in_distribution", "n"] == 3
    assert mse.loc["in_distribution", "value"] > 0.0
    assert mse.loc["in_distribution", "value"] == pytest.approx(
        report.trajectories[report.trajectories["split"] == "in_distribution"]["mse"].mean())
    assert (_cells(report.cells, "excluded")["value"] == 0.0).all()


def test_counterfactual_outcomes(tiny_config):
    bundle = ModelBundle("mechanistic", build_model("mechanistic", "pendulum", tiny_config))
    dataset = gen_counterfactual_dataset(PendulumSampleSpec(n=2), seed=0, t_max=4.0, t_switch=2.0, tau_after=(6.0, 10.0))
    frame = eval_counterfactual_outcomes([bundle], dataset, [10.0, 10.5, 11.0, 11.5, 12.0])
    assert list(frame["tau_after"]) == [6.0, 10.0]
    assert list(frame["distance_from_training"]) == [4.0, 0.0]
    assert list(frame["n"]) == [2, 2]
    assert (frame["metric"] == "cf_mse").all()
    assert (frame["value"] > 0.0).all()


def test_oracle_model_reconstructs_the_cohort(oracle_bundle, pk_cohort_dataset):
    report = eval_reconstruction([oracle_bundle], {"cohort": pk_cohort_dataset})
    assert _cells(report.cells, "mse")["value"].iloc[0] < 1e-12


def test_oracle_model_selects_the_oracle_dose(oracle_bundle, oracle_table, pk_cohort_dataset):
    protocol = DoseProtocol()
    for patient in covariates_from_records(pk_cohort_dataset.records)[:4]:
        assert select_dose(oracle_bundle, patient, protocol).dose == label_optimal_dose(patient, protocol, oracle_table).dose


def test_oracle_model_matches_the_labels_on_a_synthetic_cohort(oracle_bundle, oracle_table):
    protocol = DoseProtocol()
    cohort = gen_pk_cohort("synthetic", 200, seed=11)
    selected = select_doses(oracle_bundle, cohort, protocol, threads=2)
    labels = label_optimal_doses(cohort, protocol, oracle_table, threads=2)
    assert len(selected) == len(labels) == 200
    mismatches = [(patient.patient_id, ours.dose, label.dose) for patient, ours, label in zip(cohort, selected, labels)
                  if ours.dose != label.dose or ours.safe != label.safe]
    assert mismatches == []


def test_dose_report_for_the_oracle_model(oracle_bundle, oracle_table, pk_cohort_dataset):
    report = dose_report([oracle_bundle], pk_cohort_dataset, DoseProtocol(), oracle_table)
    tested = pk_cohort_dataset.records["split"] != "train"
    assert len(report.patients) == int(tested.sum())
    assert set(report.cells["metric"]) == {"mape", "mdape", "violations", "unsafe_flags"}
    assert set(report.cells["split"]) == {"in_distribution", "ood", "extreme_ood"}
    for metric in ("mape", "mdape"):
        filled = _cells(report.cells, metric)
        filled = filled[filled["n"] > 0]
        assert not filled.empty
        assert np.allclose(filled["value"].astype(float), 0.0)
    assert (_cells(report.cells, "violations")["value"] == 0.0).all()
    assert (_cells(report.cells, "unsafe_flags")["value"] == 0.0).all()


def test_replication_statistics():
    def experiment(seed, replication):
        return pd.DataFrame([{"model": "hybrid", "split": "ood", "metric": "mse", "value": 2.0, "sem": None, "n": 1,
                              "replication": replication}])

    report = run_replications(experiment, 3, seeds=[5, 6, 7])
    assert len(report.raw) == 3
    row = report.aggregate.iloc[0]
    assert row["value"] == 2.0
    assert row["sem"] == 0.0
    assert row["n"] == 3
    assert row["replication"] == "all"
    single = run_replications(experiment, 1)
    assert single.aggregate.iloc[0]["sem"] is None


def test_failed_replications_are_recorded():
    def experiment(seed, replication):
        if seed == 1:
            raise ConfigurationError("broken replication")
        return pd.DataFrame([{"model": "hybrid", "split": "ood", "metric": "mse", "value": float(seed), "sem": None, "n": 1,
                              "replication": replication}])

    report = run_replications(experiment, 3)
    assert [failure["replication"] for failure in report.failures] == [1]
    assert report.aggregate.iloc[0]["n"] == 2
    assert report.aggregate.iloc[0]["value"] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        run_replications(experiment, 3, seeds=[1, 2])


def test_unexpected_errors_only_drop_their_replication():
    def experiment(seed, replication):
        if seed == 1:
            raise FloatingPointError("overflow in rollout")
        return pd.DataFrame([{"model": "hybrid", "split": "ood", "metric": "mse", "value": float(seed), "sem": None, "n": 1,
                              "replication": replication}])

    report = run_replications(experiment, 3)
    assert report.failures == [{"replication": 1, "seed": 1, "error": "FloatingPointError: overflow in rollout"}]
    assert sorted(report.raw["replication"]) == [0, 2]
    assert report.aggregate.iloc[0]["n"] == 2


def test_aggregate_of_nothing():
    assert list(aggregate_cells(pd.DataFrame(columns=REPORT_COLUMNS)).columns) == REPORT_COLUMNS


def test_write_report(tmp_path):
    cells = pd.DataFrame([{"extra": 1, "model": "hybrid", "split": "ood", "metric": "mse", "value": 0.5, "sem": None, "n": 1,
                           "replication": 0}])
    written = write_report(str(tmp_path), "reconstruction", "abc", cells, {"seed": 3},
                           {"trajectories": pd.DataFrame({"unit": [0], "mse": [0.5]})})
    assert os.path.basename(written["csv"]) == "reconstruction_abc.csv"
    assert os.path.isfile(tmp_path / "reconstruction_trajectories_abc.csv")
    assert list(pd.read_csv(written["csv"]).columns) == REPORT_COLUMNS + ["extra"]
    with open(written["json"], "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    assert payload["run_id"] == "abc"
    assert payload["seed"] == 3
    assert payload["cells"][0]["sem"] is None


def test_load_pk_test_sets(tmp_path, pk_cohort_dataset):
    DatasetStore.write(str(tmp_path), [pk_cohort_dataset], "npz")
    test_sets = load_test_sets(str(tmp_path), "pk")
    assert "train" not in test_sets
    assert sum(len(d) for d in test_sets.values()) == int((pk_cohort_dataset.records["split"] != "train").sum())
    assert all(len(d) > 0 for d in test_sets.values())
