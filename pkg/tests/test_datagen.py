import math
import numpy as np
import pandas as pd
import pytest
from hybridode.models.datagen import (Dataset, DatasetStore, DoseProtocol, PendulumSampleSpec, assign_splits, choose_dose,
                                      covariates_from_records, encoder_windows, gen_counterfactual_dataset,
                                      gen_encoder_pretraining_data, gen_pendulum_dataset, gen_pk_cohort, label_optimal_dose,
                                      label_optimal_doses, read_cohort_csv, split_label, STREAM_TEST_IN, STREAM_TRAIN)
from hybridode.models.mechanistic import PatientCovariates
from hybridode.utils.exceptions import ConfigurationError, DataFormatError, MissingArtifactError


def _patient(age=40.0, weight=70.0, height=175.0, sex="male", patient_id="P"):
    return PatientCovariates(age, sex, weight, height, False, patient_id)


def test_sample_spec_validation():
    with pytest.raises(ConfigurationError):
        PendulumSampleSpec(n=0)
    with pytest.raises(ConfigurationError):
        PendulumSampleSpec(n=3, mass=(4.0, 3.5))


def test_pendulum_dataset_layout():
    dataset = gen_pendulum_dataset(PendulumSampleSpec(n=5), [0, 1, 2, 3, 4], seed=0)
    assert dataset.states.shape == (5, 101, 2)
    assert dataset.eta.shape == (5, 101, 1)
    assert dataset.dt == pytest.approx(0.1)
    assert set(dataset.records["tau"]) <= {10.0, 10.5, 11.0, 11.5, 12.0}
    np.testing.assert_array_equal(dataset.eta[:, :, 0], np.repeat(dataset.records["tau"].to_numpy()[:, None], 101, axis=1))
    np.testing.assert_allclose(dataset.records["l_cm"], dataset.records["L"] / 2.0)
    np.testing.assert_array_equal(dataset.states[:, 0, 0], dataset.records["theta0"])


def test_pendulum_generation_is_deterministic():
    spec = PendulumSampleSpec(n=4)
    first = gen_pendulum_dataset(spec, [0, 1], seed=7)
    second = gen_pendulum_dataset(spec, [0, 1], seed=7)
    np.testing.assert_array_equal(first.states, second.states)
    other_stream = gen_pendulum_dataset(spec, [0, 1], seed=7, stream=STREAM_TEST_IN)
    assert not np.array_equal(first.states, other_stream.states)
    other_seed = gen_pendulum_dataset(spec, [0, 1], seed=8, stream=STREAM_TRAIN)
    assert not np.array_equal(first.states, other_seed.states)


def test_ood_torques():
    dataset = gen_pendulum_dataset(PendulumSampleSpec(n=20), [5, 6, 7], seed=1)
    assert set(dataset.records["tau"]) <= {12.5, 13.0, 13.5}


def test_counterfactual_copies_share_the_prefix():
    dataset = gen_counterfactual_dataset(PendulumSampleSpec(n=2), seed=0, t_max=4.0, t_switch=2.0, tau_after=(6.0, 8.0, 11.0))
    assert len(dataset) == 6
    switch = int(dataset.records["switch_step"].iloc[0])
    assert switch == 20
    first = dataset.records["sample"] == 0
    prefix = dataset.states[first.to_numpy(), :switch + 1]
    np.testing.assert_array_equal(prefix, np.repeat(prefix[:1], 3, axis=0))
    assert not np.array_equal(dataset.states[0, -1], dataset.states[1, -1])
    np.testing.assert_array_equal(dataset.eta[:3, switch, 0], [6.0, 8.0, 11.0])
    assert np.all(dataset.eta[:, :switch, 0] == 10.0)


def test_counterfactual_switch_must_lie_inside():
    with pytest.raises(ConfigurationError):
        gen_counterfactual_dataset(PendulumSampleSpec(n=1), seed=0, t_max=4.0, t_switch=5.0)


def test_encoder_data():
    dataset = gen_encoder_pretraining_data(PendulumSampleSpec(n=10), seed=0, zero_intervention=True)
    assert not np.any(dataset.eta)
    assert (dataset.records["split"] == "validation").sum() == 2
    assert dataset.records["m"].between(3.0, 5.0).all()
    assert dataset.records["l_cm"].between(1.5, 3.0).all()
    windows = encoder_windows(dataset, 100)
    assert windows.shape == (10, 100, 3)
    with pytest.raises(ConfigurationError):
        encoder_windows(dataset, 500)


def test_dose_protocol_grid_and_target():
    protocol = DoseProtocol()
    np.testing.assert_allclose(protocol.candidates(30.0), np.round(np.arange(1.5, 2.55, 0.1), 10))
    assert len(protocol.candidates(30.0)) == 11
    np.testing.assert_allclose(protocol.candidates(70.0), [1.0, 1.1, 1.2, 1.3, 1.4, 1.5])
    assert protocol.target_ce(18.0) == pytest.approx(4.0)
    assert protocol.target_ce(68.0) == pytest.approx(2.0)
    assert protocol.schedule(2.0, 70.0).sum() * protocol.dt == pytest.approx(140.0)
    with pytest.raises(ConfigurationError):
        DoseProtocol(young_grid=(2.0, 1.0, 0.1))


def test_choose_dose_prefers_closest_safe_candidate():
    decision = choose_dose([1.2, 1.0, 1.1], [30.0, 10.0, 20.0], [5.0, 3.0, 4.0], 4.5, DoseProtocol())
    assert decision.dose == 1.1
    assert decision.safe
    assert decision.max_ce == 4.0


def test_choose_dose_breaks_ties_towards_the_smaller_dose():
    decision = choose_dose([1.1, 1.0], [10.0, 10.0], [5.0, 4.0], 4.5, DoseProtocol())
    assert decision.dose == 1.0


def test_choose_dose_flags_unsafe_patients():
    decision = choose_dose([1.0, 1.1], [25.0, 30.0], [3.0, 4.0], 4.0, DoseProtocol(), patient_id="X")
    assert not decision.safe
    assert decision.dose is None
    assert decision.reason


def test_choose_dose_with_target_requirement():
    candidates, max_cp, max_ce = [1.0, 1.1, 1.2], [10.0, 11.0, 12.0], [4.45, 4.7, 5.0]
    assert choose_dose(candidates, max_cp, max_ce, 4.5, DoseProtocol()).dose == 1.0
    assert choose_dose(candidates, max_cp, max_ce, 4.5, DoseProtocol(require_target=True)).dose == 1.1
    below = choose_dose(candidates, max_cp, [3.0, 3.5, 3.9], 4.5, DoseProtocol(require_target=True))
    assert below.dose == 1.2


def test_oracle_labels(oracle_table):
    protocol = DoseProtocol()
    patients = [_patient(patient_id="A"), _patient(age=70.0, weight=90.0, sex="female", height=160.0, patient_id="B"),
                _patient(age=25.0, weight=60.0, patient_id="C")]
    decisions = label_optimal_doses(patients, protocol, oracle_table, threads=2)
    for patient, decision in zip(patients, decisions):
        single = label_optimal_dose(patient, protocol, oracle_table)
        assert decision.dose == single.dose
        assert decision.max_ce == pytest.approx(single.max_ce, rel=1e-12)
        assert decision.safe
        assert decision.dose in protocol.candidates(patient.age)
        assert decision.max_cp < protocol.cp_limit
        assert len(decision.candidates) == len(protocol.candidates(patient.age))


def test_split_labels():
    assert split_label(_patient(age=70.0, weight=100.0, height=170.0)) == "extreme_ood"
    assert split_label(_patient(age=70.0)) == "ood"
    assert split_label(_patient(weight=100.0, height=170.0)) == "ood"
    assert split_label(_patient()) is None


def test_assign_splits():
    cohort = [_patient(patient_id=str(i)) for i in range(10)] + [_patient(age=75.0, patient_id="old")]
    labels = assign_splits(cohort, seed=3, test_fraction=0.25)
    assert labels == assign_splits(cohort, seed=3, test_fraction=0.25)
    assert labels[-1] == "ood"
    assert labels.count("in_distribution") == math.ceil(0.25 * 10)
    assert labels.count("train") == 10 - math.ceil(0.25 * 10)


def test_synthetic_cohort():
    cohort = gen_pk_cohort("synthetic", 50, seed=2)
    assert len(cohort) == 50
    assert all(18.0 <= p.age <= 90.0 for p in cohort)
    assert all(16.0 - 1e-9 <= p.bmi <= 50.0 + 1e-9 for p in cohort)
    assert [p.weight for p in cohort] == [p.weight for p in gen_pk_cohort("synthetic", 50, seed=2)]
    with pytest.raises(ConfigurationError):
        gen_pk_cohort("synthetic", 0, seed=2)


def test_read_cohort_csv(tmp_path):
    path = tmp_path / "cohort.csv"
    path.write_text("patient_id,age,sex,weight,height,opioid\nA,40,M,70,175,yes\nB,66,female,80,160,0\n")
    cohort = read_cohort_csv(str(path))
    assert [p.sex for p in cohort] == ["male", "female"]
    assert [p.opioid for p in cohort] == [True, False]
    assert cohort[1].patient_id == "B"


def test_read_cohort_csv_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_cohort_csv(str(tmp_path / "missing.csv"))
    missing_column = tmp_path / "columns.csv"
    missing_column.write_text("age,sex,weight,height\n40,M,70,175\n")
    with pytest.raises(DataFormatError) as error:
        read_cohort_csv(str(missing_column))
    assert error.value.line == 1
    bad_row = tmp_path / "row.csv"
    bad_row.write_text("age,sex,weight,height,opioid\n40,M,70,175,0\n40,X,70,175,0\n")
    with pytest.raises(DataFormatError) as error:
        read_cohort_csv(str(bad_row))
    assert error.value.line == 3


def test_pk_dataset_applies_the_right_doses(pk_cohort_dataset):
    records = pk_cohort_dataset.records
    assert pk_cohort_dataset.states.shape == (len(records), 421, 4)
    assert pk_cohort_dataset.channels == ["cp", "ce", "a2", "a3"]
    tests = records[records["split"] != "train"]
    np.testing.assert_array_equal(tests["dose_applied"].to_numpy(), tests["dose_optimal"].to_numpy())
    protocol = DoseProtocol()
    for record in records.to_dict("records"):
        assert np.any(np.isclose(protocol.candidates(record["age"]), record["dose_applied"]))
    assert np.all(pk_cohort_dataset.states[..., 0] >= -1e-12)
    np.testing.assert_array_equal(pk_cohort_dataset.states[:, 0], 0.0)


def test_covariates_survive_records(pk_cohort_dataset):
    patients = covariates_from_records(pk_cohort_dataset.records)
    assert [p.patient_id for p in patients] == list(pk_cohort_dataset.records["patient_id"])
    assert patients[0].weight == pk_cohort_dataset.records["weight"].iloc[0]


@pytest.mark.parametrize("fmt", ["csv", "npz"])
def test_dataset_store_round_trip(tmp_path, fmt):
    dataset = gen_pendulum_dataset(PendulumSampleSpec(n=3, t_max=1.0), [0, 1], seed=0)
    manifest = DatasetStore.write(str(tmp_path), [dataset], fmt, {"seed": 0})
    assert manifest["datasets"]["train"]["n"] == 3
    loaded = DatasetStore.read(str(tmp_path), "train")
    np.testing.assert_array_equal(loaded.states, dataset.states)
    np.testing.assert_array_equal(loaded.eta, dataset.eta)
    np.testing.assert_array_equal(loaded.times, dataset.times)
    pd.testing.assert_frame_equal(loaded.records, dataset.records, check_dtype=False)


def test_dataset_store_detects_tampering(tmp_path):
    dataset = gen_pendulum_dataset(PendulumSampleSpec(n=2, t_max=1.0), [0], seed=0)
    DatasetStore.write(str(tmp_path), [dataset], "csv")
    with open(tmp_path / "train_records.csv", "a", encoding="utf-8") as handle:
        handle.write("\n")
    with pytest.raises(DataFormatError):
        DatasetStore.read(str(tmp_path), "train")
    DatasetStore.read(str(tmp_path), "train", verify=False)


def test_dataset_store_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        DatasetStore.read(str(tmp_path), "train")
    dataset = gen_pendulum_dataset(PendulumSampleSpec(n=2, t_max=1.0), [0], seed=0)
    DatasetStore.write(str(tmp_path), [dataset], "npz")
    with pytest.raises(MissingArtifactError):
        DatasetStore.read(str(tmp_path), "test_in")
    with pytest.raises(ConfigurationError):
        DatasetStore.write(str(tmp_path), [dataset], "parquet")
    (tmp_path / "manifest.json").write_text('{"format": "other"}')
    with pytest.raises(DataFormatError):
        DatasetStore.read(str(tmp_path), "train")


def test_dataset_select_and_where():
    dataset = gen_pendulum_dataset(PendulumSampleSpec(n=4, t_max=1.0), [0, 1], seed=0)
    subset = dataset.where("k", int(dataset.records["k"].iloc[0]), "subset")
    assert isinstance(subset, Dataset)
    assert subset.name == "subset"
    assert (subset.records["k"] == dataset.records["k"].iloc[0]).all()
    assert list(subset.records.index) == list(range(len(subset)))
