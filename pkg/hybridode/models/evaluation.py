"""
Experiments on trained models: reconstruction error on in-distribution and OOD test
sets, counterfactual torque-switch outcomes, model-based dose selection scored against
the oracle (APE, MAPE, MDAPE), seeded replication loops and report emission.

Every report is a long table with the columns of REPORT_COLUMNS plus a JSON summary.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence
import numpy as np
import pandas as pd
from hybridode.models.datagen import (DatasetStore, Dataset, DoseDecision, DoseProtocol, DOSE_CHUNK, TEST_GROUPS, assign_splits,
                                      candidate_plan, covariates_from_records, decisions_from_outcomes, gen_counterfactual_dataset,
                                      gen_encoder_pretraining_data, gen_pendulum_dataset, gen_pk_cohort, gen_pk_dataset,
                                      label_optimal_doses, PendulumSampleSpec, STREAM_TEST_IN, STREAM_TEST_OOD, STREAM_TRAIN)
from hybridode.models.hybrid import HybridModel, ModelKind, PkConditioning
from hybridode.models.mechanistic import PatientCovariates, PkParamTable
from hybridode.models.networks import EncoderNet
from hybridode.models.numerics import values_of
from hybridode.models.odeint import TimeGrid, integrate
from hybridode.models.training import (ENCODER_STREAM, TrainConfig, fit_model, load_encoder, model_conditioning, pretrain_encoder)
from hybridode.utils.exceptions import CheckpointError, IntegrationError
from hybridode.utils.helper import Helper
from hybridode.utils.logger import StructuredLogger

logger = StructuredLogger()

REPORT_COLUMNS = ["model", "split", "metric", "value", "sem", "n", "replication"]
# Units per rollout chunk handed to a worker thread.
ROLLOUT_CHUNK = 256


@dataclass
class ModelBundle:
    """
    A trained model with what it needs at inference time: the frozen encoder for
    pendulum models with estimated parameters, the prior table for PK models.
    """
    name: str
    model: HybridModel
    encoder: Optional[EncoderNet] = None
    prior: Optional[PkParamTable] = None

    def conditioning(self, dataset: Dataset):
        return model_conditioning(self.model, dataset, self.encoder, self.prior)


def load_bundle(path: str, config: Mapping[str, Any], encoder_path: Optional[str] = None) -> ModelBundle:
    """
    Loads a model checkpoint plus its encoder (pendulum) or prior table (PK).

    Raises:
        MissingArtifactError: If the checkpoint or the referenced encoder is missing.
        CheckpointError: If the referenced encoder no longer matches its recorded checksum.
    """
    logger.debug("Starting: load_bundle.", path=path)
    model = HybridModel.load(path)
    encoder = None
    prior = None
    if model.case == "pendulum" and model.beta_source == "encoder":
        reference = model.encoder_ref or {}
        encoder_file = encoder_path or reference.get("path")
        if not encoder_file:
            raise CheckpointError(f"Checkpoint {path} does not reference an encoder; pass --encoder.")
        if encoder_path is None and reference.get("checksum") and Helper.sha256_file(encoder_file) != reference["checksum"]:
            raise CheckpointError(f"Encoder {encoder_file} does not match the checksum recorded in {path}.")
        encoder = load_encoder(encoder_file)
    if model.case == "pk":
        prior = PkParamTable.load(config["pk"]["prior_table"])
    logger.debug("Finished: load_bundle.", kind=model.kind.value)
    return ModelBundle(model.kind.value, model, encoder, prior)


def _select(conditioning, index: np.ndarray):
    if isinstance(conditioning, PkConditioning):
        return conditioning.select(index)
    return np.asarray(conditioning)[index]


def _rollout_chunk(model: HybridModel, conditioning, x0_observed: np.ndarray, latent: Optional[np.ndarray], grid: TimeGrid,
                   eta: np.ndarray) -> np.ndarray:
    x0 = model.initial_state(x0_observed, conditioning, latent)
    states = integrate(model.rhs(conditioning), x0, grid, eta).states
    return values_of(model.observe(states, conditioning))


def rollout_observed(model: HybridModel, conditioning, x0_observed: np.ndarray, grid: TimeGrid, eta: np.ndarray,
                     latent: Optional[np.ndarray] = None, threads: int = 1) -> Dict[str, Any]:
    """
    Rolls the model out for every unit and returns observed trajectories (n, N+1, 2).
    A chunk that diverges is retried unit by unit; diverged units come back as NaN and
    are listed under `diverged`.
    """
    n = x0_observed.shape[0]
    chunks = Helper.chunk(np.arange(n), ROLLOUT_CHUNK)

    def run(index: np.ndarray) -> np.ndarray:
        part_latent = None if latent is None else latent[index]
        try:
            return _rollout_chunk(model, _select(conditioning, index), x0_observed[index], part_latent, grid, eta[index])
        except IntegrationError:
            out = np.full((index.size, grid.num_points, 2), np.nan)
            for row, unit in enumerate(index):
                single = np.array([unit])
                try:
                    out[row] = _rollout_chunk(model, _select(conditioning, single), x0_observed[single],
                                              None if latent is None else latent[single], grid, eta[single])[0]
                except IntegrationError:
                    logger.warning("Rollout diverged; trajectory excluded.", unit=int(unit))
            return out

    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
        parts = list(executor.map(run, chunks))
    observed = np.concatenate(parts, axis=0) if parts else np.empty((0, grid.num_points, 2))
    diverged = np.flatnonzero(~np.all(np.isfinite(observed), axis=(1, 2)))
    return {"observed": observed, "diverged": diverged}


def trajectory_mse(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """
    Per-unit mean over time of the squared error summed over channels.
    """
    return np.mean(np.sum((pred - target) ** 2, axis=-1), axis=-1)


def _cell(model: str, split: str, metric: str, values: Sequence[float], replication: int) -> Dict[str, Any]:
    values = np.asarray(list(values), dtype=np.float64)
    return {"model": model, "split": split, "metric": metric, "value": float(np.mean(values)) if values.size else None,
            "sem": Helper.sem(values), "n": int(values.size), "replication": replication}


@dataclass
class ReconReport:
    """
    Reconstruction errors: one row per (model, split, unit) in `trajectories`, mean MSE
    per (model, split) in `cells`, with excluded-trajectory counts.
    """
    trajectories: pd.DataFrame
    cells: pd.DataFrame


def _full_horizon(model: HybridModel, dataset: Dataset, conditioning, threads: int, start: int = 0) -> Dict[str, Any]:
    grid = TimeGrid(float(dataset.times[start]), dataset.dt, dataset.num_steps - start)
    latent = dataset.states[:, start, 2:4] if dataset.states.shape[2] > 2 else None
    result = rollout_observed(model, conditioning, dataset.observed[:, start], grid, dataset.eta[:, start:], latent, threads)
    result["target"] = dataset.observed[:, start:]
    return result


def eval_reconstruction(bundles: Sequence[ModelBundle], test_sets: Mapping[str, Dataset], threads: int = 1,
                        replication: int = 0) -> ReconReport:
    """
    Rolls every model out over the full horizon of every test trajectory from its first
    state (pendulum parameters estimated from the trajectory prefix where applicable) and
    reports the mean MSE per model and split.
    """
    logger.debug("Starting: eval_reconstruction.", models=len(bundles), splits=",".join(test_sets))
    rows, cells = [], []
    for bundle in bundles:
        for split, dataset in test_sets.items():
            result = _full_horizon(bundle.model, dataset, bundle.conditioning(dataset), threads)
            mse = trajectory_mse(result["observed"], result["target"])
            kept = np.isfinite(mse)
            rows.append(pd.DataFrame({"model": bundle.name, "split": split, "unit": np.arange(len(dataset)), "mse": mse,
                                      "replication": replication}))
            cells.append(_cell(bundle.name, split, "mse", mse[kept], replication))
            cells.append({"model": bundle.name, "split": split, "metric": "excluded", "value": float(np.sum(~kept)), "sem": None,
                          "n": len(dataset), "replication": replication})
            logger.info("Reconstruction evaluated.", model=bundle.name, split=split, mse=cells[-2]["value"], excluded=int(np.sum(~kept)))
    logger.debug("Finished: eval_reconstruction.")
    return ReconReport(pd.concat(rows, ignore_index=True), pd.DataFrame(cells, columns=REPORT_COLUMNS))


def distance_from_training(value: float, training_values: Sequence[float]) -> float:
    return float(min(abs(value - t) for t in training_values))


def eval_counterfactual_outcomes(bundles: Sequence[ModelBundle], dataset: Dataset, training_taus: Sequence[float],
                                 threads: int = 1, replication: int = 0) -> pd.DataFrame:
    """
    Torque-switch counterfactuals: parameters are estimated from the pre-switch prefix,
    each model starts from the true state at the switch time and is scored on the
    post-switch trajectory. One row per (model, tau_after) with mean MSE, SEM and the
    distance of tau_after from the training torques.
    """
    logger.debug("Starting: eval_counterfactual_outcomes.", units=len(dataset))
    switch = int(dataset.records["switch_step"].iloc[0])
    after = dataset.records["tau_after"].to_numpy(dtype=np.float64)
    rows = []
    for bundle in bundles:
        result = _full_horizon(bundle.model, dataset, bundle.conditioning(dataset), threads, start=switch)
        mse = trajectory_mse(result["observed"], result["target"])
        for tau in sorted(set(after.tolist())):
            values = mse[(after == tau) & np.isfinite(mse)]
            cell = _cell(bundle.name, f"tau={tau:g}", "cf_mse", values, replication)
            cell["tau_after"] = tau
            cell["distance_from_training"] = distance_from_training(tau, training_taus)
            rows.append(cell)
    logger.debug("Finished: eval_counterfactual_outcomes.")
    return pd.DataFrame(rows, columns=REPORT_COLUMNS + ["tau_after", "distance_from_training"])


def _model_dose_chunk(bundle: ModelBundle, patients: Sequence[PatientCovariates], protocol: DoseProtocol) -> List[DoseDecision]:
    owners, doses, schedules = candidate_plan(patients, protocol)
    base = PkConditioning.from_patients([bundle.prior.params(p) for p in patients], patients)
    conditioning = base.select(owners)
    model = bundle.model
    x0 = np.zeros((owners.size, model.state_dim))
    states = integrate(model.rhs(conditioning), x0, protocol.grid(), schedules).states
    observed = values_of(model.observe(states, conditioning))
    return decisions_from_outcomes(patients, protocol, owners, doses, observed[..., 0].max(axis=1), observed[..., 1].max(axis=1))


def select_dose(bundle: ModelBundle, cov: PatientCovariates, protocol: DoseProtocol) -> DoseDecision:
    """
    Simulates every candidate dose under the model from a drug-free state and applies
    the dose rule: safety, then closeness of the peak Ce to the target, ties to the
    smaller dose. Flags the decision instead of raising when nothing is safe.
    """
    return _model_dose_chunk(bundle, [cov], protocol)[0]


def select_doses(bundle: ModelBundle, patients: Sequence[PatientCovariates], protocol: DoseProtocol,
                 threads: int = 1) -> List[DoseDecision]:
    logger.debug("Starting: select_doses.", model=bundle.name, patients=len(patients))
    chunks = Helper.chunk(list(patients), DOSE_CHUNK)
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
        results = list(executor.map(lambda chunk: _model_dose_chunk(bundle, chunk, protocol), chunks))
    logger.debug("Finished: select_doses.")
    return [decision for chunk in results for decision in chunk]


def absolute_performance_error(selected: float, optimal: float) -> float:
    return abs(selected - optimal) / optimal * 100.0


@dataclass
class DoseReport:
    """
    Per-patient decisions (`patients`) and per (model, group) MAPE, MDAPE, safety
    violations and unsafe flags (`cells`).
    """
    patients: pd.DataFrame
    cells: pd.DataFrame


def dose_report(bundles: Sequence[ModelBundle], dataset: Dataset, protocol: DoseProtocol, oracle: PkParamTable,
                threads: int = 1, replication: int = 0) -> DoseReport:
    """
    Scores model-selected doses against the oracle-optimal dose on every test patient.

    A selection is a safety violation when the oracle's peak Cp at the selected dose
    reaches the limit. Patients the model flags as having no safe dose are counted and
    left out of the APE statistics.
    """
    logger.debug("Starting: dose_report.", models=len(bundles))
    records = dataset.records[dataset.records["split"] != "train"].reset_index(drop=True)
    patients = covariates_from_records(records)
    oracle_decisions = label_optimal_doses(patients, protocol, oracle, threads)
    rows, cells = [], []
    for bundle in bundles:
        decisions = select_doses(bundle, patients, protocol, threads)
        for record, decision, truth in zip(records.to_dict("records"), decisions, oracle_decisions):
            violation = None
            ape = None
            if decision.safe and truth.safe:
                ape = absolute_performance_error(decision.dose, truth.dose)
                index = int(np.argmin(np.abs(np.asarray(truth.candidates) - decision.dose)))
                violation = truth.candidate_max_cp[index] >= protocol.cp_limit
            rows.append({"model": bundle.name, "patient_id": record["patient_id"], "split": record["split"],
                         "selected_dose": decision.dose, "optimal_dose": truth.dose, "predicted_max_ce": decision.max_ce,
                         "predicted_max_cp": decision.max_cp, "safe": decision.safe, "ape": ape, "violation": violation,
                         "replication": replication})
    patients_frame = pd.DataFrame(rows)
    for bundle in bundles:
        for group in TEST_GROUPS:
            subset = patients_frame[(patients_frame["model"] == bundle.name) & (patients_frame["split"] == group)]
            ape = subset["ape"].dropna().to_numpy(dtype=np.float64)
            cells.append(_cell(bundle.name, group, "mape", ape, replication))
            cells.append({"model": bundle.name, "split": group, "metric": "mdape", "value": float(np.median(ape)) if ape.size else None,
                          "sem": None, "n": int(ape.size), "replication": replication})
            cells.append({"model": bundle.name, "split": group, "metric": "violations",
                          "value": float(subset["violation"].eq(True).sum()), "sem": None, "n": int(len(subset)),
                          "replication": replication})
            cells.append({"model": bundle.name, "split": group, "metric": "unsafe_flags",
                          "value": float((~subset["safe"].astype(bool)).sum()), "sem": None, "n": int(len(subset)),
                          "replication": replication})
    logger.debug("Finished: dose_report.")
    return DoseReport(patients_frame, pd.DataFrame(cells, columns=REPORT_COLUMNS))


@dataclass
class ReplicationReport:
    """
    Raw per-replication cells, the aggregate (mean and SEM across replications per
    model, split and metric) and the replications that failed.
    """
    raw: pd.DataFrame
    aggregate: pd.DataFrame
    failures: List[Dict[str, Any]] = field(default_factory=list)


def aggregate_cells(raw: pd.DataFrame) -> pd.DataFrame:
    rows = []
    if raw.empty:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    for (model, split, metric), group in raw.groupby(["model", "split", "metric"], sort=True):
        values = group["value"].dropna().to_numpy(dtype=np.float64)
        rows.append({"model": model, "split": split, "metric": metric, "value": float(np.mean(values)) if values.size else None,
                     "sem": Helper.sem(values), "n": int(values.size), "replication": "all"})
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def run_replications(experiment: Callable[[int, int], pd.DataFrame], n_reps: int, seeds: Optional[Sequence[int]] = None) -> ReplicationReport:
    """
    Runs `experiment(seed, replication)` per replication and aggregates the returned
    cells. A replication that raises is recorded and excluded.

    Args:
        experiment: Returns a frame with REPORT_COLUMNS for one seed.
        n_reps (int): Number of replications.
        seeds: Seeds per replication; defaults to 0..n_reps-1.
    """
    logger.debug("Starting: run_replications.", n_reps=n_reps)
    seeds = list(seeds) if seeds is not None else list(range(int(n_reps)))
    if len(seeds) != int(n_reps):
        raise ValueError(f"Got {len(seeds)} seeds for {n_reps} replications.")
    frames, failures = [], []
    for replication, seed in enumerate(seeds):
        logger.info("Replication started.", replication=replication, seed=seed)
        try:
            frame = experiment(int(seed), replication)
        except Exception as exception_error:
            error = f"{type(exception_error).__name__}: {exception_error}"
            logger.warning("Replication failed; excluded.", replication=replication, seed=seed, error=error)
            failures.append({"replication": replication, "seed": int(seed), "error": error})
            continue
        frame = frame.copy()
        frame["replication"] = replication
        frames.append(frame)
    raw = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=REPORT_COLUMNS)
    logger.debug("Finished: run_replications.", failures=len(failures))
    return ReplicationReport(raw, aggregate_cells(raw), failures)


def _seeded(config: Mapping[str, Any], seed: int) -> Dict[str, Any]:
    resolved = {key: (dict(value) if isinstance(value, dict) else value) for key, value in config.items()}
    resolved["run"] = dict(config["run"], seed=int(seed))
    return resolved


def pendulum_experiment(config: Mapping[str, Any]) -> Callable[[int, int], pd.DataFrame]:
    """
    Full in-memory pendulum pipeline for one seed: data, encoder pretraining, the three
    models, reconstruction and counterfactual evaluation.
    """
    def run(seed: int, replication: int) -> pd.DataFrame:
        resolved = _seeded(config, seed)
        section = resolved["pendulum"]
        threads = int(resolved["run"]["threads"])
        train_spec = PendulumSampleSpec.from_config(resolved, int(resolved["data"]["n"]))
        test_spec = PendulumSampleSpec.from_config(resolved, int(resolved["data"]["n_test"]))
        encoder_section = section["encoder_data"]
        cf = section["counterfactual"]

        train = gen_pendulum_dataset(train_spec, section["train_k"], seed, "train", STREAM_TRAIN)
        tests = {"in_distribution": gen_pendulum_dataset(test_spec, section["train_k"], seed, "test_in", STREAM_TEST_IN),
                 "ood": gen_pendulum_dataset(test_spec, section["ood_k"], seed, "test_ood", STREAM_TEST_OOD)}
        counterfactual = gen_counterfactual_dataset(test_spec, seed, float(cf["t_max"]), float(cf["t_switch"]),
                                                    float(cf["tau_before"]), cf["tau_after"])
        encoder = None
        if section.get("beta_source", "encoder") == "encoder":
            pretrain = gen_encoder_pretraining_data(PendulumSampleSpec.from_config(resolved, int(encoder_section["n"])), seed,
                                                    encoder_section["mass"], encoder_section["l_cm"], section["train_k"],
                                                    bool(encoder_section["zero_intervention"]),
                                                    float(encoder_section["validation_fraction"]))
            encoder, _ = pretrain_encoder(pretrain, TrainConfig.from_dict(resolved["encoder"], seed),
                                          int(resolved["model"]["pendulum"]["encoder"]["hidden_dim"]), int(section["encoder_window"]),
                                          np.random.default_rng([seed, ENCODER_STREAM]))

        bundles = []
        for kind in resolved["eval"]["models"]:
            model, _ = fit_model(kind, resolved, train, encoder)
            bundles.append(ModelBundle(ModelKind.parse(kind).value, model, encoder))
        recon = eval_reconstruction(bundles, tests, threads, replication)
        training_taus = [float(section["tau_base"]) + float(section["tau_step"]) * k for k in section["train_k"]]
        cf_cells = eval_counterfactual_outcomes(bundles, counterfactual, training_taus, threads, replication)
        return pd.concat([recon.cells, cf_cells[REPORT_COLUMNS]], ignore_index=True)
    return run


def pk_experiment(config: Mapping[str, Any]) -> Callable[[int, int], pd.DataFrame]:
    """
    Full in-memory PK pipeline for one seed: cohort, oracle labels, the three models and
    the dose-selection report.
    """
    def run(seed: int, replication: int) -> pd.DataFrame:
        resolved = _seeded(config, seed)
        pk = resolved["pk"]
        threads = int(resolved["run"]["threads"])
        protocol = DoseProtocol.from_config(resolved)
        oracle = PkParamTable.load(pk["oracle_table"])
        prior = PkParamTable.load(pk["prior_table"])
        source = pk["cohort"].get("csv_path") if resolved["data"].get("source") == "csv" else "synthetic"
        cohort = gen_pk_cohort(source, int(resolved["data"]["n"]), seed, pk["cohort"])
        splits = assign_splits(cohort, seed, float(pk["age_limit"]), float(pk["bmi_limit"]), float(pk["test_fraction"]))
        decisions = label_optimal_doses(cohort, protocol, oracle, threads)
        dataset, _ = gen_pk_dataset(cohort, splits, decisions, protocol, oracle, seed)
        train = dataset.where("split", "train", "train")

        bundles = []
        for kind in resolved["eval"]["models"]:
            model, _ = fit_model(kind, resolved, train, prior=prior)
            bundles.append(ModelBundle(ModelKind.parse(kind).value, model, prior=prior))
        return dose_report(bundles, dataset, protocol, oracle, threads, replication).cells
    return run


def write_report(directory: str, name: str, run_id: str, cells: pd.DataFrame, summary: Optional[Dict[str, Any]] = None,
                 extra: Optional[Dict[str, pd.DataFrame]] = None) -> Dict[str, str]:
    """
    Writes `<name>_<run_id>.csv` (REPORT_COLUMNS first) and `<name>_<run_id>.json`;
    `extra` frames are written as `<name>_<key>_<run_id>.csv`.
    """
    logger.debug("Starting: write_report.", directory=directory, name=name)
    ordered = cells[REPORT_COLUMNS + [c for c in cells.columns if c not in REPORT_COLUMNS]]
    csv_path = os.path.join(directory, f"{name}_{run_id}.csv")
    json_path = os.path.join(directory, f"{name}_{run_id}.json")
    Helper.write_csv(csv_path, ordered)
    payload = {"run_id": run_id, "report": name, "cells": ordered.astype(object).where(ordered.notna(), None).to_dict("records")}
    payload.update(summary or {})
    Helper.write_json(json_path, payload)
    written = {"csv": csv_path, "json": json_path}
    for key, frame in (extra or {}).items():
        path = os.path.join(directory, f"{name}_{key}_{run_id}.csv")
        Helper.write_csv(path, frame)
        written[key] = path
    logger.debug("Finished: write_report.")
    return written


def load_test_sets(data_dir: str, case: str) -> Dict[str, Dataset]:
    """
    Test sets by split name from a generated dataset directory.
    """
    if case == "pendulum":
        return {"in_distribution": DatasetStore.read(data_dir, "test_in"), "ood": DatasetStore.read(data_dir, "test_ood")}
    cohort = DatasetStore.read(data_dir, "cohort")
    groups = {group: cohort.where("split", group, group) for group in TEST_GROUPS}
    return {group: dataset for group, dataset in groups.items() if len(dataset)}
