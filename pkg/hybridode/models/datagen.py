"""
Dataset generation for both case studies: cylinder-pendulum training and test sets, the
counterfactual torque-switch set, point-mass simulations for encoder pretraining, PK
patient cohorts with split labels, oracle dose labels, and the on-disk dataset format
(manifest plus CSV or npz trajectories).
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from packaging import version
from scipy.stats import truncnorm
import hybridode.utils.version
from hybridode.models.mechanistic import (CylinderPendulum, PatientCovariates, PendulumParams, PkModel, PkParams, PkParamTable,
                                          PointMassPendulum, bolus_schedule)
from hybridode.models.odeint import TimeGrid, integrate
from hybridode.utils.config_parser import DEFAULT_CONFIG
from hybridode.utils.exceptions import ConfigurationError, DataFormatError, MissingArtifactError
from hybridode.utils.helper import Helper
from hybridode.utils.logger import StructuredLogger

logger = StructuredLogger()

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "hybridode-dataset"
PENDULUM_CHANNELS = ["theta", "omega"]
PK_CHANNELS = ["cp", "ce", "a2", "a3"]
SPLIT_LABELS = ("train", "in_distribution", "ood", "extreme_ood")
TEST_GROUPS = ("in_distribution", "ood", "extreme_ood")
# Patients per vectorised candidate-dose simulation.
DOSE_CHUNK = 100

# Independent random streams derived from the run seed.
STREAM_TRAIN, STREAM_TEST_IN, STREAM_TEST_OOD, STREAM_COUNTERFACTUAL, STREAM_ENCODER, STREAM_COHORT, STREAM_SPLIT, STREAM_DOSE = range(8)


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


def _check_range(name: str, bounds: Sequence[float]) -> Tuple[float, float]:
    low, high = float(bounds[0]), float(bounds[1])
    if not high > low:
        raise ConfigurationError(f"Range {name} must satisfy low < high, got [{low}, {high}].")
    return low, high


@dataclass
class Dataset:
    """
    A batch of trajectories on one shared grid plus one record row per unit.

    `states` holds (n, N+1, k) with the observed channels first (theta, omega for the
    pendulum; cp, ce for PK, followed by the latent a2, a3 of the generating model);
    `eta` holds (n, N+1, 1).
    """
    name: str
    case: str
    channels: List[str]
    times: np.ndarray
    states: np.ndarray
    eta: np.ndarray
    records: pd.DataFrame

    def __len__(self) -> int:
        return int(self.states.shape[0])

    @property
    def observed(self) -> np.ndarray:
        return self.states[..., :2]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def num_steps(self) -> int:
        return int(self.times.shape[0]) - 1

    def select(self, indices, name: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(name or self.name, self.case, list(self.channels), self.times, self.states[indices], self.eta[indices],
                       self.records.iloc[indices].reset_index(drop=True))

    def where(self, column: str, value: Any, name: Optional[str] = None) -> "Dataset":
        return self.select(np.flatnonzero(self.records[column].to_numpy() == value), name)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"times": self.times, "states": self.states, "eta": self.eta}


@dataclass
class PendulumSampleSpec:
    """
    Sampling ranges for cylinder-pendulum datasets.

    Raises:
        ConfigurationError: On a degenerate range or a non-positive count.
    """
    n: int
    mass: Tuple[float, float] = (3.5, 4.0)
    length: Tuple[float, float] = (4.0, 4.5)
    radius: Tuple[float, float] = (2.0, 2.5)
    theta0: Tuple[float, float] = (-0.2, 0.2)
    omega0: Tuple[float, float] = (-0.1, 0.1)
    dt: float = 0.1
    t_max: float = 10.0
    g: float = 9.81
    tau_base: float = 10.0
    tau_step: float = 0.5

    def __post_init__(self):
        if int(self.n) < 1:
            raise ConfigurationError(f"Dataset size must be positive, got {self.n}.")
        for name in ("mass", "length", "radius", "theta0", "omega0"):
            setattr(self, name, _check_range(name, getattr(self, name)))

    @classmethod
    def from_config(cls, config: Dict[str, Any], n: int) -> "PendulumSampleSpec":
        section = config["pendulum"]
        return cls(n=int(n), mass=section["mass"], length=section["length"], radius=section["radius"],
                   theta0=section["theta0"], omega0=section["omega0"], dt=float(section["dt"]), t_max=float(section["t_max"]),
                   g=float(section["g"]), tau_base=float(section["tau_base"]), tau_step=float(section["tau_step"]))

    def grid(self, t_max: Optional[float] = None) -> TimeGrid:
        return TimeGrid.from_horizon(self.t_max if t_max is None else t_max, self.dt)

    def torque(self, k) -> np.ndarray:
        return self.tau_base + self.tau_step * np.asarray(k, dtype=np.float64)


def _sample_pendulums(spec: PendulumSampleSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    n = spec.n
    return {
        "m": rng.uniform(*spec.mass, size=n),
        "L": rng.uniform(*spec.length, size=n),
        "R": rng.uniform(*spec.radius, size=n),
        "theta0": rng.uniform(*spec.theta0, size=n),
        "omega0": rng.uniform(*spec.omega0, size=n),
    }


def gen_pendulum_dataset(spec: PendulumSampleSpec, k_values: Sequence[int], seed: int, name: str = "train",
                         stream: int = STREAM_TRAIN) -> Dataset:
    """
    Simulates cylinder pendulums under a constant torque tau = tau_base + tau_step * k,
    with k drawn uniformly from `k_values`.

    Args:
        spec (PendulumSampleSpec): Sampling ranges and grid.
        k_values (Sequence[int]): Allowed intervention indices (train: 0..4, ood: 5..7).
        seed (int): Run seed.
        name (str): Dataset name.
        stream (int): Random stream index, so that each dataset draws independently.

    Returns:
        Dataset: Records carry the true (m, L, R), l_cm = L/2, k and tau for diagnostics.

    Raises:
        IntegrationError: If a trajectory becomes non-finite.
    """
    logger.debug("Starting: gen_pendulum_dataset.", name=name, n=spec.n)
    rng = stream_rng(seed, stream)
    draws = _sample_pendulums(spec, rng)
    k = rng.choice(np.asarray(list(k_values), dtype=np.int64), size=spec.n)
    tau = spec.torque(k)

    grid = spec.grid()
    params = PendulumParams.cylinder(draws["m"], draws["L"], draws["R"], spec.g)
    eta = np.repeat(tau[:, None, None], grid.num_points, axis=1)
    x0 = np.column_stack([draws["theta0"], draws["omega0"]])
    trajectory = integrate(CylinderPendulum(params), x0, grid, eta)

    records = pd.DataFrame({
        "unit": np.arange(spec.n),
        "m": draws["m"], "L": draws["L"], "R": draws["R"], "l_cm": draws["L"] / 2.0,
        "k": k, "tau": tau, "theta0": draws["theta0"], "omega0": draws["omega0"],
    })
    logger.debug("Finished: gen_pendulum_dataset.", name=name)
    return Dataset(name, "pendulum", list(PENDULUM_CHANNELS), grid.points(), trajectory.states, eta, records)


def gen_counterfactual_dataset(spec: PendulumSampleSpec, seed: int, t_max: float = 20.0, t_switch: float = 10.0,
                               tau_before: float = 10.0, tau_after: Sequence[float] = (6.0, 7.0, 8.0, 9.0, 10.0, 11.0)) -> Dataset:
    """
    Torque-switch counterfactuals: every sampled pendulum is simulated once per value in
    `tau_after`, with `tau_before` applied on [0, t_switch) and the new value afterwards.
    The pre-switch part is identical across the copies of one pendulum.
    """
    logger.debug("Starting: gen_counterfactual_dataset.", n=spec.n, tau_after=list(tau_after))
    rng = stream_rng(seed, STREAM_COUNTERFACTUAL)
    draws = _sample_pendulums(spec, rng)
    grid = spec.grid(t_max)
    switch_step = int(round(t_switch / spec.dt))
    if not 0 < switch_step < grid.num_steps:
        raise ConfigurationError(f"Switch time {t_switch} s must lie inside the {t_max} s horizon.")

    values = np.asarray(list(tau_after), dtype=np.float64)
    copies = len(values)
    sample = np.repeat(np.arange(spec.n), copies)
    after = np.tile(values, spec.n)
    eta = np.empty((sample.size, grid.num_points, 1))
    eta[:, :switch_step, 0] = tau_before
    eta[:, switch_step:, 0] = after[:, None]

    params = PendulumParams.cylinder(draws["m"][sample], draws["L"][sample], draws["R"][sample], spec.g)
    x0 = np.column_stack([draws["theta0"][sample], draws["omega0"][sample]])
    trajectory = integrate(CylinderPendulum(params), x0, grid, eta)

    records = pd.DataFrame({
        "unit": np.arange(sample.size), "sample": sample,
        "m": draws["m"][sample], "L": draws["L"][sample], "R": draws["R"][sample], "l_cm": draws["L"][sample] / 2.0,
        "tau_before": np.full(sample.size, float(tau_before)), "tau_after": after,
        "switch_step": np.full(sample.size, switch_step),
    })
    logger.debug("Finished: gen_counterfactual_dataset.", units=int(sample.size))
    return Dataset("counterfactual", "pendulum", list(PENDULUM_CHANNELS), grid.points(), trajectory.states, eta, records)


def gen_encoder_pretraining_data(spec: PendulumSampleSpec, seed: int, mass: Sequence[float] = (3.0, 5.0),
                                 l_cm: Sequence[float] = (1.5, 3.0), k_values: Sequence[int] = (0, 1, 2, 3, 4),
                                 zero_intervention: bool = False, validation_fraction: float = 0.2) -> Dataset:
    """
    Labelled simulations of the point-mass prior for encoder pretraining. Labels are
    (m, l_cm); the torque follows the training distribution unless `zero_intervention`.
    Records carry a `split` column with a seeded train/validation assignment.
    """
    logger.debug("Starting: gen_encoder_pretraining_data.", n=spec.n, zero_intervention=zero_intervention)
    mass = _check_range("encoder mass", mass)
    l_cm = _check_range("encoder l_cm", l_cm)
    rng = stream_rng(seed, STREAM_ENCODER)
    n = spec.n
    m = rng.uniform(*mass, size=n)
    length = rng.uniform(*l_cm, size=n)
    theta0 = rng.uniform(*spec.theta0, size=n)
    omega0 = rng.uniform(*spec.omega0, size=n)
    tau = np.zeros(n) if zero_intervention else spec.torque(rng.choice(np.asarray(list(k_values)), size=n))

    grid = spec.grid()
    eta = np.repeat(tau[:, None, None], grid.num_points, axis=1)
    trajectory = integrate(PointMassPendulum(PendulumParams.point_mass(m, length, spec.g)),
                           np.column_stack([theta0, omega0]), grid, eta)

    order = rng.permutation(n)
    n_validation = int(round(validation_fraction * n))
    split = np.full(n, "train", dtype=object)
    split[order[:n_validation]] = "validation"
    records = pd.DataFrame({"unit": np.arange(n), "m": m, "l_cm": length, "tau": tau,
                            "theta0": theta0, "omega0": omega0, "split": split})
    logger.debug("Finished: gen_encoder_pretraining_data.", validation=n_validation)
    return Dataset("encoder_pretrain", "pendulum", list(PENDULUM_CHANNELS), grid.points(), trajectory.states, eta, records)


def encoder_windows(dataset: Dataset, window: int) -> np.ndarray:
    """
    Encoder input (n, window, 3): the first `window` points of (theta, omega, tau).

    Raises:
        ConfigurationError: If the trajectories are shorter than the window.
    """
    if dataset.states.shape[1] < window:
        raise ConfigurationError(f"Encoder needs {window} points, dataset {dataset.name} has {dataset.states.shape[1]}.")
    return np.concatenate([dataset.states[:, :window, :2], dataset.eta[:, :window, :1]], axis=-1)


@dataclass
class DoseProtocol:
    """
    Bolus protocol, age-dependent candidate grids and the Ce target rule
    Ce*(age) = intercept - slope * (age - age_ref).
    """
    bolus_size: float = 30.0
    bolus_interval: float = 10.0
    age_split: float = 55.0
    young_grid: Tuple[float, float, float] = (1.5, 2.5, 0.1)
    old_grid: Tuple[float, float, float] = (1.0, 1.5, 0.1)
    cp_limit: float = 25.0
    target_intercept: float = 4.0
    target_slope: float = 0.04
    target_age_ref: float = 18.0
    horizon: float = 210.0
    dt: float = 0.5
    require_target: bool = False

    def __post_init__(self):
        if not (self.bolus_size > 0 and self.bolus_interval > 0 and self.cp_limit > 0):
            raise ConfigurationError("Bolus size, bolus interval and Cp limit must be positive.")
        for name in ("young_grid", "old_grid"):
            low, high, step = (float(v) for v in getattr(self, name))
            if not (0 < low <= high and step > 0):
                raise ConfigurationError(f"Dose grid {name} must satisfy 0 < low <= high with a positive step.")

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "DoseProtocol":
        pk = config["pk"]
        return cls(bolus_size=float(pk["bolus_size"]), bolus_interval=float(pk["bolus_interval"]), age_split=float(pk["age_split"]),
                   young_grid=tuple(pk["young_grid"]), old_grid=tuple(pk["old_grid"]), cp_limit=float(pk["cp_limit"]),
                   target_intercept=float(pk["target_intercept"]), target_slope=float(pk["target_slope"]),
                   target_age_ref=float(pk["target_age_ref"]), horizon=float(pk["horizon"]), dt=float(pk["dt"]),
                   require_target=bool(pk.get("require_target", False)))

    def grid(self) -> TimeGrid:
        return TimeGrid.from_horizon(self.horizon, self.dt)

    def candidates(self, age: float) -> np.ndarray:
        """
        Candidate doses in mg/kg, ascending.
        """
        low, high, step = self.young_grid if age < self.age_split else self.old_grid
        count = int(math.floor((high - low) / step + 1e-9)) + 1
        return np.round(low + step * np.arange(count), 10)

    def target_ce(self, age: float) -> float:
        return self.target_intercept - self.target_slope * (age - self.target_age_ref)

    def schedule(self, dose_per_kg: float, weight: float) -> np.ndarray:
        return bolus_schedule(dose_per_kg * weight, self.grid(), self.bolus_size, self.bolus_interval)


@dataclass
class DoseDecision:
    """
    Outcome of a dose search for one patient. `dose` is None when no candidate is safe.
    """
    patient_id: Optional[str]
    dose: Optional[float]
    target_ce: float
    max_ce: Optional[float]
    max_cp: Optional[float]
    safe: bool
    reason: str = ""
    candidates: List[float] = field(default_factory=list)
    candidate_max_ce: List[float] = field(default_factory=list)
    candidate_max_cp: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"patient_id": self.patient_id, "dose": self.dose, "target_ce": self.target_ce, "max_ce": self.max_ce,
                "max_cp": self.max_cp, "safe": self.safe, "reason": self.reason}


def choose_dose(candidates: Sequence[float], max_cp: Sequence[float], max_ce: Sequence[float], target: float,
                protocol: DoseProtocol, patient_id: Optional[str] = None) -> DoseDecision:
    """
    Safety first (max Cp below the limit), optionally target achievement, then the
    smallest |max Ce - target|; ties go to the smaller dose.
    """
    candidates = [float(c) for c in candidates]
    max_cp = [float(v) for v in max_cp]
    max_ce = [float(v) for v in max_ce]
    order = sorted(range(len(candidates)), key=lambda i: candidates[i])
    safe = [i for i in order if max_cp[i] < protocol.cp_limit]
    if not safe:
        return DoseDecision(patient_id, None, target, None, None, False, "no safe candidate", candidates, max_ce, max_cp)
    if protocol.require_target:
        reaching = [i for i in safe if max_ce[i] >= target]
        safe = reaching or safe

    best = safe[0]
    for index in safe[1:]:
        if abs(max_ce[index] - target) < abs(max_ce[best] - target):
            best = index
    return DoseDecision(patient_id, candidates[best], target, max_ce[best], max_cp[best], True, "", candidates, max_ce, max_cp)


def candidate_plan(patients: Sequence[PatientCovariates], protocol: DoseProtocol) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Expands patients into (patient index, dose) units with their bolus schedules.

    Returns:
        Tuple: patient index (M,), dose in mg/kg (M,), schedules (M, N+1, 1).
    """
    owners, doses, schedules = [], [], []
    for index, patient in enumerate(patients):
        for dose in protocol.candidates(patient.age):
            owners.append(index)
            doses.append(float(dose))
            schedules.append(protocol.schedule(float(dose), patient.weight))
    return np.asarray(owners, dtype=np.int64), np.asarray(doses), np.stack(schedules)


def decisions_from_outcomes(patients: Sequence[PatientCovariates], protocol: DoseProtocol, owners: np.ndarray, doses: np.ndarray,
                            max_cp: np.ndarray, max_ce: np.ndarray) -> List[DoseDecision]:
    decisions = []
    for index, patient in enumerate(patients):
        mask = owners == index
        decision = choose_dose(doses[mask], max_cp[mask], max_ce[mask], protocol.target_ce(patient.age), protocol, patient.patient_id)
        if not decision.safe:
            logger.warning("No safe dose candidate; patient excluded.", patient=patient.patient_id, reason=decision.reason)
        decisions.append(decision)
    return decisions


def _oracle_chunk(patients: Sequence[PatientCovariates], protocol: DoseProtocol, table: PkParamTable) -> List[DoseDecision]:
    owners, doses, schedules = candidate_plan(patients, protocol)
    params = PkParams.stack([table.params(p) for p in patients]).select(owners)
    trajectory = integrate(PkModel(params), np.zeros((owners.size, 4)), protocol.grid(), schedules)
    max_cp = np.max(trajectory.states[..., 0] / params.V1[:, None], axis=1)
    max_ce = np.max(trajectory.states[..., 3], axis=1)
    return decisions_from_outcomes(patients, protocol, owners, doses, max_cp, max_ce)


def label_optimal_dose(cov: PatientCovariates, protocol: DoseProtocol, table: PkParamTable) -> DoseDecision:
    """
    Simulates every candidate dose under the oracle table and keeps the safe candidate
    whose peak Ce is closest to the age-dependent target.

    Returns:
        DoseDecision: Flagged unsafe with a reason if every candidate breaches the Cp limit.
    """
    return _oracle_chunk([cov], protocol, table)[0]


def label_optimal_doses(patients: Sequence[PatientCovariates], protocol: DoseProtocol, table: PkParamTable,
                        threads: int = 1) -> List[DoseDecision]:
    """
    Vectorised `label_optimal_dose` over a cohort, chunked across worker threads.
    """
    logger.debug("Starting: label_optimal_doses.", patients=len(patients), threads=threads)
    chunks = Helper.chunk(list(patients), DOSE_CHUNK)
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as executor:
        results = list(executor.map(lambda chunk: _oracle_chunk(chunk, protocol, table), chunks))
    decisions = [decision for chunk in results for decision in chunk]
    logger.debug("Finished: label_optimal_doses.", unsafe=sum(1 for d in decisions if not d.safe))
    return decisions


def _truncated_normal(rng: np.random.Generator, mean: float, sd: float, low: float, high: float, size: int) -> np.ndarray:
    return truncnorm((low - mean) / sd, (high - mean) / sd, loc=mean, scale=sd).rvs(size=size, random_state=rng)


def _synthetic_cohort(n: int, rng: np.random.Generator, cohort: Dict[str, Any]) -> List[PatientCovariates]:
    """
    Stand-in covariate generator: age uniform, BMI truncated-normal, sex-specific
    height truncated at three standard deviations, weight = BMI * height^2.
    """
    age = rng.uniform(*_check_range("cohort age", cohort["age"]), size=n)
    male = rng.uniform(size=n) < float(cohort["male_fraction"])
    bmi_low, bmi_high = _check_range("cohort bmi", cohort["bmi"])
    bmi = _truncated_normal(rng, float(cohort["bmi_mean"]), float(cohort["bmi_sd"]), bmi_low, bmi_high, n)
    height = np.empty(n)
    for is_male, key in ((True, "height_male"), (False, "height_female")):
        mask = male == is_male
        mean, sd = (float(v) for v in cohort[key])
        height[mask] = _truncated_normal(rng, mean, sd, mean - 3.0 * sd, mean + 3.0 * sd, int(mask.sum()))
    opioid = rng.uniform(size=n) < float(cohort["opioid_rate"])
    weight = bmi * (height / 100.0) ** 2
    return [PatientCovariates(float(age[i]), "male" if male[i] else "female", float(weight[i]), float(height[i]),
                              bool(opioid[i]), f"P{i:05d}") for i in range(n)]


def _parse_sex(value: Any) -> str:
    text = str(value).strip().lower()
    if text in ("male", "m"):
        return "male"
    if text in ("female", "f"):
        return "female"
    raise ValueError(f"unknown sex '{value}'")


def _parse_flag(value: Any) -> bool:
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "1.0"):
        return True
    if text in ("0", "false", "no", "0.0", ""):
        return False
    raise ValueError(f"unknown opioid flag '{value}'")


def read_cohort_csv(path: str) -> List[PatientCovariates]:
    """
    Reads `age,sex,weight,height,opioid[,patient_id]` rows.

    Raises:
        MissingArtifactError: If the file does not exist.
        DataFormatError: On missing columns or a malformed row; the line number counts
        the header as line 1.
    """
    logger.debug("Starting: read_cohort_csv.", path=path)
    if not os.path.isfile(path):
        raise MissingArtifactError(f"Cohort file {path} does not exist.", path=path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in ("age", "sex", "weight", "height", "opioid") if c not in frame.columns]
    if missing:
        raise DataFormatError(f"Cohort file {path} lacks columns: {', '.join(missing)}.", line=1)

    cohort = []
    for index, row in enumerate(frame.to_dict("records")):
        line = index + 2
        try:
            patient_id = row.get("patient_id") or f"P{index:05d}"
            cohort.append(PatientCovariates(float(row["age"]), _parse_sex(row["sex"]), float(row["weight"]),
                                            float(row["height"]), _parse_flag(row["opioid"]), patient_id))
        except (ValueError, ConfigurationError) as exception_error:
            raise DataFormatError(f"Malformed cohort row at {path}:{line}: {exception_error}", line=line) from exception_error
    logger.debug("Finished: read_cohort_csv.", patients=len(cohort))
    return cohort


def gen_pk_cohort(source: str, n: int, seed: int, cohort: Optional[Dict[str, Any]] = None) -> List[PatientCovariates]:
    """
    Builds a patient cohort from the synthetic generator or from a CSV file.

    Args:
        source (str): "synthetic" or a CSV path.
        n (int): Cohort size for the synthetic generator (ignored for CSV).
        seed (int): Run seed.
        cohort (dict): The `pk.cohort` configuration section.
    """
    if source != "synthetic":
        return read_cohort_csv(source)
    if int(n) < 1:
        raise ConfigurationError(f"Cohort size must be positive, got {n}.")
    settings = dict(DEFAULT_CONFIG["pk"]["cohort"])
    settings.update(cohort or {})
    return _synthetic_cohort(int(n), stream_rng(seed, STREAM_COHORT), settings)


def split_label(cov: PatientCovariates, age_limit: float = 60.0, bmi_limit: float = 30.0) -> Optional[str]:
    """
    Returns "extreme_ood" (both limits exceeded), "ood" (exactly one) or None.
    """
    old = cov.age > age_limit
    heavy = cov.bmi > bmi_limit
    if old and heavy:
        return "extreme_ood"
    if old or heavy:
        return "ood"
    return None


def assign_splits(cohort: Sequence[PatientCovariates], seed: int, age_limit: float = 60.0, bmi_limit: float = 30.0,
                  test_fraction: float = 0.25) -> List[str]:
    """
    Labels every patient with one of SPLIT_LABELS; a seeded `test_fraction` of the
    in-envelope patients becomes the in-distribution test group.
    """
    labels = [split_label(p, age_limit, bmi_limit) for p in cohort]
    inside = [i for i, label in enumerate(labels) if label is None]
    order = stream_rng(seed, STREAM_SPLIT).permutation(len(inside))
    n_test = int(math.ceil(test_fraction * len(inside))) if inside else 0
    held_out = {inside[j] for j in order[:n_test]}
    return [label if label is not None else ("in_distribution" if i in held_out else "train") for i, label in enumerate(labels)]


def gen_pk_dataset(cohort: Sequence[PatientCovariates], splits: Sequence[str], decisions: Sequence[DoseDecision],
                   protocol: DoseProtocol, oracle: PkParamTable, seed: int) -> Tuple[Dataset, pd.DataFrame]:
    """
    Simulates one oracle trajectory per patient. Training patients receive a random
    candidate dose, test patients their oracle-optimal dose; patients without a safe
    candidate are excluded and returned in the second frame with their reason.
    """
    logger.debug("Starting: gen_pk_dataset.", patients=len(cohort))
    rng = stream_rng(seed, STREAM_DOSE)
    rows, kept, schedules, excluded = [], [], [], []
    for patient, split, decision in zip(cohort, splits, decisions):
        candidates = protocol.candidates(patient.age)
        random_dose = float(candidates[rng.integers(len(candidates))])
        if not decision.safe:
            excluded.append({"patient_id": patient.patient_id, "split": split, "reason": decision.reason})
            continue
        applied = random_dose if split == "train" else decision.dose
        kept.append(patient)
        schedules.append(protocol.schedule(applied, patient.weight))
        rows.append({"patient_id": patient.patient_id, "age": patient.age, "sex": patient.sex, "weight": patient.weight,
                     "height": patient.height, "opioid": int(patient.opioid), "bmi": patient.bmi, "split": split,
                     "dose_applied": applied, "dose_optimal": decision.dose, "target_ce": decision.target_ce,
                     "max_ce_optimal": decision.max_ce, "max_cp_optimal": decision.max_cp})
    if not kept:
        raise ConfigurationError("No patient in the cohort has a safe dose candidate.")

    grid = protocol.grid()
    params = PkParams.stack([oracle.params(p) for p in kept])
    eta = np.stack(schedules)
    trajectory = integrate(PkModel(params), np.zeros((len(kept), 4)), grid, eta)
    full = trajectory.states
    states = np.stack([full[..., 0] / params.V1[:, None], full[..., 3], full[..., 1], full[..., 2]], axis=-1)

    records = pd.DataFrame(rows)
    records.insert(0, "unit", np.arange(len(kept)))
    records["oracle_V1"] = params.V1
    logger.debug("Finished: gen_pk_dataset.", kept=len(kept), excluded=len(excluded))
    return (Dataset("cohort", "pk", list(PK_CHANNELS), grid.points(), states, eta, records),
            pd.DataFrame(excluded, columns=["patient_id", "split", "reason"]))


def covariates_from_records(records: pd.DataFrame) -> List[PatientCovariates]:
    return [PatientCovariates(float(r["age"]), str(r["sex"]), float(r["weight"]), float(r["height"]), bool(int(r["opioid"])),
                              str(r["patient_id"])) for r in records.to_dict("records")]


class DatasetStore:
    """
    Reads and writes datasets below one directory with a JSON manifest.

    Layout: `manifest.json`, `<name>_records.csv` and either
    `<name>_trajectories.csv` (long format: unit, t, channels..., eta1) or
    `<name>.npz`. Checksums are sha256 over file bytes for CSV and over array
    contents for npz.

    Methods:
        write(directory, datasets, fmt, meta) -> Dict:
            Writes datasets plus the manifest and returns the manifest.

        read(directory, name) -> Dataset:
            Reads one dataset and verifies its checksums.

        manifest(directory) -> Dict:
            Loads and validates the manifest.
    """
    @staticmethod
    def _trajectory_frame(dataset: Dataset) -> pd.DataFrame:
        n, points, _ = dataset.states.shape
        columns = {"unit": np.repeat(np.arange(n), points), "t": np.tile(dataset.times, n)}
        for index, name in enumerate(dataset.channels):
            columns[name] = dataset.states[:, :, index].reshape(-1)
        for index in range(dataset.eta.shape[2]):
            columns[f"eta{index + 1}"] = dataset.eta[:, :, index].reshape(-1)
        return pd.DataFrame(columns)

    @staticmethod
    def write(directory: str, datasets: Sequence[Dataset], fmt: str = "csv", meta: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        logger.debug("Starting: DatasetStore.write.", directory=directory, fmt=fmt)
        if fmt not in ("csv", "npz"):
            raise ConfigurationError(f"Unknown dataset format '{fmt}'. Use 'csv' or 'npz'.")
        entries = {}
        for dataset in datasets:
            records_file = f"{dataset.name}_records.csv"
            Helper.write_csv(os.path.join(directory, records_file), dataset.records)
            checksums = {records_file: Helper.sha256_file(os.path.join(directory, records_file))}
            if fmt == "csv":
                trajectory_file = f"{dataset.name}_trajectories.csv"
                Helper.write_csv(os.path.join(directory, trajectory_file), DatasetStore._trajectory_frame(dataset))
                checksums[trajectory_file] = Helper.sha256_file(os.path.join(directory, trajectory_file))
            else:
                trajectory_file = f"{dataset.name}.npz"
                np.savez(os.path.join(directory, trajectory_file), **dataset.arrays())
                checksums[trajectory_file] = Helper.sha256_arrays(dataset.arrays())
            entries[dataset.name] = {"case": dataset.case, "n": len(dataset), "channels": dataset.channels,
                                     "num_points": int(dataset.times.shape[0]), "format": fmt, "checksums": checksums}

        manifest = {"format": MANIFEST_FORMAT, "schema_version": hybridode.utils.version.__schema_version__,
                    "datasets": entries}
        manifest.update(meta or {})
        Helper.write_json(os.path.join(directory, MANIFEST_NAME), manifest)
        logger.info("Datasets written.", directory=directory, datasets=",".join(entries))
        logger.debug("Finished: DatasetStore.write.")
        return manifest

    @staticmethod
    def manifest(directory: str) -> Dict[str, Any]:
        """
        Raises:
            MissingArtifactError: If the manifest does not exist.
            DataFormatError: On a foreign or incompatible manifest.
        """
        manifest = Helper.read_json(os.path.join(directory, MANIFEST_NAME))
        if manifest.get("format") != MANIFEST_FORMAT:
            raise DataFormatError(f"{directory} does not hold a {MANIFEST_FORMAT} manifest.")
        found = version.parse(str(manifest.get("schema_version", "0")))
        if found.major != version.parse(hybridode.utils.version.__schema_version__).major:
            raise DataFormatError(f"Dataset manifest in {directory} has incompatible schema version {found}.")
        return manifest

    @staticmethod
    def _read_trajectory_csv(path: str, channels: List[str]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        frame = pd.read_csv(path, float_precision="round_trip")
        eta_columns = [c for c in frame.columns if c.startswith("eta")]
        expected = ["unit", "t"] + list(channels) + eta_columns
        if list(frame.columns) != expected or not eta_columns:
            raise DataFormatError(f"Unexpected trajectory header in {path}: {','.join(frame.columns)}.", line=1)
        numeric = frame.apply(pd.to_numeric, errors="coerce")
        bad = np.flatnonzero(numeric.isna().any(axis=1).to_numpy())
        if bad.size:
            line = int(bad[0]) + 2
            raise DataFormatError(f"Malformed trajectory row at {path}:{line}.", line=line)

        units = numeric["unit"].to_numpy(dtype=np.int64)
        n = int(units.max()) + 1 if units.size else 0
        if n == 0 or units.size % n:
            raise DataFormatError(f"Trajectory file {path} has ragged units.")
        points = units.size // n
        times = numeric["t"].to_numpy(dtype=np.float64)[:points]
        states = numeric[list(channels)].to_numpy(dtype=np.float64).reshape(n, points, len(channels))
        eta = numeric[eta_columns].to_numpy(dtype=np.float64).reshape(n, points, len(eta_columns))
        return times, states, eta

    @staticmethod
    def read(directory: str, name: str, verify: bool = True) -> Dataset:
        """
        Raises:
            MissingArtifactError: If the dataset is not listed or a file is missing.
            DataFormatError: On a checksum mismatch or malformed content.
        """
        logger.debug("Starting: DatasetStore.read.", directory=directory, name=name)
        manifest = DatasetStore.manifest(directory)
        entry = manifest["datasets"].get(name)
        if entry is None:
            raise MissingArtifactError(f"Dataset '{name}' is not listed in {os.path.join(directory, MANIFEST_NAME)}.",
                                       path=os.path.join(directory, name))
        channels = list(entry["channels"])
        records_file = f"{name}_records.csv"
        records = pd.read_csv(os.path.join(directory, records_file), float_precision="round_trip") \
            if os.path.isfile(os.path.join(directory, records_file)) else None
        if records is None:
            raise MissingArtifactError(f"Dataset file {records_file} is missing.", path=os.path.join(directory, records_file))

        if entry["format"] == "csv":
            trajectory_file = f"{name}_trajectories.csv"
            path = os.path.join(directory, trajectory_file)
            if not os.path.isfile(path):
                raise MissingArtifactError(f"Dataset file {trajectory_file} is missing.", path=path)
            times, states, eta = DatasetStore._read_trajectory_csv(path, channels)
            actual = {records_file: Helper.sha256_file(os.path.join(directory, records_file)), trajectory_file: Helper.sha256_file(path)}
        else:
            trajectory_file = f"{name}.npz"
            path = os.path.join(directory, trajectory_file)
            if not os.path.isfile(path):
                raise MissingArtifactError(f"Dataset file {trajectory_file} is missing.", path=path)
            with np.load(path) as archive:
                arrays = {key: archive[key] for key in ("times", "states", "eta")}
            times, states, eta = arrays["times"], arrays["states"], arrays["eta"]
            actual = {records_file: Helper.sha256_file(os.path.join(directory, records_file)), trajectory_file: Helper.sha256_arrays(arrays)}

        if verify:
            for file_name, digest in entry["checksums"].items():
                if actual.get(file_name) != digest:
                    raise DataFormatError(f"Checksum mismatch for {os.path.join(directory, file_name)}.")
        logger.debug("Finished: DatasetStore.read.", units=int(states.shape[0]))
        return Dataset(name, entry["case"], channels, times, states, eta, records)


def generate_pendulum(config: Dict[str, Any], directory: str) -> Dict[str, Any]:
    """
    Writes train, test_in, test_ood, counterfactual and encoder_pretrain datasets.
    """
    logger.debug("Starting: generate_pendulum.")
    seed = int(config["run"]["seed"])
    section = config["pendulum"]
    n, n_test = int(config["data"]["n"]), int(config["data"]["n_test"])
    train_spec = PendulumSampleSpec.from_config(config, n)
    test_spec = PendulumSampleSpec.from_config(config, n_test)
    encoder_section = section["encoder_data"]
    encoder_spec = PendulumSampleSpec.from_config(config, int(encoder_section["n"]))
    cf = section["counterfactual"]

    datasets = [
        gen_pendulum_dataset(train_spec, section["train_k"], seed, "train", STREAM_TRAIN),
        gen_pendulum_dataset(test_spec, section["train_k"], seed, "test_in", STREAM_TEST_IN),
        gen_pendulum_dataset(test_spec, section["ood_k"], seed, "test_ood", STREAM_TEST_OOD),
        gen_counterfactual_dataset(test_spec, seed, float(cf["t_max"]), float(cf["t_switch"]), float(cf["tau_before"]), cf["tau_after"]),
        gen_encoder_pretraining_data(encoder_spec, seed, encoder_section["mass"], encoder_section["l_cm"], section["train_k"],
                                     bool(encoder_section["zero_intervention"]), float(encoder_section["validation_fraction"])),
    ]
    meta = {"case": "pendulum", "seed": seed, "spec": {"pendulum": section, "data": config["data"]}}
    manifest = DatasetStore.write(directory, datasets, config["data"]["format"], meta)
    logger.debug("Finished: generate_pendulum.")
    return manifest


def generate_pk(config: Dict[str, Any], directory: str) -> Dict[str, Any]:
    """
    Writes the labelled cohort dataset and the list of excluded patients. The manifest
    records the PK table checksums and the per-group counts.
    """
    logger.debug("Starting: generate_pk.")
    seed = int(config["run"]["seed"])
    pk = config["pk"]
    protocol = DoseProtocol.from_config(config)
    oracle = PkParamTable.load(pk["oracle_table"])
    prior = PkParamTable.load(pk["prior_table"])

    source = pk["cohort"].get("csv_path") if config["data"].get("source") == "csv" else "synthetic"
    if config["data"].get("source") == "csv" and not source:
        raise ConfigurationError("data.source is 'csv' but pk.cohort.csv_path is not set.")
    cohort = gen_pk_cohort(source, int(config["data"]["n"]), seed, pk["cohort"])
    splits = assign_splits(cohort, seed, float(pk["age_limit"]), float(pk["bmi_limit"]), float(pk["test_fraction"]))
    decisions = label_optimal_doses(cohort, protocol, oracle, int(config["run"]["threads"]))
    dataset, excluded = gen_pk_dataset(cohort, splits, decisions, protocol, oracle, seed)
    Helper.write_csv(os.path.join(directory, "excluded.csv"), excluded)

    counts = {label: int((dataset.records["split"] == label).sum()) for label in SPLIT_LABELS}
    meta = {"case": "pk", "seed": seed, "split_counts": counts, "excluded": int(len(excluded)),
            "tables": {"prior": prior.checksum, "oracle": oracle.checksum},
            "spec": {"pk": pk, "data": config["data"]}}
    for label in TEST_GROUPS:
        if counts[label] == 0:
            logger.warning("Test group is empty.", group=label)
    manifest = DatasetStore.write(directory, [dataset], config["data"]["format"], meta)
    logger.info("Cohort generated.", **counts)
    logger.debug("Finished: generate_pk.")
    return manifest


def generate_datasets(config: Dict[str, Any], directory: str) -> Dict[str, Any]:
    if config["run"]["case"] == "pendulum":
        return generate_pendulum(config, directory)
    return generate_pk(config, directory)
