"""
Closed-form parametric right-hand sides: point-mass and cylindrical pendulum, the
three-compartment propofol model with an effect site, and the covariate tables that map
patients to PK parameters (`prior`: linear-covariate structure, `oracle`: allometric
structure). Time is in seconds throughout; amounts in mg, volumes in L and
concentrations in ug/mL (numerically mg/L).
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Union
import numpy as np
from packaging import version
import hybridode.utils.version
from hybridode.models.numerics import channel, sin, stack
from hybridode.models.odeint import TimeGrid
from hybridode.utils.config_parser import ConfigParser
from hybridode.utils.exceptions import ConfigurationError, MissingArtifactError
from hybridode.utils.helper import Helper
from hybridode.utils.logger import StructuredLogger

logger = StructuredLogger()

GRAVITY = 9.81
SECONDS_PER_MINUTE = 60.0
TABLE_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "config", "pk_tables")

Scalar = Union[float, np.ndarray]


def _require_positive(name: str, value: Scalar) -> None:
    if not np.all(np.asarray(value) > 0):
        raise ConfigurationError(f"{name} must be strictly positive, got {value}.")


@dataclass
class PendulumParams:
    """
    Pendulum parameters. Fields may be scalars or per-sample arrays of shape (B,).

    For the cylinder, I_s = m R^2/4 + m L^2/3 and l_cm = L/2; for the point mass,
    I_s = m l_cm^2.
    """
    m: Scalar
    l_cm: Scalar
    L: Optional[Scalar] = None
    R: Optional[Scalar] = None
    g: float = GRAVITY

    def __post_init__(self):
        _require_positive("m", self.m)
        _require_positive("l_cm", self.l_cm)
        _require_positive("g", self.g)
        if self.L is not None:
            _require_positive("L", self.L)
        if self.R is not None:
            _require_positive("R", self.R)

    @classmethod
    def cylinder(cls, m: Scalar, L: Scalar, R: Scalar, g: float = GRAVITY) -> "PendulumParams":
        return cls(m=m, l_cm=np.asarray(L) / 2.0 if np.ndim(L) else L / 2.0, L=L, R=R, g=g)

    @classmethod
    def point_mass(cls, m: Scalar, l_cm: Scalar, g: float = GRAVITY) -> "PendulumParams":
        return cls(m=m, l_cm=l_cm, g=g)

    @property
    def inertia_point_mass(self) -> Scalar:
        return self.m * self.l_cm ** 2

    @property
    def inertia_cylinder(self) -> Scalar:
        if self.L is None or self.R is None:
            raise ConfigurationError("Cylinder inertia needs both L and R.")
        return self.m * (self.R ** 2 / 4.0 + self.L ** 2 / 3.0)


def pendulum_rhs_pointmass(t, state, params: PendulumParams, tau_ext):
    """
    d theta/dt = omega; d omega/dt = -(g/l_cm) sin theta + tau / (m l_cm^2).
    """
    theta = channel(state, 0)
    omega = channel(state, 1)
    domega = -(params.g / params.l_cm) * sin(theta) + tau_ext / (params.m * params.l_cm * params.l_cm)
    return stack([omega, domega], axis=-1)


def pendulum_rhs_cylinder(t, state, params: PendulumParams, tau_ext):
    """
    d theta/dt = omega; d omega/dt = -g l_cm/(R^2/4 + L^2/3) sin theta + tau/(m (R^2/4 + L^2/3)).
    """
    if params.L is None or params.R is None:
        raise ConfigurationError("The cylinder pendulum needs L and R.")
    theta = channel(state, 0)
    omega = channel(state, 1)
    shape_factor = params.R * params.R / 4.0 + params.L * params.L / 3.0
    domega = -(params.g * params.l_cm / shape_factor) * sin(theta) + tau_ext / (params.m * shape_factor)
    return stack([omega, domega], axis=-1)


class PointMassPendulum:
    """
    RHS binder for the point-mass pendulum: rhs(t, x, eta) with eta[..., 0] = torque.
    """
    state_dim = 2

    def __init__(self, params: PendulumParams):
        self.params = params

    def __call__(self, t, x, eta):
        return pendulum_rhs_pointmass(t, x, self.params, eta[..., 0])


class CylinderPendulum:
    """
    RHS binder for the cylindrical rod pivoted at its edge.
    """
    state_dim = 2

    def __init__(self, params: PendulumParams):
        self.params = params

    def __call__(self, t, x, eta):
        return pendulum_rhs_cylinder(t, x, self.params, eta[..., 0])


def small_angle_period(inertia: Scalar, m: Scalar, l_cm: Scalar, g: float = GRAVITY) -> Scalar:
    """
    Linearised period 2 pi sqrt(I_s / (m g l_cm)).
    """
    return 2.0 * math.pi * np.sqrt(inertia / (m * g * l_cm))


def pendulum_energy(states: np.ndarray, inertia: Scalar, m: Scalar, l_cm: Scalar, g: float = GRAVITY) -> np.ndarray:
    """
    Total energy 1/2 I_s omega^2 - m g l_cm cos theta along a trajectory.
    """
    states = np.asarray(states)
    return 0.5 * inertia * states[..., 1] ** 2 - m * g * l_cm * np.cos(states[..., 0])


@dataclass
class PkParams:
    """
    Three-compartment parameters: volumes in L, rate constants in 1/s. Fields may be
    scalars or per-patient arrays of shape (B,).
    """
    V1: Scalar
    V2: Scalar
    V3: Scalar
    k10: Scalar
    k12: Scalar
    k21: Scalar
    k13: Scalar
    k31: Scalar
    ke0: Scalar

    def __post_init__(self):
        for name in ("V1", "V2", "V3", "k10", "k12", "k21", "k13", "k31", "ke0"):
            _require_positive(name, getattr(self, name))

    def as_dict(self) -> Dict[str, Scalar]:
        return {name: getattr(self, name) for name in ("V1", "V2", "V3", "k10", "k12", "k21", "k13", "k31", "ke0")}

    @classmethod
    def stack(cls, items) -> "PkParams":
        """
        Combines per-patient parameters into one batched PkParams.
        """
        items = list(items)
        return cls(**{name: np.array([float(getattr(item, name)) for item in items]) for name in items[0].as_dict()})

    def select(self, index) -> "PkParams":
        return PkParams(**{name: np.asarray(value)[index] for name, value in self.as_dict().items()})


def pk_rhs(t, state, params: PkParams, u):
    """
    dA1/dt = -(k10+k12+k13) A1 + k21 A2 + k31 A3 + u
    dA2/dt = k12 A1 - k21 A2
    dA3/dt = k13 A1 - k31 A3
    dCe/dt = ke0 (A1/V1 - Ce)
    """
    a1 = channel(state, 0)
    a2 = channel(state, 1)
    a3 = channel(state, 2)
    ce = channel(state, 3)
    da1 = -(params.k10 + params.k12 + params.k13) * a1 + params.k21 * a2 + params.k31 * a3 + u
    da2 = params.k12 * a1 - params.k21 * a2
    da3 = params.k13 * a1 - params.k31 * a3
    dce = params.ke0 * (a1 / params.V1 - ce)
    return stack([da1, da2, da3, dce], axis=-1)


class PkModel:
    """
    RHS binder for the compartment model: rhs(t, x, eta) with eta[..., 0] = infusion in mg/s.
    """
    state_dim = 4

    def __init__(self, params: PkParams):
        self.params = params

    def __call__(self, t, x, eta):
        return pk_rhs(t, x, self.params, eta[..., 0])


@dataclass
class PatientCovariates:
    """
    Patient covariates. `sex` is "male" or "female"; BMI is derived.
    """
    age: float
    sex: str
    weight: float
    height: float
    opioid: bool = False
    patient_id: Optional[str] = None

    def __post_init__(self):
        if self.sex not in ("male", "female"):
            raise ConfigurationError(f"Unknown sex '{self.sex}'. Use 'male' or 'female'.")
        for name in ("age", "weight", "height"):
            if not float(getattr(self, name)) > 0:
                raise ConfigurationError(f"Covariate {name} must be positive, got {getattr(self, name)}.")

    @property
    def bmi(self) -> float:
        return self.weight / (self.height / 100.0) ** 2

    @property
    def is_male(self) -> bool:
        return self.sex == "male"


def lean_body_mass_james(sex: str, weight: float, height: float) -> float:
    """
    James equation; quadratic in weight with its vertex at w = 1.1 h^2 / 256 (male).
    """
    if sex == "male":
        return 1.1 * weight - 128.0 * (weight / height) ** 2
    return 1.07 * weight - 148.0 * (weight / height) ** 2


def james_vertex_weight(sex: str, height: float) -> float:
    if sex == "male":
        return 1.1 * height ** 2 / 256.0
    return 1.07 * height ** 2 / 296.0


def fat_free_mass_al_sallami(sex: str, weight: float, age: float, bmi: float) -> float:
    if sex == "male":
        return (0.88 + (1.0 - 0.88) / (1.0 + (age / 13.4) ** -12.7)) * (9270.0 * weight) / (6680.0 + 216.0 * bmi)
    return (1.11 + (1.0 - 1.11) / (1.0 + (age / 7.1) ** -1.1)) * (9270.0 * weight) / (8780.0 + 244.0 * bmi)


def _sigmoid_fraction(x: float, c50: float, gamma: float) -> float:
    return x ** gamma / (c50 ** gamma + x ** gamma)


@dataclass
class PkParamTable:
    """
    Versioned, checksummed coefficient set mapping PatientCovariates to PkParams.

    Methods:
        load(name_or_path: str) -> PkParamTable:
            Loads a bundled table ("prior", "oracle") or a YAML/TOML/JSON file.

        params(cov: PatientCovariates) -> PkParams:
            Evaluates the table for one patient.

        in_envelope(cov: PatientCovariates) -> bool:
            Checks the declared validity envelope.
    """
    name: str
    structure: str
    lean_body_mass: str
    coefficients: Dict[str, Any]
    envelope: Dict[str, Any] = field(default_factory=dict)
    reference: Dict[str, Any] = field(default_factory=dict)
    apply_opioid: bool = False
    rate_unit: str = "per_minute"
    schema_version: str = "1.0"
    checksum: str = ""

    @classmethod
    def from_dict(cls, document: Dict[str, Any], source: str = "<memory>") -> "PkParamTable":
        """
        Raises:
            ConfigurationError: On unknown structure, formula or incompatible schema version.
        """
        schema = version.parse(str(document.get("schema_version", "0")))
        expected = version.parse(hybridode.utils.version.__schema_version__)
        if schema.major != expected.major:
            raise ConfigurationError(f"PK table {source} has schema version {schema}, expected {expected.major}.x.")
        structure = document.get("structure")
        if structure not in ("linear_covariate", "allometric"):
            raise ConfigurationError(f"PK table {source} has unknown structure '{structure}'.")
        lbm = document.get("lean_body_mass")
        if lbm not in ("james", "al_sallami"):
            raise ConfigurationError(f"PK table {source} has unknown lean-body-mass formula '{lbm}'.")
        if document.get("rate_unit", "per_minute") not in ("per_minute", "per_second"):
            raise ConfigurationError(f"PK table {source} has unknown rate unit '{document.get('rate_unit')}'.")

        return cls(
            name=str(document.get("name", source)),
            structure=structure,
            lean_body_mass=lbm,
            coefficients=dict(document.get("coefficients", {})),
            envelope=dict(document.get("envelope", {})),
            reference=dict(document.get("reference", {})),
            apply_opioid=bool(document.get("apply_opioid", False)),
            rate_unit=document.get("rate_unit", "per_minute"),
            schema_version=str(schema),
            checksum=Helper.sha256_text(Helper.canonical_json(document)),
        )

    @classmethod
    def load(cls, name_or_path: str) -> "PkParamTable":
        logger.debug("Starting: PkParamTable.load.", table=name_or_path)
        path = os.path.join(TABLE_DIR, f"{name_or_path}.yaml") if name_or_path in ("prior", "oracle") else name_or_path
        if not os.path.isfile(path):
            raise MissingArtifactError(f"PK parameter table {path} does not exist.", path=path)
        table = cls.from_dict(ConfigParser.load_file(path), source=path)
        logger.debug("Finished: PkParamTable.load.", table=table.name, checksum=table.checksum[:12])
        return table

    def in_envelope(self, cov: PatientCovariates) -> bool:
        values = {"age": cov.age, "weight": cov.weight, "height": cov.height, "bmi": cov.bmi}
        for key, bounds in self.envelope.items():
            if key in values and not bounds[0] <= values[key] <= bounds[1]:
                return False
        return True

    def lean_mass(self, cov: PatientCovariates) -> float:
        if self.lean_body_mass == "james":
            return lean_body_mass_james(cov.sex, cov.weight, cov.height)
        return fat_free_mass_al_sallami(cov.sex, cov.weight, cov.age, cov.bmi)

    def _linear(self, quantity: str, covariates: Dict[str, float]) -> float:
        entry = self.coefficients.get(quantity)
        if entry is None:
            raise ConfigurationError(f"PK table {self.name} has no coefficients for {quantity}.")
        if not isinstance(entry, dict):
            return float(entry)
        value = float(entry.get("intercept", 0.0))
        for covariate, (slope, reference) in (entry.get("terms") or {}).items():
            if covariate not in covariates:
                raise ConfigurationError(f"PK table {self.name}: unknown covariate '{covariate}' in {quantity}.")
            value += float(slope) * (covariates[covariate] - float(reference))
        return value

    def _linear_covariate_model(self, cov: PatientCovariates, lbm: float) -> Dict[str, float]:
        covariates = {"age": cov.age, "weight": cov.weight, "height": cov.height, "lbm": lbm, "bmi": cov.bmi,
                      "male": 1.0 if cov.is_male else 0.0, "opioid": 1.0 if cov.opioid else 0.0}
        return {quantity: self._linear(quantity, covariates) for quantity in ("v1", "v2", "v3", "cl1", "cl2", "cl3", "ke0")}

    def _allometric_model(self, cov: PatientCovariates) -> Dict[str, float]:
        c = self.coefficients
        ref = self.reference
        age_ref = float(ref.get("age", 35.0))
        weight_ref = float(ref.get("weight", 70.0))
        height_ref = float(ref.get("height", 170.0))
        sex_ref = ref.get("sex", "male")
        exponent = float(c["clearance_exponent"])

        pma_weeks = cov.age * 52.0 + 40.0
        pma_ref_weeks = age_ref * 52.0 + 40.0
        cl_maturation = _sigmoid_fraction(pma_weeks, c["cl_maturation_e50"], c["cl_maturation_slope"])
        cl_maturation_ref = _sigmoid_fraction(pma_ref_weeks, c["cl_maturation_e50"], c["cl_maturation_slope"])
        q3_maturation = _sigmoid_fraction(pma_weeks, c["q3_maturation_e50"], 1.0)
        q3_maturation_ref = _sigmoid_fraction(pma_ref_weeks, c["q3_maturation_e50"], 1.0)
        central = _sigmoid_fraction(cov.weight, c["v1_weight_e50"], 1.0)
        central_ref = _sigmoid_fraction(weight_ref, c["v1_weight_e50"], 1.0)
        fat_free = self.lean_mass(cov)
        fat_free_ref = fat_free_mass_al_sallami(sex_ref, weight_ref, age_ref, weight_ref / (height_ref / 100.0) ** 2)

        opioid = cov.opioid and self.apply_opioid

        def opioid_factor(coefficient: float) -> float:
            return math.exp(coefficient * cov.age) if opioid else 1.0

        v1 = c["v1_ref"] * central / central_ref
        v2 = c["v2_ref"] * cov.weight / weight_ref * math.exp(c["v2_age"] * (cov.age - age_ref))
        v3 = c["v3_ref"] * fat_free / fat_free_ref * opioid_factor(c["v3_opioid_age"])
        cl_base = c["cl_male"] if cov.is_male else c["cl_female"]
        cl1 = cl_base * (cov.weight / weight_ref) ** exponent * cl_maturation / cl_maturation_ref * opioid_factor(c["cl_opioid_age"])
        cl2 = c["q2_ref"] * (v2 / c["v2_ref"]) ** exponent * (1.0 + c["q2_maturation_factor"] * (1.0 - q3_maturation))
        cl3 = c["q3_ref"] * (v3 / c["v3_ref"]) ** exponent * q3_maturation / q3_maturation_ref
        ke0 = c["ke0_ref"] * (cov.weight / weight_ref) ** c["ke0_weight_exponent"]
        return {"v1": v1, "v2": v2, "v3": v3, "cl1": cl1, "cl2": cl2, "cl3": cl3, "ke0": ke0}

    def raw_quantities(self, cov: PatientCovariates) -> Dict[str, float]:
        """
        Volumes and clearances in the table's own units, before conversion to rates.
        """
        if self.structure == "linear_covariate":
            return self._linear_covariate_model(cov, self.lean_mass(cov))
        return self._allometric_model(cov)

    def params(self, cov: PatientCovariates) -> PkParams:
        """
        Evaluates the table for one patient; warns outside the validity envelope.

        Raises:
            ConfigurationError: If a computed volume or rate is not strictly positive; the
            message names the quantity and its coefficients.
        """
        if not self.in_envelope(cov):
            logger.warning("Covariates outside table envelope.", table=self.name, patient=cov.patient_id,
                           age=cov.age, weight=cov.weight, height=cov.height, bmi=cov.bmi)
        if self.lean_body_mass == "james" and cov.weight > james_vertex_weight(cov.sex, cov.height):
            logger.warning("Lean body mass formula past its vertex; estimate degrades with weight.",
                           table=self.name, patient=cov.patient_id, bmi=cov.bmi)

        raw = self.raw_quantities(cov)
        for quantity, value in raw.items():
            if not (np.isfinite(value) and value > 0):
                raise ConfigurationError(
                    f"PK table {self.name} produced non-positive {quantity}={value} for patient {cov.patient_id} "
                    f"(coefficients: {self.coefficients.get(quantity, self.coefficients)})."
                )

        scale = SECONDS_PER_MINUTE if self.rate_unit == "per_minute" else 1.0
        v1, v2, v3 = raw["v1"], raw["v2"], raw["v3"]
        return PkParams(
            V1=v1, V2=v2, V3=v3,
            k10=raw["cl1"] / v1 / scale,
            k12=raw["cl2"] / v1 / scale,
            k21=raw["cl2"] / v2 / scale,
            k13=raw["cl3"] / v1 / scale,
            k31=raw["cl3"] / v3 / scale,
            ke0=raw["ke0"] / scale,
        )


def covariates_to_params(table: PkParamTable, cov: PatientCovariates) -> PkParams:
    return table.params(cov)


def bolus_schedule(total_mg: float, grid: TimeGrid, bolus_size: float = 30.0, bolus_interval: float = 10.0) -> np.ndarray:
    """
    Infusion-rate schedule (N+1, 1) in mg/s for a total dose delivered as ceil(D/size)
    boluses every `bolus_interval` seconds, the last one truncated. Each bolus of B mg
    is realised as u = B/dt over the grid interval starting at its delivery time.

    Raises:
        ConfigurationError: If the dose is negative or a bolus falls outside the grid.
    """
    if total_mg < 0:
        raise ConfigurationError(f"Total dose must be non-negative, got {total_mg}.")
    schedule = np.zeros((grid.num_points, 1))
    count = int(math.ceil(total_mg / bolus_size - 1e-12)) if total_mg > 0 else 0
    for index in range(count):
        amount = min(bolus_size, total_mg - index * bolus_size)
        step = int(round(index * bolus_interval / grid.dt))
        if step >= grid.num_steps:
            raise ConfigurationError(f"Bolus {index + 1} at {index * bolus_interval} s lies beyond the {grid.num_steps * grid.dt} s horizon.")
        schedule[step, 0] += amount / grid.dt
    return schedule
