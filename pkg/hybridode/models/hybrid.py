"""
Hybrid transition operators: a parametric core plus intervention-independent and
intervention-dependent correction networks, for the pendulum and the propofol case.

Every network receives the normalised feature vector [t / T, scaled state, standardised
conditioning]; data-driven networks additionally receive the scaled intervention. The
intervention-gated networks (suffix `_eta`) multiply the intervention, so they contribute
nothing where it is zero.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import enum
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence
import numpy as np
from hybridode.models.mechanistic import PatientCovariates, PkParams, pendulum_rhs_pointmass, pk_rhs, PendulumParams
from hybridode.models.networks import Checkpoint, ResidualMlp
from hybridode.models.numerics import Tensor, channel, join, softplus_of, stack
from hybridode.utils.exceptions import CheckpointError, ConfigurationError
from hybridode.utils.logger import StructuredLogger

logger = StructuredLogger()

MODEL_CHECKPOINT_KIND = "hybrid-model"
# softplus(log(e - 1)) = 1, so the Ce time-constant gate starts as the identity.
IDENTITY_SOFTPLUS_BIAS = math.log(math.e - 1.0)
CP_SCALE = 25.0
CE_SCALE = 3.5
PENDULUM_TIME_SCALE = 10.0
PK_TIME_SCALE = 210.0
TORQUE_SCALE = 10.0
INFUSION_SCALE = 60.0
BETA_FLOOR = 1e-3

PENDULUM_HYBRID_NETS = ("f_np", "f_np_eta", "g_np", "g_np_eta")
PK_HYBRID_NETS = ("f_np_psi", "f_np_eta", "g_np", "g_np_psi")
PENDULUM_DATA_DRIVEN_NETS = ("f_dd", "g_dd")
PK_DATA_DRIVEN_NETS = ("cp_dd", "ce_dd")
COVARIATE_NAMES = ("age", "male", "weight", "height", "opioid", "bmi")


class ModelKind(str, enum.Enum):
    MECHANISTIC = "mechanistic"
    DATA_DRIVEN = "data-driven"
    HYBRID = "hybrid"

    @classmethod
    def parse(cls, value: Any) -> "ModelKind":
        try:
            return cls(value.value if isinstance(value, ModelKind) else str(value))
        except ValueError as exception_error:
            raise ConfigurationError(f"Unknown model kind '{value}'. Use 'mechanistic', 'data-driven' or 'hybrid'.") from exception_error


@dataclass
class Normalization:
    """
    Input normalisation constants stored with every model checkpoint.
    """
    time_scale: float
    state_scale: List[float]
    eta_scale: float
    conditioning_mean: List[float]
    conditioning_std: List[float]

    def standardize(self, conditioning: np.ndarray) -> np.ndarray:
        return (np.asarray(conditioning, dtype=np.float64) - np.asarray(self.conditioning_mean)) / np.asarray(self.conditioning_std)

    def fit_conditioning(self, conditioning: np.ndarray) -> "Normalization":
        """
        Sets mean and standard deviation from training-set conditioning (B, p). Constant
        columns keep a unit scale.
        """
        conditioning = np.asarray(conditioning, dtype=np.float64)
        std = conditioning.std(axis=0)
        self.conditioning_mean = conditioning.mean(axis=0).tolist()
        self.conditioning_std = np.where(std > 1e-12, std, 1.0).tolist()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"time_scale": self.time_scale, "state_scale": list(self.state_scale), "eta_scale": self.eta_scale,
                "conditioning_mean": list(self.conditioning_mean), "conditioning_std": list(self.conditioning_std)}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "Normalization":
        return cls(float(payload["time_scale"]), [float(v) for v in payload["state_scale"]], float(payload["eta_scale"]),
                   [float(v) for v in payload["conditioning_mean"]], [float(v) for v in payload["conditioning_std"]])

    @classmethod
    def default(cls, case: str) -> "Normalization":
        if case == "pendulum":
            return cls(PENDULUM_TIME_SCALE, [1.0, 1.0], TORQUE_SCALE, [0.0, 0.0], [1.0, 1.0])
        return cls(PK_TIME_SCALE, [CP_SCALE, CE_SCALE], INFUSION_SCALE, [0.0] * len(COVARIATE_NAMES), [1.0] * len(COVARIATE_NAMES))


@dataclass
class PkConditioning:
    """
    Per-patient conditioning for the PK models: prior-table parameters (batched)
    and the raw covariate matrix (B, 6) in COVARIATE_NAMES order.
    """
    params: PkParams
    covariates: np.ndarray

    @classmethod
    def from_patients(cls, params: Sequence[PkParams], patients: Sequence[PatientCovariates]) -> "PkConditioning":
        return cls(PkParams.stack(params), covariate_matrix(patients))

    def select(self, index) -> "PkConditioning":
        return PkConditioning(self.params.select(index), self.covariates[index])


def covariate_matrix(patients: Sequence[PatientCovariates]) -> np.ndarray:
    return np.array([[p.age, 1.0 if p.is_male else 0.0, p.weight, p.height, 1.0 if p.opioid else 0.0, p.bmi] for p in patients],
                    dtype=np.float64)


def _features(t, parts: Sequence, batch: int):
    time = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (batch, 1))
    return join([time] + list(parts), axis=-1)


def _net_output(nets: Mapping[str, ResidualMlp], name: str, features, balance: Mapping[str, float], output_scale: Mapping[str, float]):
    scale = float(balance.get(name, 1.0)) * float(output_scale.get(name, 1.0))
    return scale * channel(nets[name](features), 0)


def hybrid_pendulum_rhs(t, state, beta_hat, tau_ext, nets: Mapping[str, ResidualMlp], normalization: Normalization,
                        balance: Optional[Mapping[str, float]] = None, output_scale: Optional[Mapping[str, float]] = None):
    """
    Point-mass pendulum with additive corrections:
        d theta/dt = omega + F_np + F_np^eta * tau
        d omega/dt = -(g/l) sin theta + tau/(m l^2) + G_np + G_np^eta * tau
    The networks see (t, theta, omega, beta_hat) only.

    Args:
        beta_hat: Array (B, 2) of (m_hat, l_cm_hat).

    Raises:
        ConfigurationError: If beta_hat is missing.
    """
    if beta_hat is None:
        raise ConfigurationError("The hybrid pendulum needs parameter estimates (m, l_cm).")
    balance = balance or {}
    output_scale = output_scale or {}
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    batch = beta_hat.shape[0]
    params = PendulumParams.point_mass(beta_hat[:, 0], beta_hat[:, 1])
    base = pendulum_rhs_pointmass(t, state, params, tau_ext)

    scaled_state = state / np.asarray(normalization.state_scale)
    features = _features(t / normalization.time_scale, [scaled_state, normalization.standardize(beta_hat)], batch)
    f_np = _net_output(nets, "f_np", features, balance, output_scale)
    f_np_eta = _net_output(nets, "f_np_eta", features, balance, output_scale)
    g_np = _net_output(nets, "g_np", features, balance, output_scale)
    g_np_eta = _net_output(nets, "g_np_eta", features, balance, output_scale)
    correction = stack([f_np + f_np_eta * tau_ext, g_np + g_np_eta * tau_ext], axis=-1)
    return base + correction


def hybrid_pk_rhs(t, state, conditioning: PkConditioning, u, nets: Mapping[str, ResidualMlp], normalization: Normalization,
                  balance: Optional[Mapping[str, float]] = None, output_scale: Optional[Mapping[str, float]] = None):
    """
    Compartment model with corrections in the central and effect-site equations:
        dA1/dt = parametric + F_np^psi + F_np^eta * u
        dA2/dt, dA3/dt parametric
        dCe/dt = parametric * G_np + G_np^psi, with G_np = softplus(.) > 0

    Raises:
        ConfigurationError: If the prior parameters are missing.
    """
    if conditioning is None or conditioning.params is None:
        raise ConfigurationError("The hybrid PK model needs prior PK parameters.")
    balance = balance or {}
    output_scale = output_scale or {}
    params = conditioning.params
    batch = conditioning.covariates.shape[0]
    base = pk_rhs(t, state, params, u)

    volumes = np.stack([np.broadcast_to(params.V1, (batch,)), np.broadcast_to(params.V2, (batch,)), np.broadcast_to(params.V3, (batch,))], axis=-1)
    scaled = join([state[:, 0:3] / (volumes * CP_SCALE), state[:, 3:4] / CE_SCALE], axis=-1)
    features = _features(t / normalization.time_scale, [scaled, normalization.standardize(conditioning.covariates)], batch)

    f_psi = _net_output(nets, "f_np_psi", features, balance, output_scale)
    f_eta = _net_output(nets, "f_np_eta", features, balance, output_scale)
    gate = float(balance.get("g_np", 1.0)) * softplus_of(channel(nets["g_np"](features), 0))
    g_psi = _net_output(nets, "g_np_psi", features, balance, output_scale)

    da1 = channel(base, 0) + f_psi + f_eta * u
    dce = channel(base, 3) * gate + g_psi
    return stack([da1, channel(base, 1), channel(base, 2), dce], axis=-1)


def data_driven_pendulum_rhs(t, state, beta_hat, tau_ext, nets, normalization: Normalization,
                             balance=None, output_scale=None):
    """
    Purely learned vector field; one network per state channel.
    """
    balance = balance or {}
    output_scale = output_scale or {}
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    batch = beta_hat.shape[0]
    features = _features(t / normalization.time_scale, [
        state / np.asarray(normalization.state_scale),
        normalization.standardize(beta_hat),
        np.asarray(tau_ext, dtype=np.float64).reshape(batch, 1) / normalization.eta_scale,
    ], batch)
    return stack([_net_output(nets, "f_dd", features, balance, output_scale),
                  _net_output(nets, "g_dd", features, balance, output_scale)], axis=-1)


def data_driven_pk_rhs(t, state, conditioning: PkConditioning, u, nets, normalization: Normalization,
                       balance=None, output_scale=None):
    """
    Two-state (Cp, Ce) learned vector field; one network per channel.
    """
    balance = balance or {}
    output_scale = output_scale or {}
    batch = conditioning.covariates.shape[0]
    features = _features(t / normalization.time_scale, [
        state / np.asarray(normalization.state_scale),
        normalization.standardize(conditioning.covariates),
        np.asarray(u, dtype=np.float64).reshape(batch, 1) / normalization.eta_scale,
    ], batch)
    return stack([_net_output(nets, "cp_dd", features, balance, output_scale),
                  _net_output(nets, "ce_dd", features, balance, output_scale)], axis=-1)


class HybridModel:
    """
    A trainable transition operator for one case study and model kind.

    Holds the correction networks, normalisation constants, balance weights and output
    scales, and binds per-unit conditioning (pendulum parameter estimates or PK priors)
    into an RHS usable by both integrators.

    Methods:
        rhs(conditioning) -> Callable:
            Returns rhs(t, x, eta) for a batch of units.

        state_dim -> int:
            Dimension of the integrated state.

        observe(states) -> array or Tensor:
            Maps integrated states to the observed channels.

        parameters() -> List[Tensor]:
            All trainable tensors in a stable order.

        save(path, metadata) / load(path):
            Checkpoint round trip.
    """
    def __init__(self, case: str, kind: ModelKind, nets: Dict[str, ResidualMlp], normalization: Normalization,
                 balance: Optional[Dict[str, float]] = None, output_scale: Optional[Dict[str, float]] = None,
                 beta_source: str = "encoder", encoder_ref: Optional[Dict[str, str]] = None):
        self.case = case
        self.kind = ModelKind.parse(kind)
        self.nets = nets
        self.normalization = normalization
        self.balance = dict(balance or {})
        self.output_scale = dict(output_scale or {})
        self.beta_source = beta_source
        self.encoder_ref = encoder_ref

    @property
    def state_dim(self) -> int:
        if self.case == "pendulum":
            return 2
        return 2 if self.kind is ModelKind.DATA_DRIVEN else 4

    def parameters(self) -> List[Tensor]:
        return [p for name in self.nets for p in self.nets[name].parameters()]

    def num_parameters(self) -> int:
        return int(sum(net.num_parameters() for net in self.nets.values()))

    def rhs(self, conditioning):
        """
        Binds conditioning for a batch: (B, 2) parameter estimates for the pendulum, a
        PkConditioning for the PK case.
        """
        nets, norm, balance, scale = self.nets, self.normalization, self.balance, self.output_scale
        if self.case == "pendulum":
            if conditioning is None:
                raise ConfigurationError("Pendulum models need parameter estimates (m, l_cm).")
            beta = np.atleast_2d(np.asarray(conditioning, dtype=np.float64))
            if self.kind is ModelKind.MECHANISTIC:
                params = PendulumParams.point_mass(beta[:, 0], beta[:, 1])
                return lambda t, x, eta: pendulum_rhs_pointmass(t, x, params, eta[..., 0])
            if self.kind is ModelKind.HYBRID:
                return lambda t, x, eta: hybrid_pendulum_rhs(t, x, beta, eta[..., 0], nets, norm, balance, scale)
            return lambda t, x, eta: data_driven_pendulum_rhs(t, x, beta, eta[..., 0], nets, norm, balance, scale)

        if conditioning is None:
            raise ConfigurationError("PK models need prior PK parameters and covariates.")
        if self.kind is ModelKind.MECHANISTIC:
            return lambda t, x, eta: pk_rhs(t, x, conditioning.params, eta[..., 0])
        if self.kind is ModelKind.HYBRID:
            return lambda t, x, eta: hybrid_pk_rhs(t, x, conditioning, eta[..., 0], nets, norm, balance, scale)
        return lambda t, x, eta: data_driven_pk_rhs(t, x, conditioning, eta[..., 0], nets, norm, balance, scale)

    def initial_state(self, observed: np.ndarray, conditioning=None, latent: Optional[np.ndarray] = None) -> np.ndarray:
        """
        Builds integrator states from observations. PK compartment models place
        A1 = Cp * V1 (prior volume) and take A2, A3 from `latent` (zeros if absent).
        """
        observed = np.atleast_2d(np.asarray(observed, dtype=np.float64))
        if self.case == "pendulum" or self.kind is ModelKind.DATA_DRIVEN:
            return observed.copy()
        batch = observed.shape[0]
        v1 = np.broadcast_to(np.asarray(conditioning.params.V1, dtype=np.float64), (batch,))
        latent = np.zeros((batch, 2)) if latent is None else np.atleast_2d(latent)
        return np.column_stack([observed[:, 0] * v1, latent[:, 0], latent[:, 1], observed[:, 1]])

    def observe(self, states, conditioning=None):
        """
        Observed channels: (theta, omega) for the pendulum, (Cp, Ce) for PK.
        """
        if self.case == "pendulum" or self.kind is ModelKind.DATA_DRIVEN:
            return states
        v1 = np.asarray(conditioning.params.V1, dtype=np.float64)
        v1 = v1.reshape((-1,) + (1,) * (len(states.shape) - 2)) if v1.ndim else v1
        return stack([channel(states, 0) / v1, channel(states, 3)], axis=-1)

    def architecture(self) -> Dict[str, Any]:
        return {
            "case": self.case,
            "kind": self.kind.value,
            "nets": {name: net.descriptor() for name, net in self.nets.items()},
            "normalization": self.normalization.to_dict(),
            "balance": self.balance,
            "output_scale": self.output_scale,
            "beta_source": self.beta_source,
            "encoder": self.encoder_ref,
        }

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for name, net in self.nets.items():
            state.update({f"{name}.{key}": value for key, value in net.state_dict().items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for name, net in self.nets.items():
            prefix = f"{name}."
            net.load_state_dict({key[len(prefix):]: value for key, value in state.items() if key.startswith(prefix)})

    def save(self, path: str, metadata: Optional[Dict[str, Any]] = None) -> None:
        Checkpoint.save(path, MODEL_CHECKPOINT_KIND, self.architecture(), self.state_dict(), metadata)

    @classmethod
    def load(cls, path: str) -> "HybridModel":
        """
        Raises:
            CheckpointError: If the architecture is incomplete or weights do not match.
        """
        payload = Checkpoint.load(path, MODEL_CHECKPOINT_KIND)
        architecture = payload["architecture"]
        try:
            nets = {name: ResidualMlp.from_descriptor(descriptor) for name, descriptor in architecture["nets"].items()}
            model = cls(architecture["case"], architecture["kind"], nets, Normalization.from_dict(architecture["normalization"]),
                        architecture.get("balance"), architecture.get("output_scale"), architecture.get("beta_source", "encoder"),
                        architecture.get("encoder"))
        except KeyError as exception_error:
            raise CheckpointError(f"Checkpoint {path} lacks architecture field {exception_error}.") from exception_error
        model.load_state_dict(payload["tensors"])
        return model


def _net_spec(config: Mapping[str, Any], case: str, kind: ModelKind) -> Dict[str, Any]:
    spec = config.get("model", {}).get(case, {}).get(kind.value)
    if spec is None:
        raise ConfigurationError(f"No architecture configured for model.{case}.{kind.value}.")
    return spec


def build_model(kind: Any, case: str, config: Mapping[str, Any], rng: Optional[np.random.Generator] = None,
                normalization: Optional[Normalization] = None) -> HybridModel:
    """
    Constructs the networks of a model kind for a case study.

    Args:
        kind: ModelKind or its string value.
        case (str): "pendulum" or "pk".
        config (Mapping): Merged configuration (sections `model` and `pendulum`).
        rng (np.random.Generator): Initialisation randomness.
        normalization (Normalization): Input normalisation; case defaults if None.

    Returns:
        HybridModel: MechanisticOnly has no networks; Hybrid has four correction
        networks; DataDrivenOnly has one network per state channel.

    Raises:
        ConfigurationError: On an unknown case or kind.
    """
    logger.debug("Starting: build_model.", case=case, kind=str(kind))
    kind = ModelKind.parse(kind)
    if case not in ("pendulum", "pk"):
        raise ConfigurationError(f"Unknown case '{case}'. Use 'pendulum' or 'pk'.")
    rng = rng if rng is not None else np.random.default_rng(0)
    normalization = normalization or Normalization.default(case)
    model_config = config.get("model", {})
    case_config = model_config.get(case, {})
    output_scale = dict(case_config.get("output_scale", {}))
    balance = dict(model_config.get("balance", {}))
    beta_source = config.get("pendulum", {}).get("beta_source", "encoder") if case == "pendulum" else "table"

    nets: Dict[str, ResidualMlp] = {}
    if kind is not ModelKind.MECHANISTIC:
        spec = _net_spec(config, case, kind)
        conditioning_dim = 2 if case == "pendulum" else len(COVARIATE_NAMES)
        if kind is ModelKind.HYBRID:
            names = PENDULUM_HYBRID_NETS if case == "pendulum" else PK_HYBRID_NETS
            state_features = 2 if case == "pendulum" else 4
            input_dim = 1 + state_features + conditioning_dim
        else:
            names = PENDULUM_DATA_DRIVEN_NETS if case == "pendulum" else PK_DATA_DRIVEN_NETS
            input_dim = 1 + 2 + conditioning_dim + 1
        for name in names:
            nets[name] = ResidualMlp(input_dim, int(spec["hidden_dim"]), int(spec["num_blocks"]), 1, rng,
                                     float(spec["gain"]), bool(spec.get("final_norm", True)))
        if case == "pk" and kind is ModelKind.HYBRID:
            nets["g_np"].output_projection.bias.data[...] = IDENTITY_SOFTPLUS_BIAS

    model = HybridModel(case, kind, nets, normalization, balance, output_scale, beta_source)
    logger.debug("Finished: build_model.", parameters=model.num_parameters())
    return model


def zero_corrections(model: HybridModel) -> HybridModel:
    """
    Zeros every correction network's output projection weights and bias, keeping the
    softplus gate bias at its identity value.
    """
    for name, net in model.nets.items():
        net.output_projection.weight.data[...] = 0.0
        net.output_projection.bias.data[...] = IDENTITY_SOFTPLUS_BIAS if (model.case == "pk" and name == "g_np") else 0.0
    return model


def clamp_beta(beta: np.ndarray) -> np.ndarray:
    """
    Floors parameter estimates so the point-mass core stays defined.
    """
    beta = np.asarray(beta, dtype=np.float64)
    clamped = np.maximum(beta, BETA_FLOOR)
    if np.any(clamped != beta):
        logger.warning("Clamped non-positive parameter estimates.", count=int(np.sum(clamped != beta)))
    return clamped
