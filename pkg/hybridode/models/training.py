"""
Two-stage training: encoder pretraining on labelled simulations of the parametric
prior, then correction training with the encoder frozen. Also holds the window sampler
with its batch-composition guarantees, the reconstruction losses and the run directory
artifacts (config snapshot, per-epoch CSV, best and final checkpoints).
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple
import numpy as np
import pandas as pd
import yaml
from hybridode.models.datagen import Dataset, covariates_from_records, encoder_windows
from hybridode.models.hybrid import CE_SCALE, CP_SCALE, HybridModel, ModelKind, PkConditioning, build_model, clamp_beta
from hybridode.models.mechanistic import PkParamTable
from hybridode.models.networks import Adam, Checkpoint, EarlyStopping, EncoderNet, ReduceLROnPlateau
from hybridode.models.numerics import Tape, Tensor, clip_grad_norm, values_of
from hybridode.models.odeint import TimeGrid, integrate, integrate_differentiable
from hybridode.utils.exceptions import (ConfigurationError, IntegrationError, MissingArtifactError, ShapeError, TrainingDivergedError,
                                        WindowSamplingError)
from hybridode.utils.helper import Helper
from hybridode.utils.logger import StructuredLogger

logger = StructuredLogger()

ENCODER_CHECKPOINT_KIND = "encoder"
PLAIN_MSE = "plain_mse"
RELATIVE_MSE = "relative_mse"
# Random streams for network initialisation and window sampling.
INIT_STREAM = 101
TRAIN_STREAM = 102
ENCODER_STREAM = 103


@dataclass
class TrainConfig:
    """
    Optimisation settings for one training stage.

    Raises:
        ConfigurationError: If a composition fraction lies outside [0, 1], the fractions
        sum above 1, or a size is not positive.
    """
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    max_epochs: int = 100
    early_stop_patience: Optional[int] = 12
    early_stop_tol: float = 0.0
    scheduler: Dict[str, Any] = field(default_factory=lambda: {"kind": "none", "factor": 0.5, "patience": 5})
    window_len: Optional[int] = 20
    zero_start_min: float = 0.15
    nonzero_eta_min: float = 0.15
    validation_fraction: float = 0.1
    clip_norm: Optional[float] = 10.0
    loss: str = PLAIN_MSE
    batches_per_epoch: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("zero_start_min", "nonzero_eta_min", "validation_fraction"):
            value = float(getattr(self, name))
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}.")
        if self.zero_start_min + self.nonzero_eta_min > 1.0:
            raise ConfigurationError("zero_start_min + nonzero_eta_min must not exceed 1.")
        if int(self.batch_size) < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}.")
        if int(self.max_epochs) < 0:
            raise ConfigurationError(f"max_epochs must be non-negative, got {self.max_epochs}.")
        if self.window_len is not None and int(self.window_len) < 1:
            raise ConfigurationError(f"window_len must be positive, got {self.window_len}.")
        if self.loss not in (PLAIN_MSE, RELATIVE_MSE):
            raise ConfigurationError(f"Unknown loss '{self.loss}'. Use '{PLAIN_MSE}' or '{RELATIVE_MSE}'.")
        if self.scheduler.get("kind", "none") not in ("none", "plateau"):
            raise ConfigurationError(f"Unknown scheduler '{self.scheduler.get('kind')}'. Use 'none' or 'plateau'.")

    @classmethod
    def from_dict(cls, section: Mapping[str, Any], seed: int = 0) -> "TrainConfig":
        known = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        known["seed"] = int(seed)
        return cls(**known)


@dataclass
class LossSpec:
    """
    Per-channel normalisers; the loss is the sum over channels of the mean squared
    normalised error. Unit normalisers give the plain trajectory MSE.
    """
    kind: str = PLAIN_MSE
    normalizers: Tuple[float, ...] = (1.0, 1.0)

    def __post_init__(self):
        if any(not float(v) > 0 for v in self.normalizers):
            raise ConfigurationError(f"Loss normalisers must be positive, got {self.normalizers}.")

    @classmethod
    def for_case(cls, case: str, kind: str) -> "LossSpec":
        if kind == RELATIVE_MSE:
            return cls(RELATIVE_MSE, (CP_SCALE, CE_SCALE) if case == "pk" else (1.0, 1.0))
        return cls(PLAIN_MSE, (1.0, 1.0))


def reconstruction_loss(pred, target, spec: LossSpec):
    """
    Sum over channels c of mean over batch and time of ((pred - target)_c / n_c)^2.

    For unit normalisers this equals the mean over batch and time of the squared
    error summed over channels.

    Returns:
        Tensor if `pred` is a Tensor, else float.

    Raises:
        ShapeError: If the shapes differ or the channel count does not match the normalisers.
    """
    target = values_of(target)
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"Prediction shape {tuple(pred.shape)} does not match target shape {target.shape}.")
    channels = target.shape[-1]
    if channels != len(spec.normalizers):
        raise ShapeError(f"Loss expects {len(spec.normalizers)} channels, got {channels}.")
    scaled = (pred - target) / np.asarray(spec.normalizers, dtype=np.float64)
    squared = (scaled * scaled).reshape(-1, channels)
    loss = squared.mean(axis=0).sum()
    return loss if isinstance(loss, Tensor) else float(loss)


@dataclass
class WindowBatch:
    """
    Windows of `window_len` steps: unit and start indices, per-window start times, the
    full stored state at the window start, the intervention and the observed targets.
    """
    units: np.ndarray
    starts: np.ndarray
    t0: np.ndarray
    start_state: np.ndarray
    eta: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return int(self.units.shape[0])


def _nonzero_windows(eta: np.ndarray, window_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    All (unit, start) pairs whose window [s, s + window_len) has a nonzero intervention.
    """
    active = np.any(eta != 0.0, axis=-1).astype(np.int64)
    cumulative = np.concatenate([np.zeros((active.shape[0], 1), dtype=np.int64), np.cumsum(active, axis=1)], axis=1)
    max_start = active.shape[1] - 1 - window_len
    counts = cumulative[:, window_len:window_len + max_start + 1] - cumulative[:, :max_start + 1]
    return np.nonzero(counts > 0)


def sample_window_batch(dataset: Dataset, window_len: int, batch_size: int, rng: np.random.Generator,
                        zero_start_min: float = 0.0, nonzero_eta_min: float = 0.0,
                        units: Optional[np.ndarray] = None) -> WindowBatch:
    """
    Samples windows with at least ceil(zero_start_min * B) starting at t = 0 and at least
    ceil(nonzero_eta_min * B) containing a nonzero intervention; the rest start uniformly.

    Args:
        dataset (Dataset): Source trajectories.
        window_len (int): Integration steps per window (window_len + 1 points).
        batch_size (int): Windows per batch.
        rng (np.random.Generator): Sampling randomness.
        units (np.ndarray): Restrict sampling to these units (default all).

    Raises:
        WindowSamplingError: If the trajectories are shorter than the window or the
        composition cannot be satisfied.
    """
    units = np.arange(len(dataset)) if units is None else np.asarray(units, dtype=np.int64)
    if units.size == 0:
        raise WindowSamplingError(f"Dataset {dataset.name} has no units to sample from.")
    points = dataset.states.shape[1]
    if window_len > points - 1:
        raise WindowSamplingError(f"Window of {window_len} steps exceeds trajectories of {points - 1} steps.")

    n_zero = int(math.ceil(zero_start_min * batch_size - 1e-9))
    n_active = int(math.ceil(nonzero_eta_min * batch_size - 1e-9))
    if n_zero + n_active > batch_size:
        raise WindowSamplingError(f"Composition needs {n_zero + n_active} windows in a batch of {batch_size}.")

    max_start = points - 1 - window_len
    chosen_units = rng.choice(units, size=batch_size)
    starts = rng.integers(0, max_start + 1, size=batch_size)
    starts[:n_zero] = 0
    if n_active:
        active_units, active_starts = _nonzero_windows(dataset.eta[units], window_len)
        if active_units.size == 0:
            raise WindowSamplingError(f"Dataset {dataset.name} has no window of {window_len} steps with a nonzero intervention.")
        picks = rng.integers(0, active_units.size, size=n_active)
        chosen_units[n_zero:n_zero + n_active] = units[active_units[picks]]
        starts[n_zero:n_zero + n_active] = active_starts[picks]

    offsets = starts[:, None] + np.arange(window_len + 1)[None, :]
    return WindowBatch(
        units=chosen_units,
        starts=starts,
        t0=dataset.times[starts],
        start_state=dataset.states[chosen_units, starts],
        eta=dataset.eta[chosen_units[:, None], offsets],
        target=dataset.observed[chosen_units[:, None], offsets],
    )


def full_batch(dataset: Dataset, units: Optional[np.ndarray] = None, start: int = 0) -> WindowBatch:
    """
    One window per unit covering the trajectory from `start` to the end.
    """
    units = np.arange(len(dataset)) if units is None else np.asarray(units, dtype=np.int64)
    starts = np.full(units.size, int(start))
    return WindowBatch(units, starts, dataset.times[starts], dataset.states[units, start], dataset.eta[units, start:],
                       dataset.observed[units, start:])


def _select_conditioning(conditioning, units: np.ndarray):
    if isinstance(conditioning, PkConditioning):
        return conditioning.select(units)
    return np.asarray(conditioning)[units]


def rollout_batch(model: HybridModel, conditioning, batch: WindowBatch, dt: float, differentiable: bool = True):
    """
    Integrates the model over every window from its stored start state and returns the
    observed channels, shape (B, L+1, 2).
    """
    bound = _select_conditioning(conditioning, batch.units)
    x0 = model.initial_state(batch.start_state[:, :2], bound, batch.start_state[:, 2:4] if batch.start_state.shape[1] > 2 else None)
    grid = TimeGrid(batch.t0, dt, batch.eta.shape[1] - 1)
    rhs = model.rhs(bound)
    if differentiable:
        states = integrate_differentiable(rhs, x0, grid, batch.eta)
    else:
        states = integrate(rhs, x0, grid, batch.eta).states
    return model.observe(states, bound)


def estimate_beta(encoder: EncoderNet, dataset: Dataset) -> np.ndarray:
    """
    Encoder estimates (m_hat, l_cm_hat) from each trajectory's prefix, floored positive.
    """
    encoder.eval()
    return clamp_beta(values_of(encoder(encoder_windows(dataset, encoder.window_len))))


def true_beta(dataset: Dataset) -> np.ndarray:
    return dataset.records[["m", "l_cm"]].to_numpy(dtype=np.float64)


def pk_conditioning(dataset: Dataset, table: PkParamTable) -> PkConditioning:
    patients = covariates_from_records(dataset.records)
    return PkConditioning.from_patients([table.params(p) for p in patients], patients)


def conditioning_matrix(conditioning) -> np.ndarray:
    return conditioning.covariates if isinstance(conditioning, PkConditioning) else np.asarray(conditioning)


@dataclass
class TrainResult:
    """
    Outcome of one training stage: per-epoch history and the best validation loss.
    """
    history: pd.DataFrame
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    final_state: Optional[Dict[str, np.ndarray]] = None


def _history_frame(rows: List[Dict[str, float]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=["epoch", "train_loss", "val_loss", "lr"])


def _split_units(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(fraction * n))
    if n_val >= n:
        n_val = n - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _check_finite_loss(value: float, epoch: int, stage: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{stage} loss became non-finite in epoch {epoch}.", epoch=epoch)


def pretrain_encoder(dataset: Dataset, cfg: TrainConfig, hidden_dim: int = 128, window: int = 100,
                     rng: Optional[np.random.Generator] = None) -> Tuple[EncoderNet, TrainResult]:
    """
    Fits an EncoderNet mapping trajectory prefixes (theta, omega, tau) to (m, l_cm) on
    labelled point-mass simulations, minimising the label MSE with Adam. Uses the
    dataset's `split` column (train/validation) and returns the best-validation weights.

    Raises:
        TrainingDivergedError: If a loss becomes non-finite, with the epoch index.
    """
    logger.debug("Starting: pretrain_encoder.", n=len(dataset), window=window)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    windows = encoder_windows(dataset, window)
    labels = true_beta(dataset)
    split = dataset.records["split"].to_numpy() if "split" in dataset.records else np.full(len(dataset), "train")
    train_idx = np.flatnonzero(split == "train")
    val_idx = np.flatnonzero(split == "validation")
    if val_idx.size == 0:
        train_idx, val_idx = _split_units(len(dataset), cfg.validation_fraction, rng)
        if val_idx.size == 0:
            val_idx = train_idx

    encoder = EncoderNet(window, 3, rng, hidden_dim=hidden_dim)
    optimizer = Adam(encoder.parameters(), cfg.learning_rate, cfg.weight_decay)
    scheduler = ReduceLROnPlateau(optimizer, cfg.scheduler.get("factor", 0.5), cfg.scheduler.get("patience", 5)) \
        if cfg.scheduler.get("kind") == "plateau" else None
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.early_stop_tol)

    def validation_loss() -> float:
        encoder.eval()
        estimate = values_of(encoder(windows[val_idx]))
        return float(np.mean((estimate - labels[val_idx]) ** 2))

    rows: List[Dict[str, float]] = []
    best_state = encoder.state_dict()
    best_epoch = 0
    for epoch in range(1, int(cfg.max_epochs) + 1):
        encoder.train()
        order = rng.permutation(train_idx)
        losses = []
        for batch in Helper.chunk(order, cfg.batch_size):
            if len(batch) < 2:
                continue
            with Tape(encoder.parameters()) as tape:
                diff = encoder(windows[batch]) - labels[batch]
                loss = (diff * diff).mean()
                grads = tape.backward(loss)
            _check_finite_loss(loss.item(), epoch, "Encoder")
            if cfg.clip_norm:
                clip_grad_norm(grads, cfg.clip_norm)
            optimizer.step(grads)
            losses.append(loss.item())

        val_loss = validation_loss()
        _check_finite_loss(val_loss, epoch, "Encoder validation")
        rows.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                     "val_loss": val_loss, "lr": optimizer.lr})
        logger.info("Encoder epoch finished.", epoch=epoch, train_loss=rows[-1]["train_loss"], val_loss=val_loss, lr=optimizer.lr)
        if stopper.step(val_loss):
            best_state = encoder.state_dict()
            best_epoch = epoch
        if scheduler is not None:
            scheduler.step(val_loss)
        if stopper.should_stop:
            logger.info("Encoder early stopping.", epoch=epoch, best_epoch=best_epoch)
            break

    encoder.load_state_dict(best_state)
    encoder.eval()
    best = stopper.best if rows else validation_loss()
    logger.debug("Finished: pretrain_encoder.", best_val_loss=best)
    return encoder, TrainResult(_history_frame(rows), float(best), best_epoch, len(rows))


def save_encoder(encoder: EncoderNet, path: str, metadata: Optional[Dict[str, Any]] = None) -> None:
    Checkpoint.save(path, ENCODER_CHECKPOINT_KIND, encoder.descriptor(), encoder.state_dict(), metadata)


def load_encoder(path: str) -> EncoderNet:
    payload = Checkpoint.load(path, ENCODER_CHECKPOINT_KIND)
    encoder = EncoderNet.from_descriptor(payload["architecture"])
    encoder.load_state_dict(payload["tensors"])
    return encoder.eval()


def fit_normalization(model: HybridModel, conditioning) -> None:
    """
    Sets the conditioning standardisation of a model from its training units.
    """
    model.normalization.fit_conditioning(conditioning_matrix(conditioning))


def train_corrections(model: HybridModel, dataset: Dataset, conditioning, cfg: TrainConfig, loss_spec: LossSpec,
                      rng: Optional[np.random.Generator] = None) -> TrainResult:
    """
    Fits the correction (or data-driven) networks by unrolling RK4 over sampled windows.

    Each window starts from the stored state at its first point; the loss compares the
    observed channels. A seeded `validation_fraction` of units drives early stopping and
    the best-validation weights are restored at the end. Models without networks, or a
    zero epoch budget, are returned unchanged.

    Args:
        model (HybridModel): Model to train in place.
        dataset (Dataset): Training trajectories.
        conditioning: (n, 2) parameter estimates (pendulum) or PkConditioning (PK).
        cfg (TrainConfig): Optimisation settings.
        loss_spec (LossSpec): Reconstruction loss.

    Raises:
        TrainingDivergedError: On a non-finite loss, with the epoch index.
        WindowSamplingError: If the batch composition cannot be satisfied.
    """
    logger.debug("Starting: train_corrections.", case=model.case, kind=model.kind.value, units=len(dataset))
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = model.parameters()
    window_len = int(cfg.window_len) if cfg.window_len else dataset.num_steps
    train_units, val_units = _split_units(len(dataset), cfg.validation_fraction, rng)
    if val_units.size == 0:
        val_units = train_units

    def validation_loss(batch: WindowBatch) -> float:
        try:
            pred = rollout_batch(model, conditioning, batch, dataset.dt, differentiable=False)
        except IntegrationError:
            return float("inf")
        return float(reconstruction_loss(values_of(pred), batch.target, loss_spec))

    val_batch = sample_window_batch(dataset, window_len, max(int(val_units.size), int(cfg.batch_size)), rng,
                                    cfg.zero_start_min, cfg.nonzero_eta_min, val_units)
    if not params or int(cfg.max_epochs) == 0:
        initial = validation_loss(val_batch)
        logger.debug("Finished: train_corrections.", trained=False)
        return TrainResult(_history_frame([]), initial, 0, 0)

    optimizer = Adam(params, cfg.learning_rate, cfg.weight_decay)
    scheduler = ReduceLROnPlateau(optimizer, cfg.scheduler.get("factor", 0.5), cfg.scheduler.get("patience", 5)) \
        if cfg.scheduler.get("kind") == "plateau" else None
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.early_stop_tol)
    batches = int(cfg.batches_per_epoch) if cfg.batches_per_epoch else max(1, int(math.ceil(train_units.size / cfg.batch_size)))

    rows: List[Dict[str, float]] = []
    best_state = model.state_dict()
    best_epoch = 0
    for epoch in range(1, int(cfg.max_epochs) + 1):
        losses = []
        for _ in range(batches):
            batch = sample_window_batch(dataset, window_len, int(cfg.batch_size), rng, cfg.zero_start_min, cfg.nonzero_eta_min,
                                        train_units)
            try:
                with Tape(params) as tape:
                    loss = reconstruction_loss(rollout_batch(model, conditioning, batch, dataset.dt), batch.target, loss_spec)
                    grads = tape.backward(loss)
            except IntegrationError as exception_error:
                raise TrainingDivergedError(f"Rollout diverged in epoch {epoch}: {exception_error}", epoch=epoch) from exception_error
            _check_finite_loss(loss.item(), epoch, "Training")
            if cfg.clip_norm:
                clip_grad_norm(grads, cfg.clip_norm)
            optimizer.step(grads)
            losses.append(loss.item())

        val_loss = validation_loss(val_batch)
        _check_finite_loss(val_loss, epoch, "Validation")
        rows.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "lr": optimizer.lr})
        logger.info("Epoch finished.", epoch=epoch, train_loss=rows[-1]["train_loss"], val_loss=val_loss, lr=optimizer.lr)
        if stopper.step(val_loss):
            best_state = model.state_dict()
            best_epoch = epoch
        if scheduler is not None:
            scheduler.step(val_loss)
        if stopper.should_stop:
            logger.info("Early stopping.", epoch=epoch, best_epoch=best_epoch)
            break

    final_state = model.state_dict()
    model.load_state_dict(best_state)
    logger.debug("Finished: train_corrections.", best_val_loss=stopper.best, best_epoch=best_epoch)
    return TrainResult(_history_frame(rows), float(stopper.best), best_epoch, len(rows), final_state)


def train_config_for(config: Mapping[str, Any], case: str, kind: str) -> TrainConfig:
    section = config.get("training", {}).get(case, {}).get(kind)
    if section is None:
        raise ConfigurationError(f"No training settings configured for training.{case}.{kind}.")
    return TrainConfig.from_dict(section, int(config["run"]["seed"]))


def write_run_artifacts(run_dir: str, config: Mapping[str, Any], model: HybridModel, result: TrainResult,
                        metadata: Optional[Dict[str, Any]] = None) -> None:
    """
    Writes `config.yaml`, `epochs.csv`, `best.json` (the model as passed, holding the
    best-validation weights) and `final.json` (the last-epoch weights, when training ran).
    """
    logger.debug("Starting: write_run_artifacts.", run_dir=run_dir)
    write_config_snapshot(run_dir, config)
    Helper.write_csv(os.path.join(run_dir, "epochs.csv"), result.history)
    meta = dict(metadata or {})
    meta.update({"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss if np.isfinite(result.best_val_loss) else None})
    model.save(os.path.join(run_dir, "best.json"), meta)
    meta["epochs_run"] = result.epochs_run
    if result.final_state is None:
        model.save(os.path.join(run_dir, "final.json"), meta)
    else:
        best_state = model.state_dict()
        model.load_state_dict(result.final_state)
        model.save(os.path.join(run_dir, "final.json"), meta)
        model.load_state_dict(best_state)
    logger.debug("Finished: write_run_artifacts.")


def write_config_snapshot(run_dir: str, config: Mapping[str, Any]) -> None:
    with open(os.path.join(run_dir, "config.yaml"), "w", encoding="utf-8") as handle:
        yaml.safe_dump(dict(config), handle, sort_keys=True, default_flow_style=False)


def model_conditioning(model: HybridModel, dataset: Dataset, encoder: Optional[EncoderNet] = None,
                       prior: Optional[PkParamTable] = None):
    """
    Conditioning for a model on a dataset: encoder estimates or true (m, L/2) for the
    pendulum, prior-table parameters plus covariates for PK.

    Raises:
        MissingArtifactError: If the pendulum model needs an encoder and none is given.
        ConfigurationError: If a PK model is evaluated without a prior table.
    """
    if model.case == "pendulum":
        if model.beta_source == "truth":
            return true_beta(dataset)
        if encoder is None:
            raise MissingArtifactError("Pendulum models with beta_source 'encoder' need an encoder checkpoint (--encoder).")
        return estimate_beta(encoder, dataset)
    if prior is None:
        raise ConfigurationError("PK models need the prior parameter table.")
    return pk_conditioning(dataset, prior)


def fit_model(kind: str, config: Mapping[str, Any], dataset: Dataset, encoder: Optional[EncoderNet] = None,
              prior: Optional[PkParamTable] = None, encoder_ref: Optional[Dict[str, str]] = None) -> Tuple[HybridModel, TrainResult]:
    """
    Builds a model of the given kind for the dataset's case, standardises its
    conditioning on the training units and trains it. Mechanistic models only get their
    validation loss recorded.
    """
    logger.debug("Starting: fit_model.", kind=kind, case=dataset.case)
    seed = int(config["run"]["seed"])
    model = build_model(kind, dataset.case, config, np.random.default_rng([seed, INIT_STREAM]))
    model.encoder_ref = encoder_ref if dataset.case == "pendulum" and model.beta_source == "encoder" else None
    conditioning = model_conditioning(model, dataset, encoder, prior)
    fit_normalization(model, conditioning)

    training_kind = ModelKind.HYBRID.value if model.kind is ModelKind.MECHANISTIC else model.kind.value
    cfg = train_config_for(config, dataset.case, training_kind)
    if model.kind is ModelKind.MECHANISTIC:
        cfg.max_epochs = 0
    result = train_corrections(model, dataset, conditioning, cfg, LossSpec.for_case(dataset.case, cfg.loss),
                               np.random.default_rng([seed, TRAIN_STREAM]))
    logger.debug("Finished: fit_model.", best_val_loss=result.best_val_loss)
    return model, result
