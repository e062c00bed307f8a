"""
Fixed-step classical Runge-Kutta (RK4) integration of parameterised right-hand sides.

Both integrators share one step function. `integrate` works on plain arrays and
returns a Trajectory; `integrate_differentiable` keeps every stage on the active tape so
that gradients of any trajectory functional reach the network weights (and x0 when it
is a watched tensor). The intervention is piecewise constant per grid interval: all
four stages of step n use the value at grid point n.
"""

__author__ = "HybridODE contributors"
__copyright__ = "Copyright (C) 2026 HybridODE contributors"
__license__ = "GPL-3.0"


from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union
import numpy as np
import pandas as pd
from hybridode.models.numerics import Tensor, as_tensor, tstack, values_of
from hybridode.utils.exceptions import ConfigurationError, DataFormatError, IntegrationError, MissingArtifactError, ShapeError
from hybridode.utils.helper import Helper
from hybridode.utils.logger import StructuredLogger

logger = StructuredLogger()

# rhs(t, x, eta) -> dx/dt with t of shape (B,), x of shape (B, k), eta of shape (B, r).
RhsFunction = Callable[[np.ndarray, Union[np.ndarray, Tensor], np.ndarray], Union[np.ndarray, Tensor]]


@dataclass(frozen=True)
class TimeGrid:
    """
    Uniform grid t0 + k*dt, k = 0..num_steps. `t0` may be a per-sample array so that
    windows with different start times integrate in one batch.
    """
    t0: Union[float, np.ndarray]
    dt: float
    num_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"Time step must be positive, got {self.dt}.")
        if int(self.num_steps) < 1:
            raise ConfigurationError(f"A time grid needs at least one step, got {self.num_steps}.")

    @classmethod
    def from_horizon(cls, t_max: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        return cls(t0, dt, int(round((t_max - t0) / dt)))

    @property
    def num_points(self) -> int:
        return int(self.num_steps) + 1

    def points(self) -> np.ndarray:
        """
        Grid points computed as t0 + k*dt (shape (N+1,) or (B, N+1) for batched t0).
        """
        offsets = np.arange(self.num_points, dtype=np.float64) * self.dt
        t0 = np.asarray(self.t0, dtype=np.float64)
        if t0.ndim == 0:
            return float(t0) + offsets
        return t0[:, None] + offsets[None, :]

    def batch_points(self, batch: int) -> np.ndarray:
        points = self.points()
        if points.ndim == 1:
            return np.broadcast_to(points, (batch, self.num_points))
        if points.shape[0] != batch:
            raise ShapeError(f"Time grid carries {points.shape[0]} start times for a batch of {batch}.")
        return points


class InterventionSchedule:
    """
    Piecewise-constant intervention values on the grid points, shape (N+1, r) for one
    unit or (B, N+1, r) for a batch.
    """
    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim not in (2, 3):
            raise ShapeError(f"Intervention values must have 1 to 3 dimensions, got {values.shape}.")
        self.values = values

    @classmethod
    def constant(cls, value: float, grid: TimeGrid, channels: int = 1) -> "InterventionSchedule":
        return cls(np.full((grid.num_points, channels), float(value)))

    @classmethod
    def zeros(cls, grid: TimeGrid, channels: int = 1) -> "InterventionSchedule":
        return cls(np.zeros((grid.num_points, channels)))

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def batched(self, batch: int, num_points: int) -> np.ndarray:
        values = self.values if self.values.ndim == 3 else np.broadcast_to(self.values, (batch,) + self.values.shape)
        if values.shape[0] != batch or values.shape[1] < num_points:
            raise ShapeError(f"Intervention of shape {self.values.shape} does not cover {batch} units x {num_points} grid points.")
        return values


@dataclass
class Trajectory:
    """
    Grid times plus states (and the applied intervention) for one unit, or a batch
    of units when the arrays carry a leading batch dimension.
    """
    times: np.ndarray
    states: np.ndarray
    eta: Optional[np.ndarray] = None

    @property
    def state_dim(self) -> int:
        return self.states.shape[-1]

    def to_frame(self) -> pd.DataFrame:
        if self.states.ndim != 2:
            raise ShapeError("Only single-unit trajectories export to CSV.")
        columns = {"t": self.times}
        for index in range(self.states.shape[1]):
            columns[f"x{index + 1}"] = self.states[:, index]
        if self.eta is not None:
            for index in range(self.eta.shape[1]):
                columns[f"eta{index + 1}"] = self.eta[:, index]
        return pd.DataFrame(columns)

    def to_csv(self, path: str) -> None:
        """
        Writes `t,x1..xk,eta1..etar`, one row per grid point, 17 significant digits.
        """
        Helper.write_csv(path, self.to_frame())

    @classmethod
    def from_csv(cls, path: str) -> "Trajectory":
        """
        Raises:
            MissingArtifactError: If the file does not exist.
            DataFormatError: If the header is not `t,x1..xk[,eta1..etar]`.
        """
        try:
            frame = pd.read_csv(path, float_precision="round_trip")
        except FileNotFoundError as exception_error:
            raise MissingArtifactError(f"Trajectory file {path} does not exist.", path=path) from exception_error

        columns = list(frame.columns)
        state_columns = [c for c in columns if c.startswith("x")]
        eta_columns = [c for c in columns if c.startswith("eta")]
        expected = ["t"] + [f"x{i + 1}" for i in range(len(state_columns))] + [f"eta{i + 1}" for i in range(len(eta_columns))]
        if columns != expected or not state_columns:
            raise DataFormatError(f"Unexpected trajectory header in {path}: {','.join(columns)}.", line=1)

        eta = frame[eta_columns].to_numpy(dtype=np.float64) if eta_columns else None
        return cls(frame["t"].to_numpy(dtype=np.float64), frame[state_columns].to_numpy(dtype=np.float64), eta)


def _rk4_step(rhs: RhsFunction, t: np.ndarray, x, eta: np.ndarray, dt: float):
    half = dt / 2.0
    k1 = rhs(t, x, eta)
    k2 = rhs(t + half, x + half * k1, eta)
    k3 = rhs(t + half, x + half * k2, eta)
    k4 = rhs(t + dt, x + dt * k3, eta)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _prepare(grid: TimeGrid, eta, batch_from) -> tuple:
    batch, state_dim = batch_from.shape
    if eta is None:
        eta_values = np.zeros((batch, grid.num_points, 1))
    else:
        schedule = eta if isinstance(eta, InterventionSchedule) else InterventionSchedule(eta)
        eta_values = schedule.batched(batch, grid.num_points)
    return grid.batch_points(batch), eta_values


def integrate(rhs: RhsFunction, x0, grid: TimeGrid, eta=None) -> Trajectory:
    """
    Integrates dx/dt = rhs(t, x, eta) with classical RK4 on a fixed grid.

    Args:
        rhs (RhsFunction): Right-hand side; parameters are bound inside it.
        x0: Initial state of shape (k,) or a batch of shape (B, k).
        grid (TimeGrid): Integration grid.
        eta: InterventionSchedule or array of shape (N+1, r) / (B, N+1, r); zeros if None.

    Returns:
        Trajectory: N+1 states per unit; state 0 equals x0.

    Raises:
        IntegrationError: If a non-finite state appears, with the failing step index.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    x = np.atleast_2d(x0).copy()
    times, eta_values = _prepare(grid, eta, x)

    states = np.empty((x.shape[0], grid.num_points, x.shape[1]))
    states[:, 0] = x
    for step in range(grid.num_steps):
        x = values_of(_rk4_step(rhs, times[:, step], x, eta_values[:, step, :], grid.dt))
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"Non-finite state produced at integration step {step + 1}.", step=step + 1)
        states[:, step + 1] = x

    eta_out = np.array(eta_values[:, :grid.num_points, :])
    if single:
        return Trajectory(np.array(times[0]), states[0], eta_out[0])
    return Trajectory(np.array(times), states, eta_out)


def integrate_differentiable(rhs: RhsFunction, x0, grid: TimeGrid, eta=None) -> Tensor:
    """
    RK4 integration with every stage recorded on the active tape.

    Args:
        rhs (RhsFunction): Right-hand side that may evaluate correction networks.
        x0: Tensor or array of shape (B, k) (or (k,)); a watched Tensor receives gradients.
        grid (TimeGrid): Integration grid, possibly with per-sample start times.
        eta: Intervention as for `integrate`.

    Returns:
        Tensor: States of shape (B, N+1, k) (or (N+1, k) for a single unit).

    Raises:
        IntegrationError: If a non-finite state appears, with the failing step index.
    """
    x0 = as_tensor(x0)
    single = x0.ndim == 1
    x = x0.reshape(1, -1) if single else x0
    times, eta_values = _prepare(grid, eta, x.data)

    states: List[Tensor] = [x]
    for step in range(grid.num_steps):
        x = as_tensor(_rk4_step(rhs, times[:, step], x, eta_values[:, step, :], grid.dt))
        if not np.all(np.isfinite(x.data)):
            raise IntegrationError(f"Non-finite state produced at integration step {step + 1}.", step=step + 1)
        states.append(x)

    trajectory = tstack(states, axis=1)
    return trajectory[0] if single else trajectory
