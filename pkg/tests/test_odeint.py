import numpy as np
import pytest
from hybridode.models.mechanistic import PendulumParams, PointMassPendulum, pendulum_energy
from hybridode.models.numerics import Tensor, gradient_check
from hybridode.models.odeint import InterventionSchedule, TimeGrid, Trajectory, integrate, integrate_differentiable
from hybridode.utils.exceptions import ConfigurationError, DataFormatError, IntegrationError, MissingArtifactError


def oscillator(t, x, eta):
    return np.stack([x[..., 1], -x[..., 0]], axis=-1)


def _oscillator_error(dt: float) -> float:
    grid = TimeGrid.from_horizon(10.0, dt)
    trajectory = integrate(oscillator, np.array([1.0, 0.0]), grid)
    exact = np.column_stack([np.cos(grid.points()), -np.sin(grid.points())])
    return float(np.max(np.abs(trajectory.states - exact)))


def test_time_grid_validation():
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 0.0, 10)
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 0.1, 0)
    grid = TimeGrid.from_horizon(10.0, 0.1)
    assert grid.num_steps == 100
    assert grid.num_points == 101
    assert grid.points()[-1] == pytest.approx(10.0)


def test_batched_start_times():
    points = TimeGrid(np.array([0.0, 2.0]), 0.5, 2).points()
    np.testing.assert_allclose(points, [[0.0, 0.5, 1.0], [2.0, 2.5, 3.0]])


def test_rk4_is_fourth_order():
    ratio = _oscillator_error(0.1) / _oscillator_error(0.05)
    assert 12.0 <= ratio <= 20.0


def test_first_state_equals_initial_state():
    x0 = np.array([[0.3, -0.1], [0.0, 0.2]])
    trajectory = integrate(oscillator, x0, TimeGrid(0.0, 0.1, 5))
    np.testing.assert_array_equal(trajectory.states[:, 0], x0)
    assert trajectory.states.shape == (2, 6, 2)


@pytest.mark.parametrize("l_cm", [1.5, 2.0, 2.25])
@pytest.mark.parametrize("theta0", [0.2, -0.1])
def test_pendulum_energy_is_conserved_without_torque(l_cm, theta0):
    params = PendulumParams.point_mass(4.0, l_cm)
    grid = TimeGrid.from_horizon(10.0, 0.1)
    trajectory = integrate(PointMassPendulum(params), np.array([theta0, 0.0]), grid)
    assert trajectory.states.shape == (grid.num_points, 2)
    energy = pendulum_energy(trajectory.states, params.inertia_point_mass, params.m, params.l_cm)
    assert np.max(np.abs(energy - energy[0])) / abs(energy[0]) < 1e-5


def test_intervention_is_piecewise_constant_per_interval():
    grid = TimeGrid(0.0, 1.0, 2)
    eta = np.array([[1.0], [0.0], [5.0]])
    trajectory = integrate(lambda t, x, u: u.copy(), np.zeros(1), grid, eta)
    # The value at the last grid point never drives a step.
    np.testing.assert_allclose(trajectory.states[:, 0], [0.0, 1.0, 1.0])


def test_constant_schedule():
    grid = TimeGrid(0.0, 0.5, 4)
    schedule = InterventionSchedule.constant(2.0, grid)
    assert schedule.values.shape == (5, 1)
    trajectory = integrate(lambda t, x, u: u.copy(), np.zeros(1), grid, schedule)
    assert trajectory.states[-1, 0] == pytest.approx(4.0)


def test_non_finite_state_reports_the_step():
    def exploding(t, x, eta):
        return np.where((t >= 0.27)[:, None], np.inf, 0.0) * np.ones_like(x)

    with pytest.raises(IntegrationError) as error:
        integrate(exploding, np.ones(1), TimeGrid(0.0, 0.1, 10))
    assert error.value.step == 3


def test_differentiable_integration_matches_plain(rng):
    params = PendulumParams.point_mass(np.array([3.0, 4.5]), np.array([1.5, 2.5]))
    grid = TimeGrid(0.0, 0.1, 20)
    eta = np.repeat(np.array([10.0, 11.5])[:, None, None], grid.num_points, axis=1)
    x0 = rng.uniform(-0.2, 0.2, size=(2, 2))
    plain = integrate(PointMassPendulum(params), x0, grid, eta).states
    traced = integrate_differentiable(PointMassPendulum(params), x0, grid, eta)
    np.testing.assert_allclose(traced.data, plain, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_gradient_through_the_integrator(seed):
    rng = np.random.default_rng(seed)
    params = PendulumParams.point_mass(np.array([3.0, 4.5]), np.array([1.5, 2.5]))
    grid = TimeGrid(0.0, 0.1, 10)
    eta = np.full((2, grid.num_points, 1), 10.0)
    x0 = Tensor(rng.uniform(-0.2, 0.2, size=(2, 2)))

    def loss():
        states = integrate_differentiable(PointMassPendulum(params), x0, grid, eta)
        return (states * states).mean()

    assert gradient_check(loss, [x0]) < 1e-6


def test_trajectory_csv_round_trip(tmp_path):
    trajectory = Trajectory(np.array([0.0, 0.1, 0.2]), np.array([[1.0, 2.0], [1.1, 2.1], [1.0 / 3.0, 2.2]]),
                            np.array([[0.0], [1.0], [2.0]]))
    path = str(tmp_path / "trajectory.csv")
    trajectory.to_csv(path)
    loaded = Trajectory.from_csv(path)
    np.testing.assert_array_equal(loaded.times, trajectory.times)
    np.testing.assert_array_equal(loaded.states, trajectory.states)
    np.testing.assert_array_equal(loaded.eta, trajectory.eta)


def test_trajectory_csv_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        Trajectory.from_csv(str(tmp_path / "missing.csv"))
    path = tmp_path / "bad.csv"
    path.write_text("time,a\n0.0,1.0\n")
    with pytest.raises(DataFormatError) as error:
        Trajectory.from_csv(str(path))
    assert error.value.line == 1
