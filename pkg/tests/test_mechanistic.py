import math
import types
import numpy as np
import pytest
from hybridode.models.mechanistic import (CylinderPendulum, PatientCovariates, PendulumParams, PkModel, PkParams, PkParamTable,
                                          PointMassPendulum, bolus_schedule, covariates_to_params, james_vertex_weight,
                                          lean_body_mass_james, pendulum_rhs_cylinder, pendulum_rhs_pointmass, pk_rhs,
                                          small_angle_period)
from hybridode.models.odeint import TimeGrid, integrate
from hybridode.utils.exceptions import ConfigurationError, MissingArtifactError


def _reference_patient(**overrides):
    values = dict(age=40.0, sex="male", weight=75.0, height=178.0, opioid=False, patient_id="P1")
    values.update(overrides)
    return PatientCovariates(**values)


def _pk_params():
    return PkParams(V1=4.27, V2=24.0, V3=238.0, k10=0.0074, k12=0.0050, k21=0.0009, k13=0.0033, k31=0.00006, ke0=0.0076)


def test_pendulum_params_validation():
    with pytest.raises(ConfigurationError):
        PendulumParams.point_mass(-1.0, 2.0)
    with pytest.raises(ConfigurationError):
        PendulumParams.cylinder(np.array([3.5, 0.0]), np.array([4.0, 4.0]), np.array([2.0, 2.0]))


def test_inertia():
    params = PendulumParams.cylinder(4.0, 4.0, 2.0)
    assert params.l_cm == pytest.approx(2.0)
    assert params.inertia_cylinder == pytest.approx(4.0 * (1.0 + 16.0 / 3.0))
    assert PendulumParams.point_mass(3.0, 2.0).inertia_point_mass == pytest.approx(12.0)
    with pytest.raises(ConfigurationError):
        _ = PendulumParams.point_mass(3.0, 2.0).inertia_cylinder


def test_small_angle_period_matches_simulation():
    params = PendulumParams.point_mass(4.0, 2.0)
    grid = TimeGrid.from_horizon(10.0, 0.001)
    theta = integrate(PointMassPendulum(params), np.array([0.01, 0.0]), grid).states[:, 0]
    times = grid.points()
    crossings = np.flatnonzero(np.sign(theta[:-1]) != np.sign(theta[1:]))
    exact = times[crossings] - theta[crossings] * (times[crossings + 1] - times[crossings]) / (theta[crossings + 1] - theta[crossings])
    measured = 2.0 * np.mean(np.diff(exact))
    expected = small_angle_period(params.inertia_point_mass, 4.0, 2.0)
    assert expected == pytest.approx(2.0 * math.pi * math.sqrt(2.0 / 9.81))
    assert measured == pytest.approx(expected, rel=1e-3)


def test_cylinder_torque_accelerates():
    params = PendulumParams.cylinder(np.array([4.0]), np.array([4.0]), np.array([2.0]))
    rhs = CylinderPendulum(params)
    derivative = rhs(np.zeros(1), np.zeros((1, 2)), np.array([[10.0]]))
    assert derivative[0, 1] == pytest.approx(10.0 / params.inertia_cylinder[0])


def test_pk_params_must_be_positive():
    with pytest.raises(ConfigurationError):
        PkParams(V1=4.0, V2=20.0, V3=200.0, k10=0.0, k12=0.01, k21=0.01, k13=0.01, k31=0.01, ke0=0.01)


def test_pk_mass_is_conserved_without_elimination():
    params = types.SimpleNamespace(V1=4.0, k10=0.0, k12=0.01, k21=0.002, k13=0.005, k31=0.0001, ke0=0.01)
    grid = TimeGrid.from_horizon(300.0, 0.5)
    states = integrate(lambda t, x, eta: pk_rhs(t, x, params, eta[..., 0]), np.array([100.0, 0.0, 0.0, 0.0]), grid).states
    np.testing.assert_allclose(states[:, :3].sum(axis=1), 100.0, rtol=1e-12)


def test_pk_response_is_linear_in_the_dose():
    grid = TimeGrid.from_horizon(210.0, 0.5)
    schedule = bolus_schedule(140.0, grid)
    single = integrate(PkModel(_pk_params()), np.zeros(4), grid, schedule).states
    double = integrate(PkModel(_pk_params()), np.zeros(4), grid, 2.0 * schedule).states
    np.testing.assert_allclose(double, 2.0 * single, rtol=1e-10, atol=1e-12)


def test_pk_states_stay_non_negative():
    grid = TimeGrid.from_horizon(210.0, 0.5)
    states = integrate(PkModel(_pk_params()), np.zeros(4), grid, bolus_schedule(175.0, grid)).states
    assert np.all(states >= -1e-12)
    assert states[:, 3].max() > 0.0


def test_bolus_schedule_splits_the_dose():
    grid = TimeGrid.from_horizon(210.0, 0.5)
    schedule = bolus_schedule(70.0, grid, bolus_size=30.0, bolus_interval=10.0)
    assert schedule.shape == (421, 1)
    np.testing.assert_allclose(schedule[[0, 20, 40], 0], [60.0, 60.0, 20.0])
    assert schedule.sum() * grid.dt == pytest.approx(70.0)
    assert np.count_nonzero(schedule) == 3


def test_bolus_schedule_errors():
    grid = TimeGrid.from_horizon(20.0, 0.5)
    with pytest.raises(ConfigurationError):
        bolus_schedule(-1.0, grid)
    with pytest.raises(ConfigurationError):
        bolus_schedule(120.0, grid)
    assert not np.any(bolus_schedule(0.0, grid))


def test_patient_covariates():
    patient = _reference_patient(weight=70.0, height=175.0)
    assert patient.bmi == pytest.approx(70.0 / 1.75 ** 2)
    assert patient.is_male
    with pytest.raises(ConfigurationError):
        _reference_patient(sex="unknown")
    with pytest.raises(ConfigurationError):
        _reference_patient(weight=0.0)


@pytest.mark.parametrize("name", ["prior", "oracle"])
def test_bundled_tables_give_positive_parameters(name):
    table = PkParamTable.load(name)
    assert len(table.checksum) == 64
    for patient in (_reference_patient(), _reference_patient(age=85.0, sex="female", weight=110.0, height=160.0, opioid=True)):
        params = table.params(patient)
        assert all(value > 0 for value in params.as_dict().values())
        assert 1.0 < params.V1 < 30.0


def test_tables_differ():
    patient = _reference_patient()
    assert PkParamTable.load("prior").params(patient).V1 != pytest.approx(PkParamTable.load("oracle").params(patient).V1)


def test_table_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        PkParamTable.load(str(tmp_path / "missing.yaml"))
    with pytest.raises(ConfigurationError):
        PkParamTable.from_dict({"schema_version": "1.0", "structure": "unknown", "lean_body_mass": "james"})
    with pytest.raises(ConfigurationError):
        PkParamTable.from_dict({"schema_version": "3.0", "structure": "allometric", "lean_body_mass": "james"})


def test_table_rejects_non_positive_quantities():
    table = PkParamTable.from_dict({"schema_version": "1.0", "structure": "linear_covariate", "lean_body_mass": "james",
                                    "coefficients": {"v1": -1.0, "v2": 1.0, "v3": 1.0, "cl1": 1.0, "cl2": 1.0, "cl3": 1.0,
                                                     "ke0": 1.0}})
    with pytest.raises(ConfigurationError) as error:
        table.params(_reference_patient())
    assert "v1" in str(error.value)


def test_stack_and_select():
    stacked = PkParams.stack([_pk_params(), _pk_params()])
    assert stacked.V1.shape == (2,)
    assert stacked.select(np.array([1, 1, 0])).k10.shape == (3,)


@pytest.mark.parametrize("rhs,params", [
    (pendulum_rhs_pointmass, PendulumParams.point_mass(1.0, 1.0)),
    (pendulum_rhs_cylinder, PendulumParams.cylinder(4.0, 4.0, 2.0)),
])
def test_pendulum_equilibrium(rhs, params):
    np.testing.assert_array_equal(rhs(0.0, np.zeros(2), params, 0.0), [0.0, 0.0])


def test_point_mass_rhs_values():
    assert pendulum_rhs_pointmass(0.0, np.array([math.pi / 2, 0.0]), PendulumParams.point_mass(1.0, 1.0), 0.0)[1] == pytest.approx(-9.81)
    assert pendulum_rhs_pointmass(0.0, np.array([0.0, 0.5]), PendulumParams.point_mass(2.0, 1.0), 4.0).tolist() == [0.5, 2.0]


def test_cylinder_rhs_value():
    derivative = pendulum_rhs_cylinder(0.0, np.array([math.pi / 2, 0.0]), PendulumParams.cylinder(4.0, 4.0, 2.0), 0.0)
    assert derivative[1] == pytest.approx(-9.81 * 2.0 / (1.0 + 16.0 / 3.0))
    assert derivative[1] == pytest.approx(-3.0979, abs=1e-4)
    with pytest.raises(ConfigurationError):
        pendulum_rhs_cylinder(0.0, np.zeros(2), PendulumParams.point_mass(4.0, 2.0), 0.0)


def test_thin_rod_swings_slower_than_a_point_mass_at_its_centre():
    rod = PendulumParams.cylinder(4.0, 4.0, 1e-9)
    point = PendulumParams.point_mass(4.0, 2.0)
    rod_frequency = math.sqrt(-pendulum_rhs_cylinder(0.0, np.array([1e-6, 0.0]), rod, 0.0)[1] / 1e-6)
    point_frequency = math.sqrt(-pendulum_rhs_pointmass(0.0, np.array([1e-6, 0.0]), point, 0.0)[1] / 1e-6)
    assert rod_frequency / point_frequency == pytest.approx(math.sqrt(3.0 / 4.0), rel=1e-6)


def test_covariates_to_params_is_pure():
    table = PkParamTable.load("prior")
    assert covariates_to_params(table, _reference_patient()) == covariates_to_params(table, _reference_patient())


def test_oracle_clearance_scales_allometrically():
    table = PkParamTable.load("oracle")
    light = table.raw_quantities(_reference_patient(weight=50.0, height=175.0))
    heavy = table.raw_quantities(_reference_patient(weight=100.0, height=175.0))
    assert heavy["cl1"] / light["cl1"] == pytest.approx(2.0 ** 0.75)


def test_james_lean_body_mass_falls_past_its_vertex():
    vertex = james_vertex_weight("male", 170.0)
    assert vertex == pytest.approx(1.1 * 170.0 ** 2 / 256.0)
    assert lean_body_mass_james("male", vertex + 15.0, 170.0) < lean_body_mass_james("male", vertex, 170.0)
    high_bmi = _reference_patient(weight=130.0, height=170.0)
    assert high_bmi.bmi == pytest.approx(45.0, abs=0.1)
    assert high_bmi.weight > vertex
    assert all(value > 0 for value in covariates_to_params(PkParamTable.load("prior"), high_bmi).as_dict().values())
