import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdvmpc import models as M

THETA_BOX = st.tuples(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50)
).map(np.array)


# --- quadcopter derivative ----------------------------------------------------


def test_quad_hover_is_equilibrium(quad):
    x = np.zeros(9)
    x[:3] = [-0.67, -0.33, 0.0]
    assert np.linalg.norm(quad.dynamics(x, np.zeros(4))) == 0.0


def test_quad_drag_only_term(quad):
    x = np.zeros(9)
    x[3] = 1.0
    dx = quad.dynamics(x, np.zeros(4))
    assert dx[3] == pytest.approx(-0.1, abs=1e-12)
    assert np.allclose(dx[6:], 0.0)


def test_quad_attitude_inner_loop(quad):
    # (0.95 * 0.2 - 0.1) / 0.1901
    x = np.zeros(9)
    x[6] = 0.1
    u = np.zeros(4)
    u[1] = 0.2
    assert quad.dynamics(x, u)[6] == pytest.approx(0.47343503419253025, abs=1e-12)


def test_quad_thrust_singularity(quad):
    x = np.zeros(9)
    x[6] = np.pi / 2 - 1e-7
    with pytest.raises(M.ThrustSingularityError):
        quad.dynamics(x, np.zeros(4))


def test_quad_wind_enters_velocity_rows(quad):
    x = np.zeros(9)
    dx = quad.dynamics(x, np.zeros(4), f_ext=np.array([0.0, 3.0, 0.0]))
    assert dx[4] == pytest.approx(3.0)
    assert np.allclose(np.delete(dx, 4), 0.0)


# --- boat derivative ----------------------------------------------------------


def test_boat_rest_equilibrium(boat):
    assert np.linalg.norm(boat.dynamics(np.zeros(6), np.zeros(3))) == 0.0


def test_boat_heading_rotation(boat):
    x = np.zeros(6)
    x[2] = np.pi / 2
    x[3] = 1.0
    dx = boat.dynamics(x, np.zeros(3))
    assert dx[0] == pytest.approx(0.0, abs=1e-12)
    assert dx[1] == pytest.approx(1.0)
    assert dx[2] == 0.0


def test_boat_inputs_are_accelerations(boat):
    dx = boat.dynamics(np.zeros(6), np.array([1.0, 0.0, 0.2]))
    assert np.allclose(dx, [0, 0, 0, 1.0, 0.0, 0.2])


# --- integration ---------------------------------------------------------------


def test_rk4_fixed_point_at_equilibrium(quad, boat):
    for model, theta in ((quad, np.array([1.0, -2.0, 3.0])), (boat, np.array([0.5, 0.5, 0.0]))):
        xbar, ubar = M.steady_state_maps(model, theta)
        x1 = M.rk4_step(model, xbar, ubar, None, 0.1)
        assert np.linalg.norm(x1 - xbar) < 1e-12


def test_rk4_scalar_decay_closed_form():
    toy = M.linear_model(np.array([[-1.0]]), np.zeros((1, 1)))
    x1 = M.rk4_step(toy, np.array([1.0]), np.zeros(1), None, 0.1)
    assert x1[0] == pytest.approx(np.exp(-0.1), abs=1e-7)


def test_rk4_boat_double_integrator(boat):
    x1 = M.rk4_step(boat, np.zeros(6), np.array([1.0, 0.0, 0.0]), None, 0.1)
    assert x1[0] == pytest.approx(0.005, abs=1e-6)
    assert x1[3] == pytest.approx(0.1, abs=1e-12)


def test_rk4_rejects_nonpositive_dt(boat):
    with pytest.raises(ValueError):
        M.rk4_step(boat, np.zeros(6), np.zeros(3), None, 0.0)


def test_rk4_is_fourth_order(quad):
    # halving dt over a fixed interval shrinks the error by ~2^4 = 16
    x = np.zeros(9)
    x[3:6] = [1.0, -0.5, 0.3]
    x[6:8] = [0.1, -0.15]
    u = np.array([0.5, 0.3, -0.2, 0.4])
    T = 0.2

    def integrate(dt):
        xi = x
        for _ in range(int(round(T / dt))):
            xi = M.rk4_step(quad, xi, u, None, dt)
        return xi

    ref = integrate(T / 200)
    e1 = np.linalg.norm(integrate(0.2) - ref)
    e2 = np.linalg.norm(integrate(0.1) - ref)
    assert 12.0 <= e1 / e2 <= 20.0


# --- linearization --------------------------------------------------------------


def test_linearize_recovers_linear_map():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(3, 3))
    B = rng.normal(size=(3, 2))
    toy = M.linear_model(A, B)
    Ah, Bh = M.linearize(toy, np.zeros(3), np.zeros(2))
    assert np.abs(Ah - A).max() < 1e-9
    assert np.abs(Bh - B).max() < 1e-9


def test_linearize_quad_gravity_entry(quad):
    A, B = M.linearize(quad, np.zeros(9), np.zeros(4))
    assert A[3, 7] == pytest.approx(9.81, abs=1e-4)  # dvx/dpitch at hover
    assert A[4, 6] == pytest.approx(-9.81, abs=1e-4)


def test_linearize_boat_input_rows(boat):
    A, B = M.linearize(boat, np.zeros(6), np.zeros(3))
    assert np.abs(B[3:6] - np.eye(3)).max() < 1e-9


def test_linearize_requires_equilibrium(boat):
    x = np.zeros(6)
    x[3] = 1.0
    with pytest.raises(M.NonEquilibriumError):
        M.linearize(boat, x, np.zeros(3))


def test_fd_jacobians_match_analytic(quad, boat):
    for model in (quad, boat):
        xbar, ubar = M.steady_state_maps(model, np.array([0.3, -0.2, 0.1]))
        A_fd, B_fd = M.linearize(model, xbar, ubar)
        A_an, B_an = model.jacobian(xbar, ubar)
        assert np.abs(A_fd - A_an).max() < 1e-5
        assert np.abs(B_fd - B_an).max() < 1e-5


def test_analytic_jacobian_off_equilibrium(quad):
    # central differences of the dynamics at a generic point
    rng = np.random.default_rng(3)
    x = rng.normal(size=9) * 0.3
    u = rng.normal(size=4) * 0.3
    A_an, B_an = quad.jacobian(x, u)
    h = 1e-6
    for i in range(9):
        d = np.zeros(9)
        d[i] = h
        col = (quad.dynamics(x + d, u) - quad.dynamics(x - d, u)) / (2 * h)
        assert np.abs(col - A_an[:, i]).max() < 1e-5
    for j in range(4):
        d = np.zeros(4)
        d[j] = h
        col = (quad.dynamics(x, u + d) - quad.dynamics(x, u - d)) / (2 * h)
        assert np.abs(col - B_an[:, j]).max() < 1e-5


# --- steady-state maps -----------------------------------------------------------


def test_steady_state_quad_reference(quad):
    xbar, ubar = M.steady_state_maps(quad, np.array([-0.67, -0.33, 0.0]))
    assert np.allclose(xbar, [-0.67, -0.33, 0] + [0.0] * 6)
    assert np.allclose(ubar, 0.0)


def test_steady_state_boat_ignores_z(boat):
    xbar, ubar = M.steady_state_maps(boat, np.array([1.0, 2.0, 5.0]))
    assert np.allclose(xbar, [1.0, 2.0, 0, 0, 0, 0])
    assert np.allclose(ubar, 0.0)


def test_steady_state_out_of_range(quad):
    with pytest.raises(M.ReferenceOutOfRangeError):
        M.steady_state_maps(quad, np.array([1000.0, 0.0, 0.0]))


@settings(max_examples=40, deadline=None)
@given(theta=THETA_BOX)
def test_equilibrium_property_both_vehicles(theta):
    for model in (M.quadcopter_model(), M.boat_model()):
        xbar, ubar = M.steady_state_maps(model, theta)
        assert np.linalg.norm(model.dynamics(xbar, ubar)) < 1e-9


# --- constraint sets --------------------------------------------------------------


def test_constraint_set_validation():
    with pytest.raises(ValueError):
        M.ConstraintSet([1.0], [0.0])
    with pytest.raises(ValueError):
        M.ConstraintSet([np.nan], [1.0])
    with pytest.raises(ValueError):
        M.ConstraintSet([0.0], [1.0], norm_bounds=(((0,), -1.0),))


def test_constraint_membership_and_margin(quad):
    X = quad.state_constraints
    ok = np.zeros(9)
    bad = np.zeros(9)
    bad[5] = 4.5  # vz above its bound
    assert X.contains(ok)
    assert not X.contains(bad)
    assert X.violation(bad) == pytest.approx(0.5)
    fast = np.zeros(9)
    fast[3:6] = [12.0, 12.0, 0.0]  # speed above the 17 m/s norm bound
    assert not X.contains(fast)


@settings(max_examples=40, deadline=None)
@given(z=st.lists(st.floats(-30, 30), min_size=9, max_size=9).map(np.array))
def test_projection_lands_inside(z, quad):
    proj = quad.state_constraints.project(z)
    assert quad.state_constraints.contains(proj, tol=1e-9)


def test_batched_dynamics_match_rowwise(quad):
    rng = np.random.default_rng(5)
    X = rng.normal(size=(6, 9)) * 0.2
    U = rng.normal(size=(6, 4)) * 0.2
    batch = quad.dynamics(X, U)
    rows = np.stack([quad.dynamics(X[i], U[i]) for i in range(6)])
    assert np.array_equal(batch, rows)


# --- disturbances -------------------------------------------------------------------


def test_disturbance_windows():
    d = M.DisturbanceModel(schedule=(((0.5, 2.0, [0.0, 3.0, 0.0])),), bound=3.0)
    assert np.allclose(d.force_at(0.0), 0.0)
    assert np.allclose(d.force_at(1.0), [0, 3, 0])
    assert np.allclose(d.force_at(2.0), 0.0)  # half-open window


def test_disturbance_bound_enforced():
    with pytest.raises(ValueError):
        M.DisturbanceModel(schedule=((0.0, 1.0, [0.0, 5.0, 0.0]),), bound=3.0)
