"""Agent models: nonlinear vehicle dynamics, constraint sets, integration and
steady-state maps.

All dynamics callables are vectorized over leading batch dimensions: a state
batch of shape (..., n) and input batch (..., m) produce derivatives of shape
(..., n). Units are SI throughout (m, m/s, rad, rad/s).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ModelError(Exception):
    pass


class ThrustSingularityError(ModelError):
    """Roll or pitch within 1e-6 of +-pi/2: thrust direction degenerates."""


class NonEquilibriumError(ModelError):
    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(f"linearization point is not an equilibrium (|f| = {residual:.3e})")


class ReferenceOutOfRangeError(ModelError):
    pass


# Reference box used for range-checking steady-state targets. The rendezvous
# layer uses its own (z-degenerate) box for theta projection.
MODEL_THETA_BOX = (np.full(3, -50.0), np.full(3, 50.0))


@dataclass(frozen=True)
class ConstraintSet:
    """Axis-aligned box plus optional Euclidean-norm bounds on index subsets.

    norm_bounds entries are ((i, j, ...), r): require sqrt(sum z[k]^2) <= r
    over the listed coordinates.
    """

    lower: np.ndarray
    upper: np.ndarray
    norm_bounds: tuple = ()

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape:
            raise ValueError("bound shape mismatch")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("NaN bound")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        nb = tuple((tuple(int(i) for i in idx), float(r)) for idx, r in self.norm_bounds)
        for idx, r in nb:
            if not np.isfinite(r) or r < 0:
                raise ValueError("norm bound must be finite and nonnegative")
            if any(i >= lo.size for i in idx):
                raise ValueError("norm bound index out of range")
        object.__setattr__(self, "norm_bounds", nb)

    @property
    def dim(self) -> int:
        return self.lower.size

    def violation(self, z: np.ndarray) -> np.ndarray:
        """Largest constraint violation at z (0 when inside), batched."""
        z = np.asarray(z, dtype=float)
        v = np.maximum(z - self.upper, 0.0) + np.maximum(self.lower - z, 0.0)
        out = np.max(v, axis=-1)
        for idx, r in self.norm_bounds:
            out = np.maximum(out, np.linalg.norm(z[..., idx], axis=-1) - r)
        return out

    def contains(self, z: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.violation(z) <= tol

    def margin(self, z: np.ndarray) -> np.ndarray:
        """Signed distance to the nearest bound (positive inside), batched."""
        z = np.asarray(z, dtype=float)
        out = np.full(z.shape[:-1], np.inf)
        for i in range(self.dim):
            if np.isfinite(self.upper[i]):
                out = np.minimum(out, self.upper[i] - z[..., i])
            if np.isfinite(self.lower[i]):
                out = np.minimum(out, z[..., i] - self.lower[i])
        for idx, r in self.norm_bounds:
            out = np.minimum(out, r - np.linalg.norm(z[..., idx], axis=-1))
        return out

    def project(self, z: np.ndarray) -> np.ndarray:
        """Clip to the box, then radially rescale any violated norm subset."""
        z = np.clip(np.asarray(z, dtype=float), self.lower, self.upper)
        for idx, r in self.norm_bounds:
            sub = z[..., idx]
            nrm = np.linalg.norm(sub, axis=-1, keepdims=True)
            scale = np.where(nrm > r, np.where(nrm > 0, r / np.maximum(nrm, 1e-300), 1.0), 1.0)
            z[..., idx] = sub * scale
        return z


def unconstrained(dim: int) -> ConstraintSet:
    return ConstraintSet(np.full(dim, -np.inf), np.full(dim, np.inf))


@dataclass(frozen=True)
class DisturbanceModel:
    """Piecewise-constant external force per unit mass, active on time windows."""

    schedule: tuple = ()  # ((t_start, t_end, force_3vec), ...)
    bound: float = 0.0

    def __post_init__(self):
        sched = tuple(
            (float(t0), float(t1), np.asarray(f, dtype=float).reshape(3)) for t0, t1, f in self.schedule
        )
        object.__setattr__(self, "schedule", sched)
        for t0, t1, f in sched:
            if t1 < t0:
                raise ValueError("disturbance window ends before it starts")
            if np.linalg.norm(f) > self.bound + 1e-12:
                raise ValueError("scheduled force exceeds the disturbance bound")

    def force_at(self, t: float) -> np.ndarray:
        out = np.zeros(3)
        for t0, t1, f in self.schedule:
            if t0 <= t < t1:
                out += f
        return out


@dataclass(frozen=True)
class AgentModel:
    """An agent's continuous-time dynamics, output map, constraints and
    steady-state target maps x_ss = H_x theta, u_ss = H_u theta."""

    id: int
    name: str
    n: int
    m: int
    p: int
    dynamics: Callable  # (x, u, f_ext=None) -> dx/dt, batched
    jacobian: Callable  # (x, u) -> (A, B) of the nominal (f_ext = 0) model, batched
    output_matrix: np.ndarray  # (p, n)
    H_x: np.ndarray  # (n, 3)
    H_u: np.ndarray  # (m, 3)
    state_constraints: ConstraintSet = None
    input_constraints: ConstraintSet = None
    params: dict = field(default_factory=dict)

    def output(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.output_matrix.T


# ---------------------------------------------------------------------------
# Quadcopter: 9 states [px py pz vx vy vz phi theta psi],
# 4 inputs [vz_dot_cmd phi_cmd theta_cmd psi_dot_cmd].
# Thrust magnitude tracks (g + vz_dot_cmd)/(cos phi cos theta); roll/pitch follow
# first-order inner loops; yaw rate is achieved instantaneously.
# ---------------------------------------------------------------------------

QUAD_PARAMS = {
    "g": 9.81,
    "k_dx": 0.1,
    "k_dy": 0.1,
    "tau_phi": 0.1901,
    "k_phi": 0.95,
    "tau_theta": 0.1721,
    "k_theta": 1.02,
}


def _check_tilt(phi, theta):
    near = np.minimum(np.abs(np.abs(phi) - np.pi / 2), np.abs(np.abs(theta) - np.pi / 2))
    if np.any(near < 1e-6):
        raise ThrustSingularityError("roll/pitch within 1e-6 of pi/2")


def _quad_dynamics(par):
    g, kdx, kdy = par["g"], par["k_dx"], par["k_dy"]
    tph, kph, tth, kth = par["tau_phi"], par["k_phi"], par["tau_theta"], par["k_theta"]

    def f(x, u, f_ext=None):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        phi, th, psi = x[..., 6], x[..., 7], x[..., 8]
        _check_tilt(phi, th)
        cph, sph = np.cos(phi), np.sin(phi)
        cth, sth = np.cos(th), np.sin(th)
        cps, sps = np.cos(psi), np.sin(psi)
        thrust = (g + u[..., 0]) / (cph * cth)
        dx = np.empty(np.broadcast_shapes(x[..., 0].shape, u[..., 0].shape) + (9,))
        dx[..., 0:3] = x[..., 3:6]
        dx[..., 3] = thrust * (sph * sps + cph * cps * sth) - kdx * x[..., 3]
        dx[..., 4] = thrust * (-cps * sph + cph * sps * sth) - kdy * x[..., 4]
        dx[..., 5] = thrust * (cph * cth) - g
        if f_ext is not None:
            dx[..., 3:6] += np.asarray(f_ext, dtype=float)
        dx[..., 6] = (kph * u[..., 1] - phi) / tph
        dx[..., 7] = (kth * u[..., 2] - th) / tth
        dx[..., 8] = u[..., 3]
        return dx

    return f


def _quad_jacobian(par):
    g, kdx, kdy = par["g"], par["k_dx"], par["k_dy"]
    tph, kph, tth, kth = par["tau_phi"], par["k_phi"], par["tau_theta"], par["k_theta"]

    def jac(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        phi, th, psi = x[..., 6], x[..., 7], x[..., 8]
        _check_tilt(phi, th)
        cph, sph = np.cos(phi), np.sin(phi)
        cth, sth = np.cos(th), np.sin(th)
        cps, sps = np.cos(psi), np.sin(psi)
        sec = 1.0 / (cph * cth)
        T = (g + u[..., 0]) * sec
        d1 = sph * sps + cph * cps * sth
        d2 = -cps * sph + cph * sps * sth
        d1_phi = cph * sps - sph * cps * sth
        d1_th = cph * cps * cth
        d1_psi = sph * cps - cph * sps * sth
        d2_phi = -cps * cph - sph * sps * sth
        d2_th = cph * sps * cth
        d2_psi = sps * sph + cph * cps * sth
        tphi = T * sph / cph
        tth_ = T * sth / cth

        shape = np.broadcast_shapes(x[..., 0].shape, u[..., 0].shape)
        A = np.zeros(shape + (9, 9))
        B = np.zeros(shape + (9, 4))
        for i in range(3):
            A[..., i, 3 + i] = 1.0
        A[..., 3, 3] = -kdx
        A[..., 3, 6] = tphi * d1 + T * d1_phi
        A[..., 3, 7] = tth_ * d1 + T * d1_th
        A[..., 3, 8] = T * d1_psi
        A[..., 4, 4] = -kdy
        A[..., 4, 6] = tphi * d2 + T * d2_phi
        A[..., 4, 7] = tth_ * d2 + T * d2_th
        A[..., 4, 8] = T * d2_psi
        # vz row: thrust cancellation makes d(vz_dot)/d(phi,theta) identically 0
        A[..., 6, 6] = -1.0 / tph
        A[..., 7, 7] = -1.0 / tth
        B[..., 3, 0] = sec * d1
        B[..., 4, 0] = sec * d2
        B[..., 5, 0] = 1.0
        B[..., 6, 1] = kph / tph
        B[..., 7, 2] = kth / tth
        B[..., 8, 3] = 1.0
        return A, B

    return jac


def quadcopter_model(
    agent_id: int = 0,
    params: Optional[dict] = None,
    v_max: float = 17.0,
    vz_max: float = 4.0,
    tilt_max: float = 0.5,
    az_cmd_max: float = 2.0,
    tilt_cmd_max: float = 0.5,
    yaw_rate_cmd_max: float = np.pi / 2,
) -> AgentModel:
    par = dict(QUAD_PARAMS)
    if params:
        par.update(params)
    lo = np.full(9, -np.inf)
    hi = np.full(9, np.inf)
    lo[5], hi[5] = -vz_max, vz_max
    lo[6], hi[6] = -tilt_max, tilt_max
    lo[7], hi[7] = -tilt_max, tilt_max
    X = ConstraintSet(lo, hi, norm_bounds=(((3, 4, 5), v_max),))
    u_hi = np.array([az_cmd_max, tilt_cmd_max, tilt_cmd_max, yaw_rate_cmd_max])
    U = ConstraintSet(-u_hi, u_hi)
    H_x = np.zeros((9, 3))
    H_x[0, 0] = H_x[1, 1] = H_x[2, 2] = 1.0
    C = np.zeros((3, 9))
    C[0, 0] = C[1, 1] = C[2, 2] = 1.0
    return AgentModel(
        id=agent_id,
        name="quadcopter",
        n=9,
        m=4,
        p=3,
        dynamics=_quad_dynamics(par),
        jacobian=_quad_jacobian(par),
        output_matrix=C,
        H_x=H_x,
        H_u=np.zeros((4, 3)),
        state_constraints=X,
        input_constraints=U,
        params=par,
    )


# ---------------------------------------------------------------------------
# Boat: kinematic car with body-frame velocities. 6 states
# [px py psi vx vy om], 3 inputs [tau_x tau_y tau_om] acting as accelerations.
# ---------------------------------------------------------------------------


def _boat_dynamics(x, u, f_ext=None):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    psi = x[..., 2]
    cps, sps = np.cos(psi), np.sin(psi)
    vx, vy = x[..., 3], x[..., 4]
    dx = np.empty(np.broadcast_shapes(x[..., 0].shape, u[..., 0].shape) + (6,))
    dx[..., 0] = vx * cps - vy * sps
    dx[..., 1] = vx * sps + vy * cps
    dx[..., 2] = x[..., 5]
    dx[..., 3] = u[..., 0]
    dx[..., 4] = u[..., 1]
    dx[..., 5] = u[..., 2]
    if f_ext is not None:
        f = np.asarray(f_ext, dtype=float)
        # world-frame force rotated into the body frame, xy components only
        dx[..., 3] += cps * f[..., 0] + sps * f[..., 1]
        dx[..., 4] += -sps * f[..., 0] + cps * f[..., 1]
    return dx


def _boat_jacobian(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    psi = x[..., 2]
    cps, sps = np.cos(psi), np.sin(psi)
    vx, vy = x[..., 3], x[..., 4]
    shape = np.broadcast_shapes(x[..., 0].shape, u[..., 0].shape)
    A = np.zeros(shape + (6, 6))
    B = np.zeros(shape + (6, 3))
    A[..., 0, 2] = -vx * sps - vy * cps
    A[..., 0, 3] = cps
    A[..., 0, 4] = -sps
    A[..., 1, 2] = vx * cps - vy * sps
    A[..., 1, 3] = sps
    A[..., 1, 4] = cps
    A[..., 2, 5] = 1.0
    B[..., 3, 0] = 1.0
    B[..., 4, 1] = 1.0
    B[..., 5, 2] = 1.0
    return A, B


def boat_model(
    agent_id: int = 1,
    v_max: float = 15.0,
    om_max: float = 0.5,
    accel_max: float = 2.0,
    tau_om_max: float = 0.5,
) -> AgentModel:
    lo = np.full(6, -np.inf)
    hi = np.full(6, np.inf)
    lo[5], hi[5] = -om_max, om_max
    X = ConstraintSet(lo, hi, norm_bounds=(((3, 4), v_max),))
    u_hi = np.array([accel_max, accel_max, tau_om_max])
    U = ConstraintSet(-u_hi, u_hi)
    H_x = np.zeros((6, 3))
    H_x[0, 0] = H_x[1, 1] = 1.0  # z reference is unreachable: C_b zeroes it
    C = np.zeros((3, 6))
    C[0, 0] = C[1, 1] = 1.0
    return AgentModel(
        id=agent_id,
        name="boat",
        n=6,
        m=3,
        p=3,
        dynamics=_boat_dynamics,
        jacobian=_boat_jacobian,
        output_matrix=C,
        H_x=H_x,
        H_u=np.zeros((3, 3)),
        state_constraints=X,
        input_constraints=U,
        params={"v_max": v_max, "om_max": om_max, "accel_max": accel_max, "tau_om_max": tau_om_max},
    )


# ---------------------------------------------------------------------------
# Linear toy agents (oracle tests).
# ---------------------------------------------------------------------------


def linear_model(
    A: np.ndarray,
    B: np.ndarray,
    C: Optional[np.ndarray] = None,
    agent_id: int = 99,
    name: str = "linear",
    state_constraints: Optional[ConstraintSet] = None,
    input_constraints: Optional[ConstraintSet] = None,
    H_x: Optional[np.ndarray] = None,
    H_u: Optional[np.ndarray] = None,
) -> AgentModel:
    """Toy agent with dynamics dx = A x + B u. The steady-state maps default
    to the least-squares solution of [A B; C 0] [H_x; H_u] = [0; I3]."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, m = A.shape[0], B.shape[1]
    if C is None:
        C = np.zeros((3, n))
        for i in range(min(3, n)):
            C[i, i] = 1.0
    C = np.asarray(C, dtype=float)
    p = C.shape[0]
    if H_x is None or H_u is None:
        lhs = np.block([[A, B], [C, np.zeros((p, m))]])
        rhs = np.vstack([np.zeros((n, p)), np.eye(p)])
        sol = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
        H_x = sol[:n] if H_x is None else H_x
        H_u = sol[n:] if H_u is None else H_u

    def f(x, u, f_ext=None):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return x @ A.T + u @ B.T

    def jac(x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x[..., 0].shape, u[..., 0].shape)
        return (
            np.broadcast_to(A, shape + A.shape).copy(),
            np.broadcast_to(B, shape + B.shape).copy(),
        )

    return AgentModel(
        id=agent_id,
        name=name,
        n=n,
        m=m,
        p=p,
        dynamics=f,
        jacobian=jac,
        output_matrix=C,
        H_x=np.asarray(H_x, dtype=float),
        H_u=np.asarray(H_u, dtype=float),
        state_constraints=state_constraints if state_constraints is not None else unconstrained(n),
        input_constraints=input_constraints if input_constraints is not None else unconstrained(m),
        params={"A": A, "B": B},
    )


MODEL_FACTORIES = {"quadcopter": quadcopter_model, "boat": boat_model}


# ---------------------------------------------------------------------------
# Integration, linearization, steady-state maps.
# ---------------------------------------------------------------------------


def rk4_step(model: AgentModel, x: np.ndarray, u: np.ndarray, f_ext=None, dt: float = 0.1) -> np.ndarray:
    """Classical RK4 step; input and disturbance held constant over dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = model.dynamics
    k1 = f(x, u, f_ext)
    k2 = f(x + 0.5 * dt * k1, u, f_ext)
    k3 = f(x + 0.5 * dt * k2, u, f_ext)
    k4 = f(x + dt * k3, u, f_ext)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def linearize(model: AgentModel, xbar: np.ndarray, ubar: np.ndarray, fd_step: float = 1e-6):
    """Central finite-difference Jacobians (A, B) at an equilibrium."""
    xbar = np.asarray(xbar, dtype=float)
    ubar = np.asarray(ubar, dtype=float)
    residual = float(np.linalg.norm(model.dynamics(xbar, ubar)))
    if residual >= 1e-6:
        raise NonEquilibriumError(residual)
    n, m = model.n, model.m
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    for i in range(n):
        dx = np.zeros(n)
        dx[i] = fd_step
        A[:, i] = (model.dynamics(xbar + dx, ubar) - model.dynamics(xbar - dx, ubar)) / (2 * fd_step)
    for j in range(m):
        du = np.zeros(m)
        du[j] = fd_step
        B[:, j] = (model.dynamics(xbar, ubar + du) - model.dynamics(xbar, ubar - du)) / (2 * fd_step)
    return A, B


def steady_state_maps(model: AgentModel, theta: np.ndarray, box=None):
    """Equilibrium (x_ss, u_ss) realizing the reachable output components of theta."""
    theta = np.asarray(theta, dtype=float).reshape(3)
    lo, hi = box if box is not None else MODEL_THETA_BOX
    if np.any(theta < np.asarray(lo) - 1e-12) or np.any(theta > np.asarray(hi) + 1e-12):
        raise ReferenceOutOfRangeError(f"reference {theta} outside the box [{lo}, {hi}]")
    return model.H_x @ theta, model.H_u @ theta
