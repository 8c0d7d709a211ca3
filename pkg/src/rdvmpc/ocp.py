"""Per-agent finite-horizon optimal control: direct single shooting over the
input sequence, tracking cost toward the steady state of the current
rendezvous reference, input boxes handled by projection inside the
quasi-Newton inner solver, state and terminal-set constraints by an augmented
Lagrangian outer loop. Cost gradients are analytic, via reverse-mode
sensitivity through the RK4 rollout.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .models import AgentModel, steady_state_maps
from .terminal import TerminalIngredients, terminal_controller, weighted_norm

log = logging.getLogger(__name__)


@dataclass
class DocpSpec:
    model: AgentModel
    ingredients: TerminalIngredients
    Q: np.ndarray
    R: np.ndarray
    horizon_T: float
    dt: float
    terminal_constraint_enabled: bool = True
    # augmented Lagrangian outer loop
    al_rho0: float = 10.0
    al_growth: float = 10.0
    al_outer_max: int = 5
    tol_state: float = 1e-6
    tol_terminal: float = 1e-8
    residual_infeasible: float = 1e-4
    # quasi-Newton inner solver
    inner_maxiter: int = 300
    inner_ftol: float = 1e-14
    inner_gtol: float = 1e-9
    N: int = field(init=False)

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        N = round(self.horizon_T / self.dt)
        if abs(N * self.dt - self.horizon_T) > 1e-9:
            raise ValueError("horizon_T must be an integer multiple of dt")
        self.N = N
        for name, W in (("Q", self.Q), ("R", self.R)):
            if float(np.min(np.linalg.eigvalsh(W))) <= 0:
                raise ValueError(f"{name} must be symmetric positive definite")


@dataclass
class DocpSolution:
    inputs: np.ndarray  # (N, m)
    states: np.ndarray  # (N+1, n) nominal prediction
    outputs: np.ndarray  # (N+1, p)
    cost: float
    target: tuple  # (xbar, ubar)
    status: str  # optimal | max_iter | infeasible
    kkt_residual: float
    terminal_margin: float
    constraint_residual: float
    theta: np.ndarray
    alpha: float
    n_inner_iters: int = 0
    al_state: Optional[tuple] = None  # (lam_state, lam_term, rho) at exit


@dataclass
class CandidateReport:
    """Runtime certificate for the one-step-shifted candidate control rolled
    against a (possibly shifted) target."""

    state_violation: float
    input_violation: float
    terminal_margin: float

    @property
    def feasible(self) -> bool:
        return self.state_violation <= 1e-6 and self.input_violation <= 1e-8 and self.terminal_margin >= -1e-9


def rollout(spec: DocpSpec, U: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Nominal single-shooting rollout (no disturbance), stage states saved."""
    f = spec.model.dynamics
    dt = spec.dt
    X = np.empty((spec.N + 1, spec.model.n))
    X[0] = x0
    for j in range(spec.N):
        x, u = X[j], U[j]
        k1 = f(x, u)
        k2 = f(x + 0.5 * dt * k1, u)
        k3 = f(x + 0.5 * dt * k2, u)
        k4 = f(x + dt * k3, u)
        X[j + 1] = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return X


def eval_cost(spec: DocpSpec, U: np.ndarray, x0: np.ndarray, xbar: np.ndarray, ubar: np.ndarray) -> float:
    """Tracking cost: terminal P-norm plus left-endpoint rectangle quadrature
    of the Q/R stage integrand at the sampling grid."""
    X = rollout(spec, U, x0)
    return _cost_of_rollout(spec, X, U, xbar, ubar)


def _cost_of_rollout(spec, X, U, xbar, ubar) -> float:
    dX = X[:-1] - xbar
    dU = U - ubar
    dT = X[-1] - xbar
    stage = np.einsum("ji,ik,jk->", dX, spec.Q, dX) + np.einsum("ji,ik,jk->", dU, spec.R, dU)
    return float(dT @ spec.ingredients.P @ dT + spec.dt * stage)


# --- constraint machinery ---------------------------------------------------


def _state_constraint_terms(cs):
    """Static descriptors of the smooth inequality functions g(x) <= 0 used by
    the augmented Lagrangian: box rows (linear) and squared norm rows."""
    ub_rows = [(i, float(cs.upper[i])) for i in range(cs.dim) if np.isfinite(cs.upper[i])]
    lb_rows = [(i, float(cs.lower[i])) for i in range(cs.dim) if np.isfinite(cs.lower[i])]
    norm_rows = [(np.array(idx, dtype=int), float(r)) for idx, r in cs.norm_bounds]
    return ub_rows, lb_rows, norm_rows


def _eval_state_g(terms, X):
    """g values at grid points 1..N, flattened point-major. X is (N, n)."""
    ub_rows, lb_rows, norm_rows = terms
    cols = []
    for i, b in ub_rows:
        cols.append(X[:, i] - b)
    for i, b in lb_rows:
        cols.append(b - X[:, i])
    for idx, r in norm_rows:
        cols.append(np.einsum("ji,ji->j", X[:, idx], X[:, idx]) - r * r)
    if not cols:
        return np.zeros((X.shape[0], 0))
    return np.stack(cols, axis=1)


def _state_g_grad(terms, X, W):
    """Sum_i W[:, i] * dg_i/dx at each grid point. W matches _eval_state_g."""
    ub_rows, lb_rows, norm_rows = terms
    G = np.zeros_like(X)
    c = 0
    for i, _ in ub_rows:
        G[:, i] += W[:, c]
        c += 1
    for i, _ in lb_rows:
        G[:, i] -= W[:, c]
        c += 1
    for idx, _ in norm_rows:
        G[:, idx] += 2.0 * W[:, c][:, None] * X[:, idx]
        c += 1
    return G


# --- analytic gradient ------------------------------------------------------


def _rollout_with_stages(spec, U, x0):
    f = spec.model.dynamics
    dt = spec.dt
    N, n = spec.N, spec.model.n
    X = np.empty((N + 1, n))
    S = np.empty((N, 4, n))  # RK4 stage states
    K = np.empty((N, 4, n))  # RK4 stage derivatives
    X[0] = x0
    for j in range(N):
        x, u = X[j], U[j]
        S[j, 0] = x
        K[j, 0] = f(x, u)
        S[j, 1] = x + 0.5 * dt * K[j, 0]
        K[j, 1] = f(S[j, 1], u)
        S[j, 2] = x + 0.5 * dt * K[j, 1]
        K[j, 2] = f(S[j, 2], u)
        S[j, 3] = x + dt * K[j, 2]
        K[j, 3] = f(S[j, 3], u)
        X[j + 1] = x + (dt / 6.0) * (K[j, 0] + 2 * K[j, 1] + 2 * K[j, 2] + K[j, 3])
    return X, S


def _rk4_vjp(spec, stages, u, a):
    """Adjoint of one RK4 step: given a = dPhi/dx_next, return contributions
    (gx, gu) = (dPhi/dx, dPhi/du) through the step."""
    dt = spec.dt
    A, B = spec.model.jacobian(stages, np.broadcast_to(u, (4, u.size)))
    a4 = (dt / 6.0) * a
    v4 = a4 @ A[3]
    u4 = a4 @ B[3]
    a3 = (dt / 3.0) * a + dt * v4
    v3 = a3 @ A[2]
    u3 = a3 @ B[2]
    a2 = (dt / 3.0) * a + 0.5 * dt * v3
    v2 = a2 @ A[1]
    u2 = a2 @ B[1]
    a1 = (dt / 6.0) * a + 0.5 * dt * v2
    v1 = a1 @ A[0]
    u1 = a1 @ B[0]
    return a + v1 + v2 + v3 + v4, u1 + u2 + u3 + u4


def cost_and_grad(
    spec: DocpSpec,
    U: np.ndarray,
    x0: np.ndarray,
    xbar: np.ndarray,
    ubar: np.ndarray,
    lam_state: Optional[np.ndarray] = None,
    lam_term: float = 0.0,
    rho: float = 0.0,
    alpha: float = 0.0,
    terms=None,
):
    """Augmented-Lagrangian merit and its analytic gradient w.r.t. U.

    With rho == 0 this is the plain tracking cost and gradient.
    """
    N, n, m = spec.N, spec.model.n, spec.model.m
    P, Q, R = spec.ingredients.P, spec.Q, spec.R
    dt = spec.dt
    X, S = _rollout_with_stages(spec, U, x0)
    cost = _cost_of_rollout(spec, X, U, xbar, ubar)

    use_al = rho > 0.0 and terms is not None
    W = None
    w_term = 0.0
    if use_al:
        g_state = _eval_state_g(terms, X[1:])
        W = np.maximum(0.0, lam_state + rho * g_state)
        cost += float(np.sum(W * W - lam_state * lam_state)) / (2.0 * rho)
        if spec.terminal_constraint_enabled:
            g_T = float(weighted_norm(X[-1] - xbar, P) ** 2 - alpha * alpha)
            w_term = max(0.0, lam_term + rho * g_T)
            cost += (w_term * w_term - lam_term * lam_term) / (2.0 * rho)

    gradU = np.empty((N, m))
    a = 2.0 * (1.0 + w_term) * (P @ (X[-1] - xbar))
    if use_al:
        a += _state_g_grad(terms, X[-1:], W[-1:])[0]
    for j in range(N - 1, -1, -1):
        gx, gu = _rk4_vjp(spec, S[j], U[j], a)
        gradU[j] = 2.0 * dt * (R @ (U[j] - ubar)) + gu
        a = gx
        if j >= 1:
            a += 2.0 * dt * (Q @ (X[j] - xbar))
            if use_al:
                a += _state_g_grad(terms, X[j : j + 1], W[j - 1 : j])[0]
    return cost, gradU, X


def solve_docp(
    spec: DocpSpec,
    x0: np.ndarray,
    theta: np.ndarray,
    alpha: Optional[float] = None,
    u_init: Optional[np.ndarray] = None,
    al_warm: Optional[tuple] = None,
) -> DocpSolution:
    """Solve the per-agent finite-horizon problem toward the steady state of
    theta. Returns the best iterate with a status; never raises on bad
    numerics."""
    model = spec.model
    N, n, m = spec.N, model.n, model.m
    xbar, ubar = steady_state_maps(model, theta)
    if alpha is None:
        alpha = spec.ingredients.alpha_bar
    x0 = np.asarray(x0, dtype=float).reshape(n)

    U0 = np.tile(ubar, (N, 1)) if u_init is None else np.asarray(u_init, dtype=float).reshape(N, m).copy()
    U0 = model.input_constraints.project(U0)
    bounds = list(zip(np.tile(model.input_constraints.lower, N), np.tile(model.input_constraints.upper, N)))

    terms = _state_constraint_terms(model.state_constraints)
    n_g = sum(len(t) for t in terms)
    has_constraints = n_g > 0 or spec.terminal_constraint_enabled

    if al_warm is not None and al_warm[0] is not None and al_warm[0].shape == (N, n_g):
        lam_state = al_warm[0].copy()
        lam_term = float(al_warm[1])
        rho = float(al_warm[2]) if has_constraints else 0.0
    else:
        lam_state = np.zeros((N, n_g))
        lam_term = 0.0
        rho = spec.al_rho0 if has_constraints else 0.0

    def objective(uflat, lam_s, lam_t, rho_k):
        U = uflat.reshape(N, m)
        try:
            c, g, _ = cost_and_grad(spec, U, x0, xbar, ubar, lam_s, lam_t, rho_k, alpha, terms)
        except Exception:
            return 1e25, np.zeros(N * m)
        if not np.isfinite(c) or not np.all(np.isfinite(g)):
            return 1e25, np.zeros(N * m)
        return c, g.ravel()

    U = U0
    total_iters = 0
    res = None
    viol_state = viol_term = np.inf
    viol_prev = np.inf
    outer_budget = spec.al_outer_max if has_constraints else 1
    for outer in range(outer_budget):
        res = minimize(
            objective,
            U.ravel(),
            args=(lam_state, lam_term, rho),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": spec.inner_maxiter, "ftol": spec.inner_ftol, "gtol": spec.inner_gtol, "maxcor": 20},
        )
        U = res.x.reshape(N, m)
        total_iters += res.nit
        X = rollout(spec, U, x0)
        g_state = _eval_state_g(terms, X[1:])
        viol_state = float(np.max(g_state, initial=0.0))
        if spec.terminal_constraint_enabled:
            g_T = float(weighted_norm(X[-1] - xbar, spec.ingredients.P) ** 2 - alpha * alpha)
            viol_term = max(g_T, 0.0)
        else:
            g_T = 0.0
            viol_term = 0.0
        viol = max(viol_state, viol_term)
        if viol_state <= spec.tol_state and viol_term <= spec.tol_terminal:
            break
        if has_constraints:
            lam_state = np.maximum(0.0, lam_state + rho * g_state)
            if spec.terminal_constraint_enabled:
                lam_term = max(0.0, lam_term + rho * g_T)
            # grow the penalty only while the violation stalls
            if viol > 0.25 * viol_prev:
                rho = min(rho * spec.al_growth, 1e8)
        viol_prev = viol

    X = rollout(spec, U, x0)
    terminal_margin = float(alpha * alpha - weighted_norm(X[-1] - xbar, spec.ingredients.P) ** 2)
    residual = max(viol_state, viol_term)
    if viol_state <= spec.tol_state and (not spec.terminal_constraint_enabled or terminal_margin >= -spec.tol_terminal):
        status = "optimal"
    elif residual < spec.residual_infeasible:
        status = "max_iter"
    else:
        status = "infeasible"

    # projected-gradient norm of the final merit function (box projection)
    gfinal = res.jac.reshape(N, m)
    step = U - np.clip(U - gfinal, model.input_constraints.lower, model.input_constraints.upper)
    kkt = float(np.max(np.abs(step)))

    # final multiplier estimate, reusable as a warm start by the next solve;
    # relax the penalty again once the iterate is feasible
    g_state = _eval_state_g(terms, X[1:])
    lam_out = np.maximum(0.0, lam_state + rho * g_state) if has_constraints else lam_state
    g_T_out = float(weighted_norm(X[-1] - xbar, spec.ingredients.P) ** 2 - alpha * alpha)
    lam_term_out = max(0.0, lam_term + rho * g_T_out) if spec.terminal_constraint_enabled else 0.0
    rho_out = max(rho / spec.al_growth, spec.al_rho0) if max(viol_state, viol_term) <= spec.tol_state else rho

    return DocpSolution(
        inputs=U,
        states=X,
        outputs=X @ model.output_matrix.T,
        cost=_cost_of_rollout(spec, X, U, xbar, ubar),
        target=(xbar, ubar),
        status=status,
        kkt_residual=kkt,
        terminal_margin=terminal_margin,
        constraint_residual=residual,
        theta=np.asarray(theta, dtype=float).copy(),
        alpha=float(alpha),
        n_inner_iters=total_iters,
        al_state=(lam_out, lam_term_out, rho_out),
    )


def warm_start_shift(prev: DocpSolution, spec: DocpSpec) -> np.ndarray:
    """Feasibility-preserving candidate input sequence: drop the first input,
    append the terminal controller evaluated at the previous terminal state."""
    xbar, ubar = prev.target
    u_last = terminal_controller(spec.ingredients, xbar, ubar, prev.states[-1])
    u_last = spec.model.input_constraints.project(u_last)
    return np.vstack([prev.inputs[1:], u_last])


def check_candidate_feasibility(prev: DocpSolution, new_target, spec: DocpSpec) -> CandidateReport:
    """Roll the shifted candidate against a new target (xbar', ubar', alpha')
    and report constraint satisfaction and terminal membership."""
    xbar_new, ubar_new, alpha_new = new_target
    U = warm_start_shift(prev, spec)
    X = rollout(spec, U, prev.states[1])
    state_viol = float(np.max(spec.model.state_constraints.violation(X[1:]), initial=0.0))
    input_viol = float(np.max(spec.model.input_constraints.violation(U), initial=0.0))
    margin = float(alpha_new**2 - weighted_norm(X[-1] - xbar_new, spec.ingredients.P) ** 2)
    return CandidateReport(state_violation=state_viol, input_violation=input_viol, terminal_margin=margin)
