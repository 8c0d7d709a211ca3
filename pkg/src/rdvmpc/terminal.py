"""Offline synthesis of terminal ingredients (gain, Lyapunov matrix, set
radius) and online terminal-set operations, including the radius growth rule
applied when the rendezvous reference moves.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .models import AgentModel, linearize, steady_state_maps

log = logging.getLogger(__name__)


class SynthesisError(Exception):
    pass


def weighted_norm(x: np.ndarray, P: np.ndarray) -> np.ndarray:
    """||x||_P = sqrt(x^T P x), batched over leading dimensions."""
    x = np.asarray(x, dtype=float)
    q = np.einsum("...i,ij,...j->...", x, P, x)
    return np.sqrt(np.maximum(q, 0.0))


def solve_lyapunov(A_k: np.ndarray, Q_star: np.ndarray) -> np.ndarray:
    """Unique P > 0 with A_k^T P + P A_k = -Q_star, by Kronecker vectorization.

    Dense n^2 x n^2 solve; fine for the n <= 9 systems handled here.
    """
    A_k = np.asarray(A_k, dtype=float)
    Q_star = np.asarray(Q_star, dtype=float)
    n = A_k.shape[0]
    abscissa = float(np.max(np.linalg.eigvals(A_k).real))
    if abscissa >= 0:
        raise SynthesisError(f"closed-loop matrix is not Hurwitz (abscissa {abscissa:.3e})")
    M = np.kron(np.eye(n), A_k.T) + np.kron(A_k.T, np.eye(n))
    p = np.linalg.solve(M, -Q_star.flatten(order="F"))
    P = p.reshape((n, n), order="F")
    P = 0.5 * (P + P.T)
    if float(np.min(np.linalg.eigvalsh(P))) <= 0:
        raise SynthesisError("Lyapunov solution is not positive definite")
    return P


def _bass_gain(A: np.ndarray, B: np.ndarray, sigma: float) -> np.ndarray:
    # Solve (A + sigma I) X + X (A + sigma I)^T = 2 B B^T; K = -B^T X^{-1}
    # stabilizes A where (A, B) is controllable.
    M = -(A + sigma * np.eye(A.shape[0]))
    X = solve_lyapunov(M.T, 2.0 * B @ B.T)
    return -B.T @ np.linalg.pinv(X, rcond=1e-12)


def lqr_gain(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray, max_iter: int = 60) -> np.ndarray:
    """Continuous-time LQR gain K = -R^{-1} B^T S with S the stabilizing
    Riccati solution, by Newton-Kleinman iteration (each step one Lyapunov
    solve) from a pole-shifted initial stabilizing gain."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n, m = B.shape
    if float(np.min(np.linalg.eigvalsh(R))) <= 0:
        raise SynthesisError("R must be positive definite")

    abscissa = float(np.max(np.linalg.eigvals(A).real))
    K = np.zeros((m, n))
    if abscissa >= 0:
        sigma = abscissa + float(np.linalg.norm(A, "fro")) + 1.0
        for _ in range(4):
            try:
                K = _bass_gain(A, B, sigma)
            except SynthesisError:
                K = np.zeros((m, n))
            if float(np.max(np.linalg.eigvals(A + B @ K).real)) < 0:
                break
            sigma *= 2.0
        else:
            raise SynthesisError("no stabilizing initial gain found (pair may not be stabilizable)")

    S_prev = None
    for _ in range(max_iter):
        Ak = A + B @ K
        if float(np.max(np.linalg.eigvals(Ak).real)) >= 0:
            raise SynthesisError("Newton-Kleinman iterate lost stability")
        S = solve_lyapunov(Ak, Q + K.T @ R @ K)
        K = -np.linalg.solve(R, B.T @ S)
        if S_prev is not None and np.linalg.norm(S - S_prev, "fro") <= 1e-13 * max(1.0, np.linalg.norm(S, "fro")):
            break
        S_prev = S
    else:
        raise SynthesisError("Riccati iteration did not converge")

    resid = np.linalg.norm(A.T @ S + S @ A - S @ B @ np.linalg.solve(R, B.T @ S) + Q, "fro")
    if resid > 1e-8 * max(1.0, np.linalg.norm(S, "fro")):
        raise SynthesisError(f"Riccati residual too large ({resid:.3e})")
    return K


@dataclass(frozen=True)
class TerminalIngredients:
    """Offline-synthesized terminal ingredients for one agent."""

    K: np.ndarray  # (m, n) stabilizing feedback gain
    P: np.ndarray  # (n, n) Lyapunov matrix, symmetric positive definite
    Q_star: np.ndarray  # Q + K^T R K
    alpha_bar: float  # certified upper bound on the set radius
    lambda_min_Qhat: float  # min eigenvalue of P^{-1/2} Q_star P^{-1/2}
    A_k: np.ndarray  # closed-loop system matrix A + B K


@dataclass
class TerminalSet:
    """P-weighted ellipsoid {x : ||x - center||_P <= radius}. The radius may
    grow past alpha_bar through reference-shift updates; that is logged as a
    feasibility warning rather than rejected."""

    center: np.ndarray
    radius: float
    ingredients: TerminalIngredients

    def membership(self, x: np.ndarray):
        margin = self.radius**2 - weighted_norm(np.asarray(x) - self.center, self.ingredients.P) ** 2
        return margin, margin >= 0


def terminal_membership(ts: TerminalSet, x: np.ndarray):
    return ts.membership(x)


def phi_aux(
    model: AgentModel,
    ing: TerminalIngredients,
    dx: np.ndarray,
    xbar: Optional[np.ndarray] = None,
    ubar: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Linearization residual f(xbar+dx, ubar+K dx) - A_k dx, batched over dx."""
    if xbar is None:
        xbar = np.zeros(model.n)
    if ubar is None:
        ubar = np.zeros(model.m)
    dx = np.asarray(dx, dtype=float)
    return model.dynamics(xbar + dx, ubar + dx @ ing.K.T) - dx @ ing.A_k.T


def _sample_directions(rng: np.random.Generator, n_samples: int, P: np.ndarray) -> np.ndarray:
    z = rng.normal(size=(n_samples, P.shape[0]))
    return z / weighted_norm(z, P)[:, None]


def _condition_slack(model, ing, xbar, ubar, X, threshold):
    """Min over the two set conditions: contraction-ratio slack and input margin."""
    r = weighted_norm(X, ing.P)
    s_ratio = threshold * r - weighted_norm(phi_aux(model, ing, X, xbar, ubar), ing.P)
    s_input = model.input_constraints.margin(ubar + X @ ing.K.T)
    return np.minimum(s_ratio, s_input)


def alpha_upper_bound(
    model: AgentModel,
    ing: TerminalIngredients,
    xbar: Optional[np.ndarray] = None,
    ubar: Optional[np.ndarray] = None,
    alpha_max: float = 10.0,
    n_samples: int = 10_000,
    n_polish: int = 50,
    polish_iters: int = 15,
    safety: float = 0.99,
    seed: int = 0,
    rel_tol: float = 1e-6,
) -> float:
    """Largest radius for which the contraction-ratio condition and the input
    constraints hold everywhere on the set, estimated by bisection on the
    radius with a sampled inner feasibility check (shells of boundary samples
    plus multistart stochastic descent on the worst directions).

    An under-approximation is safe: every certified guarantee survives a
    smaller radius.
    """
    if xbar is None:
        xbar = model.H_x @ np.zeros(3)
    if ubar is None:
        ubar = model.H_u @ np.zeros(3)
    rng = np.random.default_rng(seed)
    D = _sample_directions(rng, n_samples, ing.P)
    threshold = safety * ing.lambda_min_Qhat / 4.0
    shells = np.array([0.3, 0.6, 0.85, 1.0])

    def feasible(alpha: float) -> bool:
        worst = None
        for frac in shells:
            slack = _condition_slack(model, ing, xbar, ubar, (alpha * frac) * D, threshold)
            if float(np.min(slack)) < 0:
                return False
            if frac == 1.0:
                worst = D[np.argsort(slack)[:n_polish]]
        # stochastic descent on the worst boundary directions
        Dw = worst.copy()
        slack_w = _condition_slack(model, ing, xbar, ubar, alpha * Dw, threshold)
        for _ in range(polish_iters):
            cand = Dw + 0.15 * rng.normal(size=Dw.shape)
            cand /= weighted_norm(cand, ing.P)[:, None]
            slack_c = _condition_slack(model, ing, xbar, ubar, alpha * cand, threshold)
            better = slack_c < slack_w
            Dw[better] = cand[better]
            slack_w = np.minimum(slack_w, slack_c)
            if float(np.min(slack_w)) < 0:
                return False
        return True

    if feasible(alpha_max):
        return float(alpha_max)
    hi = alpha_max
    lo = alpha_max / 2.0
    while lo > 1e-9 and not feasible(lo):
        hi = lo
        lo /= 2.0
    if lo <= 1e-9:
        raise SynthesisError("terminal set is empty: no positive radius satisfies the conditions")
    while hi - lo > rel_tol * max(hi, 1e-6):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return float(lo)


def alpha_update(alpha: float, eta: float, ing: TerminalIngredients, v_theta: np.ndarray, model: AgentModel) -> float:
    """Radius growth alpha + eta * ||H_x v_theta||_P that keeps the previous
    set inside the shifted one after a reference step of size eta along
    v_theta (triangle inequality)."""
    v = np.asarray(v_theta, dtype=float).reshape(3)
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError("v_theta must be a unit vector")
    return float(alpha + eta * weighted_norm(model.H_x @ v, ing.P))


def terminal_controller(ing: TerminalIngredients, xbar: np.ndarray, ubar: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Local feedback u = ubar + K (x - xbar); in-set states yield admissible
    inputs by construction of the radius bound."""
    return np.asarray(ubar) + (np.asarray(x) - np.asarray(xbar)) @ ing.K.T


def rollout_terminal(
    model: AgentModel,
    ing: TerminalIngredients,
    xbar: np.ndarray,
    ubar: np.ndarray,
    x0: np.ndarray,
    horizon: float,
    dt: float = 0.01,
) -> np.ndarray:
    """Integrate the closed loop under the terminal controller (feedback
    evaluated inside every RK4 stage). Returns (steps+1, ..., n) states."""
    steps = int(round(horizon / dt))

    def g(x):
        return model.dynamics(x, terminal_controller(ing, xbar, ubar, x))

    out = np.empty((steps + 1,) + np.shape(x0))
    out[0] = x0
    x = np.asarray(x0, dtype=float)
    for k in range(steps):
        k1 = g(x)
        k2 = g(x + 0.5 * dt * k1)
        k3 = g(x + 0.5 * dt * k2)
        k4 = g(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = x
    return out


def synthesize(
    model: AgentModel,
    Q: np.ndarray,
    R: np.ndarray,
    alpha_max: float = 10.0,
    seed: int = 0,
    n_samples: int = 10_000,
) -> TerminalIngredients:
    """Full offline synthesis for one agent: LQR gain, Lyapunov matrix and
    certified set radius, with the Lyapunov residual verified before return."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    xbar, ubar = steady_state_maps(model, np.zeros(3))
    A, B = linearize(model, xbar, ubar)
    K = lqr_gain(A, B, Q, R)
    A_k = A + B @ K
    Q_star = Q + K.T @ R @ K
    P = solve_lyapunov(A_k, Q_star)
    resid = np.linalg.norm(A_k.T @ P + P @ A_k + Q_star, "fro")
    if resid > 1e-8 * max(1.0, np.linalg.norm(Q_star, "fro")):
        raise SynthesisError(f"Lyapunov residual too large ({resid:.3e})")
    lam, V = np.linalg.eigh(P)
    P_inv_half = V @ np.diag(1.0 / np.sqrt(lam)) @ V.T
    Qhat = P_inv_half @ Q_star @ P_inv_half
    lam_min = float(np.min(np.linalg.eigvalsh(0.5 * (Qhat + Qhat.T))))
    ing = TerminalIngredients(K=K, P=P, Q_star=Q_star, alpha_bar=0.0, lambda_min_Qhat=lam_min, A_k=A_k)
    alpha_bar = alpha_upper_bound(
        model, ing, xbar, ubar, alpha_max=alpha_max, n_samples=n_samples, seed=seed
    )
    return replace(ing, alpha_bar=alpha_bar)


# --- serialization (matrices row-major, full double precision) -------------


def ingredients_to_dict(ing: TerminalIngredients) -> dict:
    return {
        "K": ing.K.tolist(),
        "P": ing.P.tolist(),
        "Q_star": ing.Q_star.tolist(),
        "alpha_bar": ing.alpha_bar,
        "lambda_min_Qhat": ing.lambda_min_Qhat,
        "A_k": ing.A_k.tolist(),
    }


def ingredients_from_dict(d: dict) -> TerminalIngredients:
    return TerminalIngredients(
        K=np.asarray(d["K"], dtype=float),
        P=np.asarray(d["P"], dtype=float),
        Q_star=np.asarray(d["Q_star"], dtype=float),
        alpha_bar=float(d["alpha_bar"]),
        lambda_min_Qhat=float(d["lambda_min_Qhat"]),
        A_k=np.asarray(d["A_k"], dtype=float),
    )


def save_ingredients(path, ingredients_by_agent: dict) -> None:
    payload = {str(k): ingredients_to_dict(v) for k, v in ingredients_by_agent.items()}
    Path(path).write_text(json.dumps(payload, indent=1))


def load_ingredients(path) -> dict:
    payload = json.loads(Path(path).read_text())
    return {k: ingredients_from_dict(v) for k, v in payload.items()}
