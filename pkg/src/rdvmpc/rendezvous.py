"""Rendezvous-point negotiation: weighted-average initialization, output
offset, normalized gradient direction, the trigger/update rule and the
stopping condition.

The shared reference theta lives in a RendezvousState owned by the
coordinator (in-process) or the broker (socket mode); agents interact with it
through messages only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np


class ProtocolError(Exception):
    pass


class DegenerateGradientError(ProtocolError):
    """Predicted terminal output coincides with theta; the trigger branch
    V_o <= eps short-circuits before this can be reached when eps > 0."""


# Landing-plane reference box: theta lives on the deck plane z = 0.
DEFAULT_THETA_BOX = (np.array([-50.0, -50.0, 0.0]), np.array([50.0, 50.0, 0.0]))


def project_theta(theta: np.ndarray, box=DEFAULT_THETA_BOX) -> np.ndarray:
    lo, hi = box
    return np.clip(np.asarray(theta, dtype=float), lo, hi)


def validate_weights(weights: Dict[int, float]) -> None:
    M = len(weights)
    total = sum(weights.values())
    if abs(total - M) > 1e-12:
        raise ProtocolError(f"weights must sum to the number of agents ({M}); got {total}")
    if any(c < 0 for c in weights.values()):
        raise ProtocolError("weights must be nonnegative")


def theta_init(outputs: Dict[int, np.ndarray], weights: Dict[int, float], box=DEFAULT_THETA_BOX) -> np.ndarray:
    """Weighted average of initial agent outputs, projected onto the box."""
    validate_weights(weights)
    M = len(weights)
    raw = sum(weights[i] * np.asarray(outputs[i], dtype=float) for i in weights) / M
    return project_theta(raw, box)


def output_offset(y_terminal: np.ndarray, theta: np.ndarray) -> float:
    """Squared distance between the predicted end-of-horizon output and theta."""
    d = np.asarray(y_terminal, dtype=float) - np.asarray(theta, dtype=float)
    return float(d @ d)


def v_theta(y_terminal: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Normalized gradient of the output offset w.r.t. theta: the reference
    moves a distance eta toward the predicted output along -v_theta."""
    d = np.asarray(y_terminal, dtype=float) - np.asarray(theta, dtype=float)
    nrm = float(np.linalg.norm(d))
    if nrm <= 1e-9:
        raise DegenerateGradientError("predicted output coincides with theta")
    return -d / nrm


def stopping_condition(y: np.ndarray, theta: np.ndarray, epsilon: float) -> bool:
    return float(np.linalg.norm(np.asarray(y, dtype=float) - np.asarray(theta, dtype=float))) <= epsilon


@dataclass
class TriggerEvent:
    t_k: float
    step: int
    agent: int
    V_o: float
    triggered: bool
    theta_before: np.ndarray
    theta_after: np.ndarray


@dataclass
class RendezvousState:
    """Authoritative negotiation state held by the coordinator/broker."""

    theta: np.ndarray
    eta: float
    epsilon: float
    weights: Dict[int, float]
    theta_box: tuple = DEFAULT_THETA_BOX
    flags: Dict[int, bool] = field(default_factory=dict)
    update_log: List[TriggerEvent] = field(default_factory=list)

    def __post_init__(self):
        validate_weights(self.weights)
        if self.eta**2 >= self.epsilon:
            raise ProtocolError(f"need eta^2 < epsilon (got {self.eta}^2 >= {self.epsilon})")
        self.theta = project_theta(np.asarray(self.theta, dtype=float), self.theta_box)
        for i in self.weights:
            self.flags.setdefault(i, False)

    @property
    def flag(self) -> bool:
        return any(self.flags.values())

    def theta_update(self, y_terminal: np.ndarray, agent: int, t_k: float, step: int,
                     base_theta: Optional[np.ndarray] = None) -> Tuple[np.ndarray, TriggerEvent]:
        """Trigger check and update rule. With V_o <= epsilon theta is left
        untouched and no flag is raised; otherwise theta steps a distance eta
        toward the agent's predicted terminal output (projected onto the box)
        and every other agent's flag is set.

        base_theta selects the reference the rule is evaluated against
        (defaults to the authoritative value; parallel mode passes the
        step-start snapshot so simultaneous updates resolve last-writer-wins).
        """
        theta_k = np.array(self.theta if base_theta is None else base_theta, dtype=float)
        vo = output_offset(y_terminal, theta_k)
        if vo <= self.epsilon:
            ev = TriggerEvent(t_k, step, agent, vo, False, theta_k.copy(), theta_k.copy())
            return self.theta.copy(), ev
        direction = v_theta(y_terminal, theta_k)
        theta_new = project_theta(theta_k - self.eta * direction, self.theta_box)
        ev = TriggerEvent(t_k, step, agent, vo, True, theta_k.copy(), theta_new.copy())
        if self.update_log and t_k < self.update_log[-1].t_k:
            raise ProtocolError("update log must be monotone in time")
        self.theta = theta_new
        self.update_log.append(ev)
        for i in self.flags:
            if i != agent:
                self.flags[i] = True
        return theta_new.copy(), ev

    def download(self, agent: int) -> np.ndarray:
        """Agent-side flag consumption ("download theta, set flag = 0")."""
        self.flags[agent] = False
        return self.theta.copy()
