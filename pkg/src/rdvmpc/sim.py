"""Closed-loop scenario execution.

Builds agents from a TOML config, steps the disturbed plant and the nominal
predictors on the sampling grid, negotiates the rendezvous point through the
message bus, and records full telemetry. The per-agent controller implements
one sampling period of the event-triggered negotiation loop: download the
reference if flagged, solve the tracking problem, check the rendezvous
condition, check the stopping condition, apply the first input.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import comms, ocp, rendezvous, telemetry
from .models import (
    AgentModel,
    ConstraintSet,
    DisturbanceModel,
    boat_model,
    linear_model,
    quadcopter_model,
    rk4_step,
    steady_state_maps,
)
from .ocp import DocpSolution, DocpSpec, check_candidate_feasibility, solve_docp, warm_start_shift
from .rendezvous import RendezvousState, output_offset, stopping_condition, v_theta
from .terminal import (
    TerminalIngredients,
    alpha_update,
    load_ingredients,
    synthesize,
    terminal_controller,
    weighted_norm,
)

log = logging.getLogger(__name__)


class ConfigError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid scenario config:\n  - " + "\n  - ".join(self.problems))


class SimAbort(Exception):
    pass


# --- configuration -----------------------------------------------------------

KNOWN_TOP_KEYS = {
    "name",
    "horizon_T",
    "dt",
    "eta",
    "epsilon",
    "terminal_constraints",
    "max_sim_time",
    "seed",
    "transport",
    "update_order",
    "alpha_max",
    "theta_box_low",
    "theta_box_high",
    "plant_substeps",
    "synth_samples",
    "solver",
    "agents",
}


@dataclass
class AgentSpec:
    model: str
    weight: float
    Q: np.ndarray
    R: np.ndarray
    initial_state: np.ndarray
    disturbance: DisturbanceModel
    model_params: dict = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    name: str
    horizon_T: float
    dt: float
    eta: float
    epsilon: float
    agents: List[AgentSpec]
    terminal_constraints: bool = True
    max_sim_time: float = 30.0
    seed: int = 0
    transport: str = "inprocess"
    update_order: str = "sequential"
    alpha_max: float = 10.0
    theta_box: tuple = rendezvous.DEFAULT_THETA_BOX
    plant_substeps: int = 1
    synth_samples: int = 10_000
    solver: dict = field(default_factory=dict)

    @property
    def weights(self) -> Dict[int, float]:
        return {i: a.weight for i, a in enumerate(self.agents)}

    def validate(self) -> None:
        problems = []
        if self.dt <= 0:
            problems.append("dt must be positive")
        else:
            N = round(self.horizon_T / self.dt)
            if N < 1 or abs(N * self.dt - self.horizon_T) > 1e-9:
                problems.append("horizon_T must be a positive integer multiple of dt")
        if self.eta <= 0:
            problems.append("eta must be positive")
        if self.epsilon <= 0:
            problems.append("epsilon must be positive")
        if self.eta**2 >= self.epsilon:
            problems.append(f"need eta^2 < epsilon (got {self.eta}^2 = {self.eta**2} >= {self.epsilon})")
        if self.max_sim_time <= 0:
            problems.append("max_sim_time must be positive")
        if self.transport not in ("inprocess", "socket"):
            problems.append(f"unknown transport {self.transport!r}")
        if self.update_order not in ("sequential", "parallel"):
            problems.append(f"unknown update_order {self.update_order!r}")
        if self.plant_substeps < 1:
            problems.append("plant_substeps must be >= 1")
        if not self.agents:
            problems.append("at least one agent required")
        total = sum(a.weight for a in self.agents)
        if abs(total - len(self.agents)) > 1e-12:
            problems.append(f"agent weights must sum to the agent count ({len(self.agents)}); got {total!r}")
        if any(a.weight < 0 for a in self.agents):
            problems.append("agent weights must be nonnegative")
        for i, a in enumerate(self.agents):
            if a.model not in ("quadcopter", "boat", "linear"):
                problems.append(f"agent {i}: unknown model {a.model!r}")
                continue
            try:
                model = build_model(a, i)
            except Exception as exc:
                problems.append(f"agent {i}: cannot build model: {exc}")
                continue
            if a.initial_state.shape != (model.n,):
                problems.append(f"agent {i}: initial state must have {model.n} entries")
            for name, W, dim in (("Q", a.Q, model.n), ("R", a.R, model.m)):
                if W.shape != (dim, dim):
                    problems.append(f"agent {i}: {name} must be {dim}x{dim}")
                elif float(np.min(np.linalg.eigvalsh(W))) <= 0:
                    problems.append(f"agent {i}: {name} must be positive definite")
        if problems:
            raise ConfigError(problems)


def _as_weight_matrix(v, label) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 1:
        return np.diag(arr)
    if arr.ndim == 2:
        return arr
    raise ConfigError([f"{label} must be a diagonal list or a matrix"])


def _agent_from_dict(d: dict, index: int) -> AgentSpec:
    model = d.get("model", "")
    params = dict(d.get("params", {}))
    Q = _as_weight_matrix(d["Q"], f"agent {index} Q")
    R = _as_weight_matrix(d["R"], f"agent {index} R")
    if "initial_state" in d:
        x0 = np.asarray(d["initial_state"], dtype=float)
    elif "initial_output" in d:
        y0 = np.asarray(d["initial_output"], dtype=float)
        if model == "quadcopter":
            x0 = np.zeros(9)
            x0[:3] = y0
        elif model == "boat":
            x0 = np.zeros(6)
            x0[:2] = y0[:2]
        else:
            raise ConfigError([f"agent {index}: initial_output only supported for the vehicle models"])
    else:
        raise ConfigError([f"agent {index}: initial_state or initial_output required"])
    windows = d.get("disturbance", [])
    if windows:
        sched = tuple((w["window"][0], w["window"][1], np.asarray(w["force"], dtype=float)) for w in windows)
        bound = max(np.linalg.norm(f) for _, _, f in sched)
        dist = DisturbanceModel(schedule=sched, bound=float(d.get("disturbance_bound", bound)))
    else:
        dist = DisturbanceModel()
    return AgentSpec(
        model=model,
        weight=float(d.get("weight", 1.0)),
        Q=Q,
        R=R,
        initial_state=x0,
        disturbance=dist,
        model_params=params,
    )


def config_from_dict(raw: dict, name_fallback: str = "scenario") -> ScenarioConfig:
    unknown = set(raw.keys()) - KNOWN_TOP_KEYS
    if unknown:
        raise ConfigError([f"unknown config key {k!r}" for k in sorted(unknown)])
    agents = [_agent_from_dict(a, i) for i, a in enumerate(raw.get("agents", []))]
    lo = np.asarray(raw.get("theta_box_low", rendezvous.DEFAULT_THETA_BOX[0]), dtype=float)
    hi = np.asarray(raw.get("theta_box_high", rendezvous.DEFAULT_THETA_BOX[1]), dtype=float)
    cfg = ScenarioConfig(
        name=raw.get("name", name_fallback),
        horizon_T=float(raw["horizon_T"]),
        dt=float(raw["dt"]),
        eta=float(raw["eta"]),
        epsilon=float(raw["epsilon"]),
        agents=agents,
        terminal_constraints=bool(raw.get("terminal_constraints", True)),
        max_sim_time=float(raw.get("max_sim_time", 30.0)),
        seed=int(raw.get("seed", 0)),
        transport=str(raw.get("transport", "inprocess")),
        update_order=str(raw.get("update_order", "sequential")),
        alpha_max=float(raw.get("alpha_max", 10.0)),
        theta_box=(lo, hi),
        plant_substeps=int(raw.get("plant_substeps", 1)),
        synth_samples=int(raw.get("synth_samples", 10_000)),
        solver=dict(raw.get("solver", {})),
    )
    cfg.validate()
    return cfg


def apply_overrides(raw: dict, overrides: List[str]) -> dict:
    """Dotted-path overrides 'a.b.c=value' with TOML-literal values. Only keys
    already present (or known top-level keys) may be set."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not key=value"])
        path, _, value = item.partition("=")
        try:
            parsed = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"override {item!r}: bad value ({exc})"])
        keys = path.strip().split(".")
        node = raw
        for seg in keys[:-1]:
            if isinstance(node, list):
                try:
                    node = node[int(seg)]
                except (ValueError, IndexError):
                    raise ConfigError([f"override {item!r}: bad path segment {seg!r}"])
            elif isinstance(node, dict) and seg in node:
                node = node[seg]
            else:
                raise ConfigError([f"override {item!r}: unknown path segment {seg!r}"])
        last = keys[-1]
        if isinstance(node, list):
            try:
                node[int(last)] = parsed
            except (ValueError, IndexError):
                raise ConfigError([f"override {item!r}: bad index {last!r}"])
        elif isinstance(node, dict) and (last in node or (node is raw and last in KNOWN_TOP_KEYS)):
            node[last] = parsed
        else:
            raise ConfigError([f"override {item!r}: unknown key {last!r}"])
    return raw


def load_config(path, overrides: Optional[List[str]] = None) -> ScenarioConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return config_from_dict(raw, name_fallback=Path(path).stem)


def build_model(spec: AgentSpec, agent_id: int) -> AgentModel:
    if spec.model == "quadcopter":
        return quadcopter_model(agent_id, **spec.model_params)
    if spec.model == "boat":
        return boat_model(agent_id, **spec.model_params)
    if spec.model == "linear":
        p = dict(spec.model_params)
        A = np.asarray(p.pop("A"), dtype=float)
        B = np.asarray(p.pop("B"), dtype=float)
        C = np.asarray(p.pop("C"), dtype=float) if "C" in p else None
        kwargs = {}
        if "u_min" in p or "u_max" in p:
            m = B.shape[1]
            u_lo = np.asarray(p.pop("u_min", [-np.inf] * m), dtype=float)
            u_hi = np.asarray(p.pop("u_max", [np.inf] * m), dtype=float)
            kwargs["input_constraints"] = ConstraintSet(u_lo, u_hi)
        if "x_min" in p or "x_max" in p:
            n = A.shape[0]
            x_lo = np.asarray(p.pop("x_min", [-np.inf] * n), dtype=float)
            x_hi = np.asarray(p.pop("x_max", [np.inf] * n), dtype=float)
            kwargs["state_constraints"] = ConstraintSet(x_lo, x_hi)
        return linear_model(A, B, C, agent_id=agent_id, **kwargs)
    raise ConfigError([f"unknown model {spec.model!r}"])


# --- terminal-ingredient synthesis with caching ------------------------------

_SYNTH_CACHE: Dict[str, TerminalIngredients] = {}


def _synth_key(spec: AgentSpec, cfg: ScenarioConfig) -> str:
    h = hashlib.sha256()
    h.update(spec.model.encode())
    h.update(json.dumps(spec.model_params, sort_keys=True, default=str).encode())
    h.update(spec.Q.tobytes())
    h.update(spec.R.tobytes())
    h.update(np.float64(cfg.alpha_max).tobytes())
    h.update(np.int64(cfg.synth_samples).tobytes())
    h.update(np.int64(cfg.seed).tobytes())
    return h.hexdigest()


def ingredients_for(cfg: ScenarioConfig, ingredients: Optional[dict] = None) -> Dict[int, TerminalIngredients]:
    out = {}
    for i, spec in enumerate(cfg.agents):
        if ingredients is not None and str(i) in ingredients:
            out[i] = ingredients[str(i)]
            continue
        key = _synth_key(spec, cfg)
        if key not in _SYNTH_CACHE:
            model = build_model(spec, i)
            _SYNTH_CACHE[key] = synthesize(
                model, spec.Q, spec.R, alpha_max=cfg.alpha_max, seed=cfg.seed, n_samples=cfg.synth_samples
            )
        out[i] = _SYNTH_CACHE[key]
    return out


# --- per-agent controller ----------------------------------------------------


@dataclass
class StepResult:
    record: telemetry.StepRecord
    events: List[dict]
    y_terminal: Optional[np.ndarray]  # set when the rendezvous condition fired
    stopped: bool
    applied: np.ndarray
    solve_time: float
    solver_status: str


class AgentController:
    """One agent's controller state across the closed loop: local reference
    copy, terminal-set radius, warm start, stop latch."""

    def __init__(
        self,
        agent_id: int,
        model: AgentModel,
        ing: TerminalIngredients,
        docp_spec: DocpSpec,
        eta: float,
        epsilon: float,
        theta0: np.ndarray,
        alpha0: float,
    ):
        self.id = agent_id
        self.model = model
        self.ing = ing
        self.spec = docp_spec
        self.eta = eta
        self.epsilon = epsilon
        self.theta = np.asarray(theta0, dtype=float).copy()
        self.alpha = float(alpha0)
        self.prev: Optional[DocpSolution] = None
        self.al_state = None
        self.stopped = False
        self.consecutive_infeasible = 0

    def adopt(self, theta: np.ndarray, alpha: float) -> None:
        self.theta = np.asarray(theta, dtype=float).copy()
        self.alpha = float(alpha)

    def execute_step(self, t: float, k: int, x_plant: np.ndarray, flag: bool,
                     theta_auth: np.ndarray, alpha_auth: float) -> StepResult:
        events: List[dict] = []
        theta_changed = False
        if flag:
            theta_changed = not np.array_equal(theta_auth, self.theta)
            self.adopt(theta_auth, alpha_auth)

        # runtime certificate: shifted candidate rolled against the (possibly
        # shifted) current target
        if self.prev is not None:
            xbar_n, ubar_n = steady_state_maps(self.model, self.theta)
            rep = check_candidate_feasibility(self.prev, (xbar_n, ubar_n, self.alpha), self.spec)
            events.append(
                {
                    "event": "feasibility_report",
                    "agent": self.id,
                    "step": k,
                    "t": t,
                    "state_violation": rep.state_violation,
                    "input_violation": rep.input_violation,
                    "terminal_margin": rep.terminal_margin,
                    "feasible": bool(rep.feasible),
                    "theta_changed": bool(theta_changed),
                }
            )

        y_now = self.model.output(x_plant)
        if self.stopped and stopping_condition(y_now, self.theta, self.epsilon):
            # the negotiation has ended for this agent: station-keep under the
            # local terminal controller, no solves, no triggers
            xbar, ubar = steady_state_maps(self.model, self.theta)
            u_app = self.model.input_constraints.project(terminal_controller(self.ing, xbar, ubar, x_plant))
            rec = telemetry.StepRecord(
                t=t, step=k, agent=self.id, state=np.asarray(x_plant).copy(), input=np.asarray(u_app).copy(),
                V_o=output_offset(y_now, self.theta), theta=self.theta.copy(), alpha=self.alpha,
                solver_status="stopped",
            )
            return StepResult(rec, events, None, True, u_app, 0.0, "stopped")
        self.stopped = False

        u_init = warm_start_shift(self.prev, self.spec) if self.prev is not None else None
        al_warm = None
        if self.al_state is not None:
            lam_s, lam_t, rho = self.al_state
            # the grid moves one step: shift the point-wise multipliers along
            lam_shift = np.vstack([lam_s[1:], lam_s[-1:]]) if lam_s.size else lam_s
            al_warm = (lam_shift, lam_t, rho)
        t0 = time.perf_counter()
        sol = solve_docp(self.spec, x_plant, self.theta, self.alpha, u_init, al_warm=al_warm)
        solve_time = time.perf_counter() - t0
        self.al_state = sol.al_state

        usable = sol.status in ("optimal", "max_iter") or sol.constraint_residual < 1e-3
        # the failure-cascade abort counts unusable solves; graceful-degradation
        # steps (residual below 1e-3) are applied and do not count
        if not usable:
            self.consecutive_infeasible += 1
        else:
            self.consecutive_infeasible = 0
        if self.consecutive_infeasible > 5:
            raise SimAbort(f"agent {self.id}: more than 5 consecutive unusable infeasible solves at t={t:.2f}")
        status = sol.status
        if usable:
            active = sol
        elif self.prev is not None:
            # graceful degradation: roll the previous shifted candidate
            U_c = warm_start_shift(self.prev, self.spec)
            X_c = ocp.rollout(self.spec, U_c, np.asarray(x_plant, dtype=float))
            xbar, ubar = steady_state_maps(self.model, self.theta)
            active = DocpSolution(
                inputs=U_c, states=X_c, outputs=X_c @ self.model.output_matrix.T,
                cost=ocp._cost_of_rollout(self.spec, X_c, U_c, xbar, ubar), target=(xbar, ubar),
                status="held", kkt_residual=np.nan,
                terminal_margin=float(self.alpha**2 - weighted_norm(X_c[-1] - xbar, self.ing.P) ** 2),
                constraint_residual=sol.constraint_residual, theta=self.theta.copy(), alpha=self.alpha,
            )
            status = "held"
            events.append({"event": "solver_fallback", "agent": self.id, "step": k, "t": t,
                           "residual": sol.constraint_residual, "action": "held_candidate"})
        else:
            active = sol
            events.append({"event": "solver_fallback", "agent": self.id, "step": k, "t": t,
                           "residual": sol.constraint_residual, "action": "best_iterate"})
        self.prev = active
        events.append({"event": "solver", "agent": self.id, "step": k, "t": t, "status": sol.status,
                       "residual": sol.constraint_residual, "kkt": sol.kkt_residual,
                       "terminal_margin": sol.terminal_margin, "iters": sol.n_inner_iters})

        y_terminal = active.outputs[-1]
        V_o = output_offset(y_terminal, self.theta)
        trigger = V_o > self.epsilon

        stopped_now = stopping_condition(y_now, self.theta, self.epsilon)
        if stopped_now:
            xbar, ubar = steady_state_maps(self.model, self.theta)
            u_app = self.model.input_constraints.project(terminal_controller(self.ing, xbar, ubar, x_plant))
            row_status = "stopped"
        else:
            u_app = active.inputs[0]
            row_status = status
        self.stopped = stopped_now

        rec = telemetry.StepRecord(
            t=t, step=k, agent=self.id, state=np.asarray(x_plant).copy(), input=np.asarray(u_app).copy(),
            V_o=V_o, theta=self.theta.copy(), alpha=self.alpha, solver_status=row_status,
        )
        return StepResult(rec, events, y_terminal if trigger else None, stopped_now, u_app, solve_time, row_status)


def compute_theta_step(
    theta_base: np.ndarray,
    y_terminal: np.ndarray,
    eta: float,
    theta_box,
    alphas: Dict[int, float],
    ingredients: Dict[int, TerminalIngredients],
    models: Dict[int, AgentModel],
):
    """The triggered branch of the update rule plus the per-agent radius
    growth; one code path shared by in-process and socket modes."""
    v = v_theta(y_terminal, theta_base)
    theta_new = rendezvous.project_theta(np.asarray(theta_base, dtype=float) - eta * v, theta_box)
    new_alphas = {i: alpha_update(alphas[i], eta, ingredients[i], v, models[i]) for i in alphas}
    return theta_new, new_alphas, v


# --- scenario drivers ---------------------------------------------------------


def _plant_step(model: AgentModel, x: np.ndarray, u: np.ndarray, dist: DisturbanceModel,
                t: float, dt: float, substeps: int) -> np.ndarray:
    h = dt / substeps
    for s in range(substeps):
        x = rk4_step(model, x, u, dist.force_at(t + s * h), h)
    return x


def run_scenario(cfg: ScenarioConfig, ingredients: Optional[dict] = None) -> telemetry.TelemetryLog:
    """In-process closed loop (sequential or parallel update order)."""
    cfg.validate()
    M = len(cfg.agents)
    ids = list(range(M))
    models = {i: build_model(cfg.agents[i], i) for i in ids}
    ings = ingredients_for(cfg, ingredients)
    specs = {
        i: DocpSpec(
            model=models[i], ingredients=ings[i], Q=cfg.agents[i].Q, R=cfg.agents[i].R,
            horizon_T=cfg.horizon_T, dt=cfg.dt,
            terminal_constraint_enabled=cfg.terminal_constraints, **cfg.solver,
        )
        for i in ids
    }

    x_plant = {i: cfg.agents[i].initial_state.copy() for i in ids}
    y0 = {i: models[i].output(x_plant[i]) for i in ids}
    theta0 = rendezvous.theta_init(y0, cfg.weights, cfg.theta_box)
    state = RendezvousState(theta=theta0, eta=cfg.eta, epsilon=cfg.epsilon, weights=cfg.weights,
                            theta_box=cfg.theta_box)
    alphas = {i: ings[i].alpha_bar for i in ids}
    bus = comms.InProcessBus(ids)
    controllers = {
        i: AgentController(i, models[i], ings[i], specs[i], cfg.eta, cfg.epsilon, theta0, alphas[i])
        for i in ids
    }

    tlog = telemetry.TelemetryLog()
    solve_times: List[float] = []
    max_state_viol = {i: 0.0 for i in ids}
    max_input_viol = {i: 0.0 for i in ids}
    min_term_margin = np.inf
    statuses = {i: [] for i in ids}
    terminated = "timeout"
    rendezvous_time = None
    diagnosis = None

    def handle_trigger(agent: int, y_T: np.ndarray, base_theta: np.ndarray,
                       base_alphas: Dict[int, float], t: float, k: int) -> None:
        nonlocal alphas
        theta_new, new_alphas, _v = compute_theta_step(
            base_theta, y_T, cfg.eta, cfg.theta_box, base_alphas, ings, models
        )
        _, ev = state.theta_update(y_T, agent, t, k, base_theta=base_theta)
        alphas = new_alphas
        controllers[agent].adopt(theta_new, new_alphas[agent])
        msg = comms.Message("ThetaUpdate", sender=agent, step=k, theta=theta_new, alpha=new_alphas, ts=t,
                            extra={"V_o": ev.V_o, "theta_before": list(ev.theta_before)})
        bus.publish(msg)
        tlog.add_event({"event": "trigger", "agent": agent, "step": k, "t": t, "V_o": ev.V_o,
                        "triggered": True, "theta_before": list(ev.theta_before),
                        "theta_after": list(ev.theta_after)})
        tlog.add_event({"event": "message", "kind": "ThetaUpdate", "sender": agent, "step": k, "t": t,
                        "theta": list(theta_new), "alpha": {str(i): new_alphas[i] for i in new_alphas}})
        for i in ids:
            if new_alphas[i] > ings[i].alpha_bar and alphas_prev_below.get(i, True):
                tlog.add_event({"event": "alpha_warning", "agent": i, "step": k, "t": t,
                                "alpha": new_alphas[i], "alpha_bar": ings[i].alpha_bar})
                alphas_prev_below[i] = False

    alphas_prev_below = {i: True for i in ids}
    n_steps = int(round(cfg.max_sim_time / cfg.dt))
    try:
        for k in range(n_steps + 1):
            t = k * cfg.dt
            results: Dict[int, StepResult] = {}
            if cfg.update_order == "sequential":
                for i in ids:
                    pending = bus.poll(i)
                    flag = any(m.kind == "ThetaUpdate" for m in pending)
                    if flag:
                        state.download(i)
                    res = controllers[i].execute_step(t, k, x_plant[i], flag, state.theta, alphas[i])
                    results[i] = res
                    if res.y_terminal is not None:
                        handle_trigger(i, res.y_terminal, state.theta, alphas, t, k)
            else:  # parallel: solves run concurrently against a frozen reference
                theta_snapshot = state.theta.copy()
                alpha_snapshot = dict(alphas)
                flags = {}
                for i in ids:
                    pending = bus.poll(i)
                    flags[i] = any(m.kind == "ThetaUpdate" for m in pending)
                    if flags[i]:
                        state.download(i)
                with ThreadPoolExecutor(max_workers=M) as pool:
                    futs = {
                        i: pool.submit(
                            controllers[i].execute_step, t, k, x_plant[i], flags[i],
                            theta_snapshot, alpha_snapshot[i],
                        )
                        for i in ids
                    }
                    results = {i: futs[i].result() for i in ids}
                triggered = [i for i in ids if results[i].y_terminal is not None]
                if len(triggered) > 1:
                    tlog.add_event({"event": "conflict", "step": k, "t": t, "agents": triggered,
                                    "resolution": "last-writer-wins"})
                for i in triggered:  # ascending id: the last write wins
                    handle_trigger(i, results[i].y_terminal, theta_snapshot, alpha_snapshot, t, k)

            for i in ids:
                res = results[i]
                tlog.add_record(res.record)
                for ev in res.events:
                    tlog.add_event(ev)
                if res.solve_time > 0:
                    solve_times.append(res.solve_time)
                statuses[i].append(res.solver_status)
                max_state_viol[i] = max(max_state_viol[i], float(models[i].state_constraints.violation(x_plant[i])))
                max_input_viol[i] = max(max_input_viol[i], float(models[i].input_constraints.violation(res.applied)))
                if controllers[i].prev is not None and res.solver_status == "optimal":
                    min_term_margin = min(min_term_margin, controllers[i].prev.terminal_margin)

            if all(res.stopped for res in results.values()):
                terminated = "rendezvous"
                rendezvous_time = t
                break
            for i in ids:
                x_plant[i] = _plant_step(models[i], x_plant[i], results[i].applied,
                                         cfg.agents[i].disturbance, t, cfg.dt, cfg.plant_substeps)
    except SimAbort as exc:
        terminated = "aborted"
        diagnosis = str(exc)
        tlog.add_event({"event": "abort", "reason": diagnosis})

    tlog.add_event({"event": "terminated", "reason": terminated,
                    "t": rendezvous_time if rendezvous_time is not None else cfg.max_sim_time})

    agents_meta = {
        i: {"name": models[i].name, "n": models[i].n, "m": models[i].m,
            "output_matrix": models[i].output_matrix.tolist()}
        for i in ids
    }
    y_final = {i: models[i].output(x_plant[i]) for i in ids}
    xy = [np.asarray(y_final[i][:2]) for i in ids]
    final_xy_dist = float(max(np.linalg.norm(a - b) for a in xy for b in xy)) if M > 1 else 0.0
    tlog.summary = telemetry.jsonable({
        "scenario": cfg.name,
        "terminated": terminated,
        "diagnosis": diagnosis,
        "rendezvous": terminated == "rendezvous",
        "rendezvous_time": rendezvous_time,
        "final_theta": state.theta,
        "theta_update_count": len(state.update_log),
        "message_count": bus.stats.total_messages,
        "messages_per_step": {str(k): v for k, v in bus.stats.messages_per_step.items()},
        "bytes_on_wire": bus.stats.bytes_on_wire,
        "cumulative_theta_displacement": float(
            sum(np.linalg.norm(ev.theta_after - ev.theta_before) for ev in state.update_log)
        ),
        "final_xy_distance": final_xy_dist,
        "landing_success": terminated == "rendezvous" and final_xy_dist <= 0.5,
        "max_state_violation": max_state_viol,
        "max_input_violation": max_input_viol,
        "min_terminal_margin": None if not np.isfinite(min_term_margin) else min_term_margin,
        "alphas_final": alphas,
        "alpha_bars": {i: ings[i].alpha_bar for i in ids},
        "solve_time_mean": float(np.mean(solve_times)) if solve_times else 0.0,
        "solve_time_max": float(np.max(solve_times)) if solve_times else 0.0,
        "statuses": statuses,
        "agents": agents_meta,
        "disturbance_windows": {
            str(i): [[t0, t1, list(f)] for t0, t1, f in cfg.agents[i].disturbance.schedule] for i in ids
        },
        "transport": "inprocess",
        "update_order": cfg.update_order,
        "final_outputs": {str(i): y_final[i] for i in ids},
        "theta_trace": [list(ev.theta_after) for ev in state.update_log],
    })
    return tlog


def compute_metrics(tlog: telemetry.TelemetryLog) -> dict:
    """Summary metrics recomputable from the step records and events."""
    triggers = [e for e in tlog.events if e.get("event") == "trigger" and e.get("triggered")]
    messages = [e for e in tlog.events if e.get("event") == "message"]
    term = next((e for e in tlog.events if e.get("event") == "terminated"), {})
    return {
        "theta_update_count": len(triggers),
        "message_count": len(messages),
        "terminated": term.get("reason"),
        "rendezvous_time": tlog.summary.get("rendezvous_time"),
        "final_theta": tlog.summary.get("final_theta"),
        "landing_success": tlog.summary.get("landing_success"),
        "solve_time_mean": tlog.summary.get("solve_time_mean"),
        "solve_time_max": tlog.summary.get("solve_time_max"),
        "max_state_violation": tlog.summary.get("max_state_violation"),
        "min_terminal_margin": tlog.summary.get("min_terminal_margin"),
    }


# --- socket mode ---------------------------------------------------------------


def broker_loop(cfg: ScenarioConfig, port: int, out_dir, ingredients: Optional[dict] = None,
                on_port=None) -> int:
    """Hosts the reference blackboard and the step barrier; assembles the full
    telemetry from per-agent acknowledgements. Returns a CLI exit code."""
    M = len(cfg.agents)
    ids = list(range(M))
    models = {i: build_model(cfg.agents[i], i) for i in ids}
    ings = ingredients_for(cfg, ingredients)
    server = comms.BrokerServer(port, M)
    if on_port:
        on_port(server.port)
    tlog = telemetry.TelemetryLog()
    try:
        ann = server.accept_agents()
        y0 = {i: np.asarray(ann[i].extra["y"], dtype=float) for i in ids}
        theta0 = rendezvous.theta_init(y0, cfg.weights, cfg.theta_box)
        state = RendezvousState(theta=theta0, eta=cfg.eta, epsilon=cfg.epsilon, weights=cfg.weights,
                                theta_box=cfg.theta_box)
        alphas = {i: ings[i].alpha_bar for i in ids}
        stopped = {i: False for i in ids}
        terminated = "timeout"
        rendezvous_time = None
        n_steps = int(round(cfg.max_sim_time / cfg.dt))
        aborted = None
        for k in range(n_steps + 1):
            t = k * cfg.dt
            for i in ids:
                flag = state.flags[i]
                server.send(i, comms.Message("Flag", sender=-1, step=k, theta=state.theta, alpha=alphas,
                                             ts=t, extra={"flag": int(flag), "turn": True}))
                if flag:
                    state.download(i)
                while True:
                    msg = server.recv(i)
                    if msg.kind == "ThetaUpdate":
                        _, ev = state.theta_update(
                            np.asarray(msg.extra["y_terminal"], dtype=float), i, t, k
                        )
                        alphas = dict(msg.alpha)
                        tlog.add_event({"event": "trigger", "agent": i, "step": k, "t": t,
                                        "V_o": ev.V_o, "triggered": True,
                                        "theta_before": list(ev.theta_before),
                                        "theta_after": list(ev.theta_after)})
                        tlog.add_event({"event": "message", "kind": "ThetaUpdate", "sender": i,
                                        "step": k, "t": t, "theta": list(msg.theta),
                                        "alpha": {str(j): msg.alpha[j] for j in msg.alpha}})
                        if not np.allclose(msg.theta, state.theta, atol=1e-12):
                            log.warning("broker/agent theta mismatch at step %d", k)
                    elif msg.kind == "Ack":
                        row = msg.extra.get("row")
                        if row is not None:
                            tlog.add_record(telemetry.StepRecord(
                                t=row["t"], step=row["step"], agent=i, state=np.asarray(row["state"]),
                                input=np.asarray(row["input"]), V_o=row["V_o"],
                                theta=np.asarray(row["theta"]), alpha=row["alpha"],
                                solver_status=row["solver_status"],
                            ))
                        for ev in msg.extra.get("events", []):
                            tlog.add_event(ev)
                        stopped[i] = bool(msg.extra["stopped"])
                        if msg.extra.get("abort"):
                            aborted = msg.extra.get("diagnosis", "agent abort")
                        break
                    else:
                        raise comms.TransportError(f"unexpected {msg.kind} from agent {i}")
                if aborted:
                    break
            if aborted:
                terminated = "aborted"
                break
            if all(stopped.values()):
                terminated = "rendezvous"
                rendezvous_time = t
                break
        for i in ids:
            try:
                server.send(i, comms.Message("Flag", sender=-1, step=-1, ts=0.0,
                                             extra={"turn": False, "end": True, "reason": terminated}))
            except OSError:
                pass
        tlog.add_event({"event": "terminated", "reason": terminated,
                        "t": rendezvous_time if rendezvous_time is not None else cfg.max_sim_time})
        agents_meta = {i: {"name": models[i].name, "n": models[i].n, "m": models[i].m,
                           "output_matrix": models[i].output_matrix.tolist()} for i in ids}
        tlog.summary = telemetry.jsonable({
            "scenario": cfg.name,
            "terminated": terminated,
            "rendezvous": terminated == "rendezvous",
            "rendezvous_time": rendezvous_time,
            "final_theta": state.theta,
            "theta_update_count": len(state.update_log),
            "message_count": server.stats.total_messages,
            "messages_per_step": {str(s): v for s, v in server.stats.messages_per_step.items()},
            "bytes_on_wire": server.stats.bytes_on_wire,
            "alphas_final": alphas,
            "agents": agents_meta,
            "transport": "socket",
            "update_order": "sequential",
            "theta_trace": [list(ev.theta_after) for ev in state.update_log],
        })
        if out_dir is not None:
            tlog.write(out_dir, agents_meta)
        return 0 if terminated == "rendezvous" else 3
    finally:
        server.close()


def agent_loop(cfg: ScenarioConfig, agent_index: int, host: str, port: int,
               ingredients: Optional[dict] = None) -> int:
    """One agent as a process: connects to the broker, announces its initial
    output, then serves turn grants until the broker signals the end."""
    i = agent_index
    model = build_model(cfg.agents[i], i)
    ings = ingredients_for(cfg, ingredients)
    models = {j: build_model(cfg.agents[j], j) for j in range(len(cfg.agents))}
    spec = DocpSpec(model=model, ingredients=ings[i], Q=cfg.agents[i].Q, R=cfg.agents[i].R,
                    horizon_T=cfg.horizon_T, dt=cfg.dt,
                    terminal_constraint_enabled=cfg.terminal_constraints, **cfg.solver)
    x_plant = cfg.agents[i].initial_state.copy()
    ch = comms.connect_with_retries(host, port, retries=3)
    try:
        ch.send(comms.Message("StateAnnounce", sender=i, step=0,
                              extra={"y": list(model.output(x_plant))}))
        ctrl: Optional[AgentController] = None
        alphas: Dict[int, float] = {}
        while True:
            grant = ch.recv(timeout=600.0)
            if grant.extra.get("end"):
                return 0
            k, t = grant.step, grant.ts
            alphas = dict(grant.alpha)
            if ctrl is None:
                ctrl = AgentController(i, model, ings[i], spec, cfg.eta, cfg.epsilon,
                                       grant.theta, alphas[i])
            flag = bool(grant.extra.get("flag"))
            abort_info = None
            try:
                res = ctrl.execute_step(t, k, x_plant, flag, grant.theta, alphas[i])
            except SimAbort as exc:
                abort_info = str(exc)
                res = None
            if res is not None and res.y_terminal is not None:
                theta_new, new_alphas, _v = compute_theta_step(
                    ctrl.theta, res.y_terminal, cfg.eta, cfg.theta_box, alphas, ings, models
                )
                ctrl.adopt(theta_new, new_alphas[i])
                alphas = new_alphas
                ch.send(comms.Message("ThetaUpdate", sender=i, step=k, theta=theta_new,
                                      alpha=new_alphas, ts=t,
                                      extra={"y_terminal": list(res.y_terminal)}))
            if res is not None:
                r = res.record
                ch.send(comms.Message("Ack", sender=i, step=k, ts=t, extra={
                    "stopped": bool(res.stopped),
                    "row": {"t": r.t, "step": r.step, "state": list(r.state), "input": list(r.input),
                            "V_o": r.V_o, "theta": list(r.theta), "alpha": r.alpha,
                            "solver_status": r.solver_status},
                    "events": telemetry.jsonable(res.events),
                }))
                x_plant = _plant_step(model, x_plant, res.applied, cfg.agents[i].disturbance,
                                      t, cfg.dt, cfg.plant_substeps)
            else:
                ch.send(comms.Message("Ack", sender=i, step=k, ts=t,
                                      extra={"stopped": False, "abort": True, "diagnosis": abort_info,
                                             "row": None, "events": []}))
                return 3
    finally:
        ch.close()
