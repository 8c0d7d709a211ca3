"""Telemetry files: per-agent CSV trajectories with a fixed column order,
a JSON-lines event stream, and a JSON summary with metrics and agent
metadata. Plots and reports consume only these files.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np


def csv_columns(n: int, m: int) -> List[str]:
    return (
        ["t"]
        + [f"x_{i}" for i in range(n)]
        + [f"u_{i}" for i in range(m)]
        + ["V_o", "theta_x", "theta_y", "theta_z", "alpha", "solver_status"]
    )


@dataclass
class StepRecord:
    t: float
    step: int
    agent: int
    state: np.ndarray
    input: np.ndarray
    V_o: float
    theta: np.ndarray
    alpha: float
    solver_status: str

    def row(self) -> list:
        return (
            [repr(self.t)]
            + [repr(float(v)) for v in self.state]
            + [repr(float(v)) for v in self.input]
            + [repr(self.V_o)]
            + [repr(float(v)) for v in self.theta]
            + [repr(self.alpha), self.solver_status]
        )


@dataclass
class TelemetryLog:
    """Complete record of one scenario run."""

    records: Dict[int, List[StepRecord]] = field(default_factory=dict)
    events: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add_record(self, rec: StepRecord) -> None:
        self.records.setdefault(rec.agent, []).append(rec)

    def add_event(self, ev: dict) -> None:
        self.events.append(ev)

    def agent_array(self, agent: int, attr: str) -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.records[agent]])

    def write(self, out_dir, agents_meta: Dict[int, dict]) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for agent, recs in sorted(self.records.items()):
            meta = agents_meta[agent]
            path = out / f"agent_{agent}_{meta['name']}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(csv_columns(meta["n"], meta["m"]))
                for r in recs:
                    w.writerow(r.row())
        with (out / "events.jsonl").open("w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, separators=(",", ":")) + "\n")
        with (out / "summary.json").open("w") as fh:
            json.dump(self.summary, fh, indent=1)


def jsonable(obj):
    """Recursively convert numpy scalars/arrays for json.dumps."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    return obj


def read_agent_csv(path) -> Dict[str, np.ndarray]:
    """Columns by name; numeric columns as float arrays, status as strings."""
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if "solver_status" not in header:
        raise ValueError(f"{path}: missing required column solver_status")
    out: Dict[str, np.ndarray] = {}
    for j, name in enumerate(header):
        col = [r[j] for r in rows]
        if name == "solver_status":
            out[name] = np.array(col)
        else:
            out[name] = np.array([float(v) for v in col])
    return out


def load_events(path) -> List[dict]:
    events = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                events.append(json.loads(line))
    return events


def load_summary(path) -> dict:
    return json.loads(Path(path).read_text())
