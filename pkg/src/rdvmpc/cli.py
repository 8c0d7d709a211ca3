"""Command-line entry point: offline synthesis, scenario runs (in-process or
socket transport), broker/agent processes, and post-hoc reports.

Exit codes: 0 success/rendezvous, 2 validation error, 3 runtime abort or
timeout, 1 synthesis failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import sim, telemetry
from .comms import TransportError
from .terminal import SynthesisError, load_ingredients, save_ingredients

log = logging.getLogger(__name__)


def _setup_logging():
    level = os.environ.get("RDV_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_cfg(args) -> sim.ScenarioConfig:
    path = Path(args.config)
    if not path.exists():
        raise sim.ConfigError([f"config file not found: {path}"])
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return sim.load_config(path, overrides)


def _prepare_out(args, cfg) -> Path:
    out = Path(args.out) if args.out else Path("out") / cfg.name
    if out.exists() and (out / "summary.json").exists() and not getattr(args, "force", False):
        raise sim.ConfigError([f"output directory {out} already holds results; pass --force to overwrite"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ingredients_arg(args):
    if getattr(args, "ingredients", None):
        return load_ingredients(args.ingredients)
    return None


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(args, cfg)
    try:
        ings = sim.ingredients_for(cfg)
    except SynthesisError as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return 1
    path = out / "ingredients.json"
    save_ingredients(path, ings)
    for i, ing in sorted(ings.items()):
        eigs = np.linalg.eigvalsh(ing.P)
        print(f"agent {i} ({cfg.agents[i].model}): K {ing.K.shape[0]}x{ing.K.shape[1]}, "
              f"P eigenvalues in [{eigs.min():.6g}, {eigs.max():.6g}], "
              f"alpha_bar = {ing.alpha_bar:.6g}, lambda_min(Qhat) = {ing.lambda_min_Qhat:.6g}")
    print(f"wrote {path}")
    return 0


def _print_metrics(summary: dict) -> None:
    theta = summary.get("final_theta")
    print(f"scenario:          {summary.get('scenario')}")
    print(f"terminated:        {summary.get('terminated')}")
    print(f"rendezvous time:   {summary.get('rendezvous_time')}")
    print(f"theta updates:     {summary.get('theta_update_count')}")
    print(f"messages:          {summary.get('message_count')}")
    print(f"final theta:       {np.round(np.asarray(theta, dtype=float), 6).tolist() if theta is not None else None}")
    print(f"final xy distance: {summary.get('final_xy_distance')}")
    print(f"landing success:   {summary.get('landing_success')}")
    if summary.get("solve_time_mean") is not None:
        print(f"solve time:        mean {summary.get('solve_time_mean'):.4g} s, "
              f"max {summary.get('solve_time_max'):.4g} s")


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(args, cfg)
    if cfg.transport == "socket":
        return _run_socket(args, cfg, out)
    tlog = sim.run_scenario(cfg, ingredients=_ingredients_arg(args))
    agents_meta = {int(k): v for k, v in tlog.summary["agents"].items()}
    tlog.write(out, agents_meta)
    _print_metrics(tlog.summary)
    if tlog.summary["terminated"] == "rendezvous":
        return 0
    return 3


def _run_socket(args, cfg, out: Path) -> int:
    """Orchestrate a broker and one process per agent on localhost."""
    ing_path = Path(args.ingredients) if getattr(args, "ingredients", None) else out / "ingredients.json"
    if not ing_path.exists():
        save_ingredients(ing_path, sim.ingredients_for(cfg))
    passthrough = ["--config", str(args.config)]
    for item in args.set or []:
        passthrough += ["--set", item]
    if getattr(args, "seed", None) is not None:
        passthrough += ["--set", f"seed={args.seed}"]
    passthrough += ["--ingredients", str(ing_path)]
    broker_cmd = [sys.executable, "-m", "rdvmpc.cli", "broker", *passthrough,
                  "--out", str(out), "--port", str(args.port or 0), "--force"]
    broker = subprocess.Popen(broker_cmd, stdout=subprocess.PIPE, text=True)
    try:
        line = broker.stdout.readline().strip()
        if not line.startswith("PORT "):
            broker.kill()
            raise TransportError(f"broker did not report a port (got {line!r})")
        port = int(line.split()[1])
        agents = []
        for i in range(len(cfg.agents)):
            agents.append(subprocess.Popen(
                [sys.executable, "-m", "rdvmpc.cli", "agent", *passthrough,
                 "--agent-index", str(i), "--broker-addr", f"127.0.0.1:{port}"],
            ))
        rc_agents = [p.wait(timeout=3600) for p in agents]
        rc_broker = broker.wait(timeout=60)
    finally:
        if broker.poll() is None:
            broker.kill()
    summary_path = out / "summary.json"
    if summary_path.exists():
        _print_metrics(telemetry.load_summary(summary_path))
    if any(rc != 0 for rc in rc_agents):
        return 3
    return rc_broker


def cmd_broker(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    return sim.broker_loop(cfg, args.port or 0, out, ingredients=_ingredients_arg(args),
                           on_port=lambda p: print(f"PORT {p}", flush=True))


def cmd_agent(args) -> int:
    cfg = _load_cfg(args)
    host, _, port = args.broker_addr.partition(":")
    return sim.agent_loop(cfg, args.agent_index, host or "127.0.0.1", int(port),
                          ingredients=_ingredients_arg(args))


def cmd_report(args) -> int:
    tdir = Path(args.telemetry)
    summary_path = tdir / "summary.json"
    events_path = tdir / "events.jsonl"
    if not summary_path.exists():
        print(f"no summary.json in {tdir}", file=sys.stderr)
        return 2
    summary = telemetry.load_summary(summary_path)
    _print_metrics(summary)
    if events_path.exists():
        events = telemetry.load_events(events_path)
        triggers = [e for e in events if e.get("event") == "trigger" and e.get("triggered")]
        messages = [e for e in events if e.get("event") == "message"]
        reports = [e for e in events if e.get("event") == "feasibility_report"]
        print(f"events:            {len(events)} total, {len(triggers)} triggers, "
              f"{len(messages)} messages, {len(reports)} feasibility reports")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rdv", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="scenario TOML file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="dotted-path config override (repeatable)")
            p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
            p.add_argument("--ingredients", default=None, help="pre-synthesized ingredients JSON")

    p = sub.add_parser("synth", help="offline terminal-ingredient synthesis")
    common(p)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("run", help="run a scenario and write telemetry")
    common(p)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true", help="overwrite existing results")
    p.add_argument("--port", type=int, default=0, help="broker port for socket transport (0 = auto)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("broker", help="run the message broker process")
    common(p)
    p.add_argument("--out", default=None)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_broker)

    p = sub.add_parser("agent", help="run one agent process")
    common(p)
    p.add_argument("--agent-index", type=int, required=True)
    p.add_argument("--broker-addr", required=True, metavar="HOST:PORT")
    p.set_defaults(fn=cmd_agent)

    p = sub.add_parser("report", help="print metrics from telemetry files")
    p.add_argument("--telemetry", required=True, help="telemetry directory")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except sim.ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (sim.SimAbort, TransportError) as exc:
        print(str(exc), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
