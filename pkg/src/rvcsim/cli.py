"""Headless entry point: scripted trials, replay verification, exports, and
the session service.

Exit codes: 0 trial Done / success, 1 bad inputs or replay divergence,
2 trial Failed, 3 scripted trial timed out, 4 replay hash mismatch,
5 serve port already in use.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .engine import SimConfig, SimulationEngine
from .eye_sim import Scenario, ScenarioValidationError
from .oct import default_plane, render_bscan
from .telemetry import (
    HashMismatchError,
    TrialLog,
    export_csv,
    first_divergence,
    replay,
    summarize,
)
from .workflow import Step

SCRIPT_ACTIONS = {
    "key-down", "key-up", "request-bscan", "declare-verification",
    "begin-infusion", "confirm-contact",
}


class ScriptError(ValueError):
    pass


class CommandScript:
    """Timed action list driving a headless trial through the same ingestion
    path the service uses."""

    def __init__(self, actions):
        self.actions = actions

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict) or "actions" not in data:
            raise ScriptError("script must be an object with an 'actions' list")
        actions = []
        last_t = 0.0
        for i, entry in enumerate(data["actions"]):
            if not isinstance(entry, dict):
                raise ScriptError(f"actions[{i}] must be an object")
            try:
                at = float(entry["at"])
                action = entry["action"]
            except (KeyError, TypeError, ValueError) as exc:
                raise ScriptError(f"actions[{i}]: {exc}")
            if action not in SCRIPT_ACTIONS:
                raise ScriptError(f"actions[{i}]: unknown action {action!r}")
            if at < last_t:
                raise ScriptError(f"actions[{i}]: times must be non-decreasing")
            last_t = at
            actions.append((at, entry))
        return cls(actions)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScriptError(f"script is not valid JSON: {exc}")
        return cls.from_dict(data)

    def to_message(self, entry) -> dict | None:
        action = entry["action"]
        if action == "key-down":
            return {"type": "key", "key": entry["key"], "action": "down"}
        if action == "key-up":
            return {"type": "key", "key": entry["key"], "action": "up"}
        if action == "declare-verification":
            return {"type": "declare_verification", "passed": bool(entry.get("passed"))}
        if action == "begin-infusion":
            return {"type": "begin_infusion"}
        if action == "confirm-contact":
            return {"type": "confirm_contact"}
        return None  # request-bscan handled by the runner


def _load_scenario(path) -> Scenario:
    if path is None:
        return Scenario.default()
    return Scenario.load(path)


def _load_config(path, dt_ms=None) -> SimConfig:
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    base = SimConfig().to_dict()
    unknown = sorted(set(data) - set(base))
    if unknown:
        raise ValueError("unknown config fields: " + ", ".join(unknown))
    base.update(data)
    if dt_ms is not None:
        base["dt_ms"] = dt_ms
    return SimConfig.from_dict(base)


def run_scripted(scenario_path, script_path, out_dir, seed=0, config_path=None,
                 dt_ms=None) -> int:
    """Execute a command script headless and write the trial artifacts."""
    try:
        scenario = _load_scenario(scenario_path)
        script = CommandScript.load(script_path)
        config = _load_config(config_path, dt_ms)
    except (ScenarioValidationError, ScriptError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    os.makedirs(out_dir, exist_ok=True)
    engine = SimulationEngine(scenario, config, seed=seed)
    bscan_index = 0
    for at, entry in script.actions:
        engine.run_until(at)
        if engine.workflow.terminal:
            break
        if entry["action"] == "request-bscan":
            bscan_index += 1
            snap = engine.snapshot()
            scan = render_bscan(
                scenario, snap.tissue, (snap.tip, snap.shaft),
                default_plane(scenario, config.bscan_width_mm, config.bscan_depth_mm),
                config.bscan_width_px, config.bscan_height_px,
                config.speckle_strength, seed ^ bscan_index, snap.t,
            )
            with open(os.path.join(out_dir, f"bscan_{bscan_index:03d}.png"), "wb") as fh:
                fh.write(scan.to_png_bytes())
            continue
        reply = engine.ingest(script.to_message(entry))
        if reply.get("type") == "error":
            print(f"t={engine.t:.3f} action rejected: {reply['code']}", file=sys.stderr)

    while not engine.workflow.terminal and engine.t < config.timeout_s:
        engine.tick()

    log = engine.log
    log.save(os.path.join(out_dir, "trial.rvcl"))
    with open(os.path.join(out_dir, "trial.csv"), "wb") as fh:
        fh.write(export_csv(log))
    summary = summarize(log)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2)
    snap = engine.snapshot()
    scan = render_bscan(
        scenario, snap.tissue, (snap.tip, snap.shaft),
        default_plane(scenario, config.bscan_width_mm, config.bscan_depth_mm),
        config.bscan_width_px, config.bscan_height_px,
        config.speckle_strength, seed ^ 0xFFFF, snap.t,
    )
    with open(os.path.join(out_dir, "final_bscan.png"), "wb") as fh:
        fh.write(scan.to_png_bytes())

    if engine.workflow.step is Step.DONE:
        print(f"trial done in {engine.t:.2f} s (sim)")
        return 0
    if engine.workflow.step is Step.FAILED:
        print(f"trial failed: {engine.outcome.failure_cause}")
        return 2
    print(f"trial timed out after {engine.t:.2f} s (sim) in step "
          f"{engine.workflow.step.value}")
    return 3


def replay_cmd(log_path, scenario_path=None, config_path=None) -> int:
    """Verify a recorded trial replays bit-exactly."""
    try:
        log = TrialLog.load(log_path)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    scenario_dict = None
    config_dict = None
    try:
        if scenario_path is not None:
            scenario_dict = Scenario.load(scenario_path).to_dict()
        if config_path is not None:
            with open(config_path, "r", encoding="utf-8") as fh:
                base = SimConfig().to_dict()
                base.update(json.load(fh))
                config_dict = base
    except (OSError, ValueError, ScenarioValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        recomputed = replay(log, scenario_dict, config_dict)
    except HashMismatchError as exc:
        print(f"hash mismatch: {exc}", file=sys.stderr)
        return 4
    div = first_divergence(log, recomputed)
    if div is None:
        print(f"replay ok: {len(log.samples)} samples bit-exact")
        return 0
    index, fname = div
    print(f"replay diverged at sample {index}, field {fname}", file=sys.stderr)
    if index < len(log.samples) and index < len(recomputed.samples):
        print(f"  recorded:   {log.samples[index]}", file=sys.stderr)
        print(f"  recomputed: {recomputed.samples[index]}", file=sys.stderr)
    return 1


def export_cmd(log_path, out_dir) -> int:
    """Write trial.csv, summary.json, and the report figures for a log."""
    try:
        log = TrialLog.load(log_path)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "trial.csv"), "wb") as fh:
        fh.write(export_csv(log))
    summary = summarize(log)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2)
    from .report import render_report

    paths = render_report(log, summary, out_dir)
    print("wrote trial.csv, summary.json, " + ", ".join(os.path.basename(p) for p in paths))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rvc", description="retinal vein cannulation simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scripted trial headless")
    p_run.add_argument("--scenario", help="scenario JSON (default: built-in)")
    p_run.add_argument("--script", required=True, help="command script JSON")
    p_run.add_argument("--out", default="out", help="artifact directory")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--dt-ms", type=float, default=None)
    p_run.add_argument("--config", help="config JSON overriding defaults")

    p_replay = sub.add_parser("replay", help="verify a log replays bit-exactly")
    p_replay.add_argument("log", help="trial .rvcl file")
    p_replay.add_argument("--scenario", help="scenario JSON to check against")
    p_replay.add_argument("--config", help="config JSON to check against")

    p_export = sub.add_parser("export", help="CSV, summary, and report figures")
    p_export.add_argument("--log", required=True, help="trial .rvcl file")
    p_export.add_argument("--out", default="export", help="output directory")

    p_serve = sub.add_parser("serve", help="run the session service")
    p_serve.add_argument("--bind", default="127.0.0.1")
    p_serve.add_argument("--port", type=int,
                         default=int(os.environ.get("RVC_PORT", "8765")))
    p_serve.add_argument("--out", default=None,
                         help="directory for flushed trial logs")

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_scripted(args.scenario, args.script, args.out,
                            seed=args.seed, config_path=args.config,
                            dt_ms=args.dt_ms)
    if args.command == "replay":
        return replay_cmd(args.log, args.scenario, args.config)
    if args.command == "export":
        return export_cmd(args.log, args.out)
    if args.command == "serve":
        from .session import serve

        return serve(args.bind, args.port, args.out)
    return 1


if __name__ == "__main__":
    sys.exit(main())
