"""Trial recording, binary log format, CSV export, replay, and summaries.

Native log layout: magic ``RVCL``, u16 format version, u32 header length,
JSON header (hashes, seed, dt, plus the full scenario/config so a log is
self-contained), then length-prefixed records. Record types: 1 samples
(packed doubles), 2 workflow events, 3 input records, 4 outcome.

All timestamps are simulation seconds with epoch 0.0; nothing wall-clock
dependent is stored, so identical inputs produce byte-identical logs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .workflow import EventKind, Step, WorkflowEvent, step_durations

MAGIC = b"RVCL"
FORMAT_VERSION = 1

_REC_SAMPLE = 1
_REC_EVENT = 2
_REC_INPUT = 3
_REC_OUTCOME = 4

_SAMPLE_STRUCT = struct.Struct("<15dB")
_STEP_LIST = list(Step)

CSV_HEADER = ["t", "x", "y", "z", "vx", "vy", "vz", "fx", "fy", "fz", "step", "event"]


class HashMismatchError(ValueError):
    """Provided scenario/config does not match the log header hashes."""


class LogFormatError(ValueError):
    """Byte stream is not a valid trial log."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def canonical_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


class Sample(NamedTuple):
    t: float
    joints: tuple          # 5 joint values
    tip: tuple             # tip position, mm
    tip_velocity: tuple    # mm/s
    force_mn: tuple        # handle force, mN
    step: Step


class InputRecord(NamedTuple):
    tick: int              # tick index at which the message took effect
    message: dict


@dataclass
class Outcome:
    success: bool | None = None
    failure_cause: str | None = None


@dataclass
class TrialLog:
    header: dict
    samples: list = field(default_factory=list)
    events: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    outcome: Outcome = field(default_factory=Outcome)

    def record_sample(self, sample: Sample):
        if self.samples and sample.t <= self.samples[-1].t:
            raise ValueError(
                f"sample timestamp {sample.t} not after {self.samples[-1].t}"
            )
        self.samples.append(sample)

    def record_event(self, event: WorkflowEvent):
        self.events.append(event)

    def record_input(self, record: InputRecord):
        self.inputs.append(record)

    # -- serialization ------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        header_json = canonical_json(self.header).encode("utf-8")
        out.write(MAGIC)
        out.write(struct.pack("<H", FORMAT_VERSION))
        out.write(struct.pack("<I", len(header_json)))
        out.write(header_json)

        def rec(rtype, payload):
            out.write(struct.pack("<BI", rtype, len(payload)))
            out.write(payload)

        for s in self.samples:
            rec(_REC_SAMPLE, _SAMPLE_STRUCT.pack(
                s.t, *s.joints, *s.tip, *s.tip_velocity, *s.force_mn,
                _STEP_LIST.index(s.step),
            ))
        for e in self.events:
            rec(_REC_EVENT, canonical_json({"kind": e.kind.value, "t": e.t}).encode())
        for r in self.inputs:
            rec(_REC_INPUT, canonical_json({"tick": r.tick, "message": r.message}).encode())
        if self.outcome.success is not None:
            rec(_REC_OUTCOME, canonical_json({
                "success": self.outcome.success,
                "failure_cause": self.outcome.failure_cause,
            }).encode())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrialLog":
        if len(data) < 10 or data[:4] != MAGIC:
            raise LogFormatError("missing RVCL magic")
        (version,) = struct.unpack_from("<H", data, 4)
        if version != FORMAT_VERSION:
            raise LogFormatError(f"unsupported format version {version}")
        (hlen,) = struct.unpack_from("<I", data, 6)
        pos = 10
        try:
            header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise LogFormatError(f"bad header: {exc}") from exc
        pos += hlen
        log = cls(header=header)
        while pos < len(data):
            if pos + 5 > len(data):
                raise LogFormatError("truncated record header")
            rtype, rlen = struct.unpack_from("<BI", data, pos)
            pos += 5
            payload = data[pos:pos + rlen]
            if len(payload) != rlen:
                raise LogFormatError("truncated record payload")
            pos += rlen
            if rtype == _REC_SAMPLE:
                vals = _SAMPLE_STRUCT.unpack(payload)
                log.samples.append(Sample(
                    t=vals[0], joints=vals[1:6], tip=vals[6:9],
                    tip_velocity=vals[9:12], force_mn=vals[12:15],
                    step=_STEP_LIST[vals[15]],
                ))
            elif rtype == _REC_EVENT:
                obj = json.loads(payload)
                log.events.append(WorkflowEvent(EventKind(obj["kind"]), obj["t"]))
            elif rtype == _REC_INPUT:
                obj = json.loads(payload)
                log.inputs.append(InputRecord(obj["tick"], obj["message"]))
            elif rtype == _REC_OUTCOME:
                obj = json.loads(payload)
                log.outcome = Outcome(obj["success"], obj["failure_cause"])
            else:
                raise LogFormatError(f"unknown record type {rtype}")
        return log

    @classmethod
    def load(cls, path) -> "TrialLog":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def export_csv(log: TrialLog) -> bytes:
    """Delimited interchange export of the sample stream.

    One row per sample; workflow events are inlined in the last column on the
    row whose timestamp matches (several joined with ``|``). Floats use their
    shortest exact representation, so numeric fields parse back losslessly.
    """
    events_at = {}
    for e in log.events:
        events_at.setdefault(e.t, []).append(e.kind.value)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for s in log.samples:
        writer.writerow([
            repr(s.t),
            repr(s.tip[0]), repr(s.tip[1]), repr(s.tip[2]),
            repr(s.tip_velocity[0]), repr(s.tip_velocity[1]), repr(s.tip_velocity[2]),
            repr(s.force_mn[0]), repr(s.force_mn[1]), repr(s.force_mn[2]),
            s.step.value,
            "|".join(events_at.get(s.t, [])),
        ])
    return buf.getvalue().encode("utf-8")


def import_csv(data: bytes) -> list:
    """Parse an exported CSV back into per-row dicts (numeric fields exact)."""
    text = data.decode("utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != CSV_HEADER:
        raise LogFormatError("unexpected CSV header")
    rows = []
    for row in reader:
        if len(row) != len(CSV_HEADER):
            raise LogFormatError("bad CSV column count")
        rows.append({
            "t": float(row[0]),
            "tip": (float(row[1]), float(row[2]), float(row[3])),
            "tip_velocity": (float(row[4]), float(row[5]), float(row[6])),
            "force_mn": (float(row[7]), float(row[8]), float(row[9])),
            "step": row[10],
            "events": row[11].split("|") if row[11] else [],
        })
    return rows


@dataclass
class TrialSummary:
    per_step_durations_s: dict
    insertion_distances_um: list
    max_rcm_deviation_um: float
    attempts: int
    success: bool | None
    failure_cause: str | None
    total_duration_s: float

    def to_dict(self):
        return {
            "per_step_durations_s": self.per_step_durations_s,
            "insertion_distances_um": self.insertion_distances_um,
            "max_rcm_deviation_um": self.max_rcm_deviation_um,
            "attempts": self.attempts,
            "success": self.success,
            "failure_cause": self.failure_cause,
            "total_duration_s": self.total_duration_s,
        }


def _pulse_windows(log: TrialLog):
    """(t_start, t_end) per puncture pulse, from P-down inputs and pulse-done
    events."""
    dt = log.header["dt_ms"] / 1000.0
    # anchor one sample before the first moved tick so the path length
    # includes the whole pulse
    p_downs = [(r.tick - 1) * dt for r in log.inputs
               if r.message.get("type") == "key"
               and r.message.get("key") == "P"
               and r.message.get("action") == "down"]
    windows = []
    for e in log.events:
        if e.kind is EventKind.PUNCTURE_PULSE_DONE:
            starts = [t for t in p_downs if t < e.t]
            if starts:
                start = starts[-1]
                p_downs = [t for t in p_downs if t > start]
                windows.append((start, e.t))
    return windows


def max_rcm_deviation_um(log: TrialLog) -> float:
    """Recompute the shaft-to-RCM-point distance over all samples (vectorized
    from the logged joints and the embedded scenario/config)."""
    from .engine import SimConfig
    from . import robot

    if not log.samples:
        return 0.0
    config = SimConfig.from_dict(log.header["config"])
    model = config.robot_model()
    rcm_point = np.asarray(log.header["scenario"]["sclerotomy_points_mm"][0], dtype=float)
    joints = np.array([s.joints for s in log.samples])
    rb = model.base_pose.rotation
    tb = model.base_pose.translation
    wrist = joints[:, :3] @ rb.T + tb
    s1 = np.sin(joints[:, 3])
    c1 = np.cos(joints[:, 3])
    s2 = np.sin(joints[:, 4])
    c2 = np.cos(joints[:, 4])
    shaft_b = np.stack([s1 * c2, -s2, c1 * c2], axis=1)
    shaft = shaft_b @ rb.T
    rel = rcm_point[None, :] - wrist
    dev = np.linalg.norm(np.cross(rel, shaft), axis=1)
    return float(dev.max() * 1000.0)


def summarize(log: TrialLog) -> TrialSummary:
    """Pure-function trial summary: step durations, per-attempt insertion
    path lengths, worst RCM deviation, outcome."""
    durations = step_durations(log)
    windows = _pulse_windows(log)
    insertions = []
    for t0, t1 in windows:
        pts = [np.asarray(s.tip) for s in log.samples if t0 <= s.t <= t1]
        dist = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            dist += float(np.linalg.norm(b - a))
        insertions.append(dist * 1000.0)
    attempts = sum(1 for e in log.events if e.kind is EventKind.PUNCTURE_PULSE_DONE)
    total = log.samples[-1].t if log.samples else 0.0
    return TrialSummary(
        per_step_durations_s=durations,
        insertion_distances_um=insertions,
        max_rcm_deviation_um=max_rcm_deviation_um(log),
        attempts=attempts,
        success=log.outcome.success,
        failure_cause=log.outcome.failure_cause,
        total_duration_s=total,
    )


def replay(log: TrialLog, scenario_dict=None, config_dict=None):
    """Re-run the recorded inputs through a fresh engine.

    Returns the recomputed TrialLog; bit-exact equality with the recorded
    samples is the determinism contract.

    Raises:
        HashMismatchError: supplied scenario/config does not hash to the
            values recorded in the header.
    """
    from .engine import SimConfig, SimulationEngine
    from .eye_sim import Scenario

    if scenario_dict is not None:
        if canonical_hash(scenario_dict) != log.header["scenario_hash"]:
            raise HashMismatchError("scenario hash does not match log header")
    else:
        scenario_dict = log.header["scenario"]
    if config_dict is not None:
        if canonical_hash(config_dict) != log.header["config_hash"]:
            raise HashMismatchError("config hash does not match log header")
    else:
        config_dict = log.header["config"]

    scenario = Scenario.from_dict(scenario_dict)
    config = SimConfig.from_dict(config_dict)
    engine = SimulationEngine(scenario, config, seed=log.header["seed"])
    by_tick = {}
    for rec in log.inputs:
        by_tick.setdefault(rec.tick, []).append(rec.message)
    last_tick = len(log.samples)
    for tick in range(1, last_tick + 1):
        for message in by_tick.get(tick, ()):
            engine.ingest(message)
        engine.tick()
    return engine.log


def first_divergence(recorded: TrialLog, recomputed: TrialLog):
    """Index and field of the first non-identical sample, or None."""
    for i, (a, b) in enumerate(zip(recorded.samples, recomputed.samples)):
        if a != b:
            for fname in Sample._fields:
                if getattr(a, fname) != getattr(b, fname):
                    return i, fname
            return i, "?"
    if len(recorded.samples) != len(recomputed.samples):
        n = min(len(recorded.samples), len(recomputed.samples))
        return n, "length"
    return None


def verify_replay(log: TrialLog, scenario_dict=None, config_dict=None):
    """(ok, divergence) pair for the replay determinism check."""
    recomputed = replay(log, scenario_dict, config_dict)
    div = first_divergence(log, recomputed)
    return div is None, div
