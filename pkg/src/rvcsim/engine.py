"""Fixed-timestep simulation engine shared by the CLI runner and the service.

One engine owns one trial: joint state, tissue, workflow, and the trial log.
Inputs arrive through ``ingest`` (the same JSON message shapes the wire
protocol uses) and take effect before the next tick; ``tick`` advances the
world by one dt. All randomness is drawn from seeded generators in tick
order, so a recorded input schedule replays bit-exactly.
"""

from __future__ import annotations

import dataclasses
import math
import random
from dataclasses import dataclass, field

import numpy as np

from . import robot
from .eye_sim import (
    ContactPhase,
    FailureInjection,
    ForceConfig,
    InfusionConfig,
    LumenFluid,
    Scenario,
    TissueEventKind,
    TissueState,
    TremorModel,
    infuse,
    tip_tissue_query,
    step_tissue,
)
from .geometry import RigidTransform
from .robot import (
    ControllerConfig,
    JointState,
    Key,
    KeyAction,
    RcmRegistration,
    RobotModel,
    _chain,
    _correction,
    _geometric_step,
    _key_velocity,
)
from .telemetry import InputRecord, Outcome, Sample, TrialLog, canonical_hash
from .workflow import EventKind, Step, WorkflowEvent, WorkflowState, advance, gate_keys

FAILURE_MAX_ATTEMPTS = "max_attempts_exceeded"


class ProtocolError(ValueError):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


@dataclass
class SimConfig:
    """Everything about a run that is not scene geometry."""

    dt_ms: float = 5.0
    tool_length_mm: float = 40.0
    base_height_mm: float = 30.0
    start_standoff_mm: float = 2.0

    navigate_speed_mm_s: float = 0.2
    puncture_speed_mm_s: float = 5.4
    pulse_duration_ms: float = 62.0

    rcm_gain_per_s: float = 5.0
    rcm_max_rate_rad_s: float = 0.2
    rcm_stop_threshold_deg: float = 0.1

    actuation_noise_enabled: bool = False
    actuation_noise_mm: float = 0.005

    force_noise_sigma_mn: float = 0.02
    force_noise_floor_mn: float = 0.15
    force_wall_spring_mn_per_mm: float = 10.0
    force_spike_amplitude_mn: float = 1.0
    force_spike_decay_s: float = 0.08

    infusion_pressure_mmhg: float = 12.0
    infusion_duration_s: float = 60.0
    flush_rate_mm_per_mmhg_s: float = 0.005
    reflux_length_factor: float = 2.0
    air_bubble_fail_delay_s: float = 0.5

    intraluminal_margin_um: float = 5.0
    max_attempts: int = 10
    assist_verification: bool = False
    verification_flush_order: str = "after"  # run test flush before/after the call

    bscan_width_mm: float = 1.5
    bscan_depth_mm: float = 0.75
    bscan_width_px: int = 512
    bscan_height_px: int = 256
    speckle_strength: float = 0.15

    timeout_s: float = 900.0
    # service only: simulated seconds per wall-clock second (tests crank it up)
    time_scale: float = 1.0

    def __post_init__(self):
        if self.dt_ms <= 0.0:
            raise ValueError("dt_ms must be positive")
        if self.verification_flush_order not in ("before", "after"):
            raise ValueError("verification_flush_order must be 'before' or 'after'")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValueError("unknown config fields: " + ", ".join(unknown))
        return cls(**data)

    def robot_model(self) -> RobotModel:
        return RobotModel(
            tool_length_mm=self.tool_length_mm,
            base_pose=RigidTransform(
                rotation=np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]),
                translation=np.array([0.0, 0.0, self.base_height_mm]),
            ),
        )

    def controller(self) -> ControllerConfig:
        return ControllerConfig(
            navigate_speed=self.navigate_speed_mm_s,
            puncture_speed=self.puncture_speed_mm_s,
            correction_gain=self.rcm_gain_per_s,
        )

    def force_config(self) -> ForceConfig:
        return ForceConfig(
            noise_sigma_mn=self.force_noise_sigma_mn,
            noise_floor_mn=self.force_noise_floor_mn,
            wall_spring_mn_per_mm=self.force_wall_spring_mn_per_mm,
            spike_amplitude_mn=self.force_spike_amplitude_mn,
            spike_decay_s=self.force_spike_decay_s,
        )

    def infusion_config(self) -> InfusionConfig:
        return InfusionConfig(
            flush_rate_mm_per_mmhg_s=self.flush_rate_mm_per_mmhg_s,
            reflux_length_factor=self.reflux_length_factor,
            intraluminal_margin_um=self.intraluminal_margin_um,
        )


@dataclass
class SimSnapshot:
    t: float
    tick: int
    joints: tuple
    tip: tuple
    shaft: tuple
    tip_velocity: tuple
    force_mn: tuple
    rcm_deviation_um: float
    step: Step
    attempt: int
    terminal: bool
    tissue: TissueState
    outcome_success: bool | None
    outcome_cause: str | None


class SimulationEngine:
    def __init__(self, scenario: Scenario, config: SimConfig | None = None,
                 seed: int = 0, record: bool = True):
        self.scenario = scenario
        self.config = config or SimConfig()
        self.seed = int(seed)
        self.record = record

        self.model = self.config.robot_model()
        self.control = self.config.controller()
        self.dt = self.config.dt_ms / 1000.0
        self.rng = random.Random(self.seed)
        self.force_cfg = self.config.force_config()
        self.tremor = (
            TremorModel(scenario.tremor_amplitude_um, seed=self.seed)
            if scenario.tremor_enabled else None
        )

        scl = np.asarray(scenario.sclerotomy_points_mm[0], dtype=float)
        self.rcm = RcmRegistration(
            point=scl,
            rot_stop_threshold_deg=self.config.rcm_stop_threshold_deg,
            max_correction_rate=self.config.rcm_max_rate_rad_s,
        )
        target = scenario.target_point()
        approach = target - scl
        approach /= np.linalg.norm(approach)
        tip0 = target - self.config.start_standoff_mm * approach
        q0 = robot.joint_state_for_tip(tip0, approach, self.model)
        self.q = q0.as_tuple()

        # scalar caches for the hot loop
        self._sc = self.model._scalars
        self._rcm_pt = (float(scl[0]), float(scl[1]), float(scl[2]))
        self._thresh_rad = math.radians(self.config.rcm_stop_threshold_deg)
        self._geom = scenario.vessel.geometry()
        self._globe_r = scenario.globe_radius_mm

        self.t = 0.0
        self.tick_index = 0
        self.workflow = WorkflowState(max_attempts=self.config.max_attempts)
        self.tissue = TissueState.initial(scenario)
        self.outcome = Outcome()

        self.held = set()
        self.pulse_end = None
        self.infusion_end = None
        self._pending_infusion = None
        self.puncture_times = []
        self.tissue_events = []
        self._seg_hint = None
        self._last_normal = (0.0, 0.0, 1.0)
        self.max_rcm_deviation_um = 0.0
        self._keys_dirty = True
        self._resolve_keys = frozenset()
        chain = _chain(self.q, self._sc)
        self._tip = chain[1]
        self._tip_eff = self._tip
        self._last_velocity = (0.0, 0.0, 0.0)
        self._last_force = (0.0, 0.0, 0.0)
        self.pending_frames = []

        header = {
            "format": 1,
            "scenario_hash": canonical_hash(scenario.to_dict()),
            "config_hash": canonical_hash(self.config.to_dict()),
            "seed": self.seed,
            "dt_ms": self.config.dt_ms,
            "start_time": 0.0,
            "scenario": scenario.to_dict(),
            "config": self.config.to_dict(),
        }
        self.log = TrialLog(header=header)
        # the RCM point is recorded as the trial begins
        self._emit(EventKind.RCM_REGISTERED)

    # -- message ingestion ---------------------------------------------------

    def ingest(self, message: dict) -> dict:
        """Apply one protocol message; returns an ack or error reply dict.

        Accepted inputs are recorded with the tick at which they take effect,
        which is what replay re-feeds.
        """
        if not isinstance(message, dict) or "type" not in message:
            return self._error("bad_message", "message must be an object with a type")
        mtype = message["type"]
        try:
            if mtype == "key":
                return self._ingest_key(message)
            if mtype == "confirm_contact":
                return self._ingest_confirm_contact(message)
            if mtype == "declare_verification":
                return self._ingest_declare_verification(message)
            if mtype == "begin_infusion":
                return self._ingest_begin_infusion(message)
            if mtype == "request_bscan":
                # handled by the session layer (render-only, no sim effect)
                return {"type": "ack"}
        except ProtocolError as exc:
            return self._error(exc.code, str(exc))
        return self._error("unknown_type", f"unknown message type {mtype!r}")

    def _error(self, code, message):
        return {"type": "error", "code": code, "message": message}

    def _record_input(self, message):
        self.log.record_input(InputRecord(self.tick_index + 1, message))

    def _ingest_key(self, message) -> dict:
        try:
            key = Key(message["key"])
            action = KeyAction(message["action"])
        except (KeyError, ValueError) as exc:
            raise ProtocolError("bad_key", f"malformed key message: {exc}")
        if action is KeyAction.DOWN:
            if key not in gate_keys(self.workflow):
                return self._error("key_gated",
                                   f"key {key.value} not permitted in step "
                                   f"{self.workflow.step.value}")
            if key in self.held:
                return {"type": "ack"}
            self._record_input({"type": "key", "key": key.value, "action": "down"})
            self.held.add(key)
            if key is Key.P and self.pulse_end is None:
                self.pulse_end = self.t + self.config.pulse_duration_ms / 1000.0
        else:
            if key not in self.held:
                return {"type": "ack"}
            self._record_input({"type": "key", "key": key.value, "action": "up"})
            self.held.discard(key)
        self._keys_dirty = True
        return {"type": "ack"}

    def _ingest_confirm_contact(self, message) -> dict:
        if self.workflow.step is not Step.NAVIGATION:
            raise ProtocolError("bad_step", "contact confirmation only during navigation")
        if self.config.assist_verification:
            report = tip_tissue_query(self._tip_eff, self.scenario, self.tissue,
                                      self._seg_hint)
            if report.phase is ContactPhase.FREE and report.gap_um > 1.0:
                raise ProtocolError("not_in_contact",
                                    "assist check: tip is not on the vessel wall")
        self._record_input({"type": "confirm_contact"})
        self._emit(EventKind.CONTACT_VERIFIED)
        return {"type": "ack"}

    def _ingest_declare_verification(self, message) -> dict:
        if self.workflow.step is not Step.VERIFY_RETRACT:
            raise ProtocolError("bad_step", "verification declared outside VerifyRetract")
        passed = bool(message.get("passed"))
        self._record_input({"type": "declare_verification", "passed": passed})
        if self.config.assist_verification:
            report = tip_tissue_query(self._tip_eff, self.scenario, self.tissue,
                                      self._seg_hint)
            passed = (report.phase is ContactPhase.INTRALUMINAL
                      and report.gap_um >= self.config.intraluminal_margin_um)
        flush_ok = self._test_flush_ok()
        if self.config.verification_flush_order == "before":
            if flush_ok:
                self._emit(EventKind.FLUSH_CONFIRMED)
            if flush_ok and passed:
                self._emit(EventKind.VERIFICATION_PASSED)
            else:
                self._fail_verification()
        else:
            if passed and flush_ok:
                self._emit(EventKind.FLUSH_CONFIRMED)
                self._emit(EventKind.VERIFICATION_PASSED)
            else:
                self._fail_verification()
        return {"type": "ack"}

    def _test_flush_ok(self) -> bool:
        from .eye_sim import is_intraluminal
        return is_intraluminal(self._tip_eff, self.scenario, self.tissue,
                               self.config.intraluminal_margin_um)

    def _fail_verification(self):
        exhausted = self.workflow.attempt >= self.workflow.max_attempts
        self._emit(EventKind.VERIFICATION_FAILED)
        if exhausted:
            cause = (FailureInjection.NO_INTRALUMINAL_BLOOD.value
                     if self.scenario.failure_injection is FailureInjection.NO_INTRALUMINAL_BLOOD
                     else FAILURE_MAX_ATTEMPTS)
            self.outcome = Outcome(False, cause)
            self.log.outcome = self.outcome

    def _ingest_begin_infusion(self, message) -> dict:
        if self.workflow.step is not Step.INFUSION:
            raise ProtocolError("bad_step", "infusion can only start in the infusion step")
        if self.infusion_end is not None:
            raise ProtocolError("already_infusing", "infusion already running")
        self._record_input({"type": "begin_infusion"})
        probe = self.tissue.copy()
        result = infuse(
            self.config.infusion_pressure_mmhg,
            self.config.infusion_duration_s,
            self.scenario, probe, self._tip_eff,
            self.config.infusion_config(),
        )
        self._pending_infusion = result
        if result.success:
            self.infusion_end = self.t + self.config.infusion_duration_s
        else:
            self.infusion_end = self.t + self.config.air_bubble_fail_delay_s
        return {"type": "ack"}

    # -- workflow events ------------------------------------------------------

    def _emit(self, kind: EventKind):
        event = WorkflowEvent(kind, self.t)
        self.workflow = advance(self.workflow, event)
        self.log.record_event(event)
        self.pending_frames.append(event)
        self._keys_dirty = True

    def drain_events(self):
        out = self.pending_frames
        self.pending_frames = []
        return out

    # -- stepping -------------------------------------------------------------

    def _effective_keys(self):
        if self._keys_dirty:
            permitted = gate_keys(self.workflow)
            keys = self.held & permitted
            keys.discard(Key.P)  # puncture moves only through the pulse
            self._resolve_keys = frozenset(keys)
            self._keys_dirty = False
        return self._resolve_keys

    def tick(self):
        """Advance one fixed step. No-op once the trial is terminal."""
        if self.workflow.terminal:
            return
        dt = self.dt
        t_next = (self.tick_index + 1) * dt
        cfg = self.config
        keys = self._effective_keys()
        pulse_done = False

        chain = _chain(self.q, self._sc)
        shaft = chain[2]
        omega = self._guarded_correction(chain, cfg)

        if self.pulse_end is not None:
            v = cfg.puncture_speed_mm_s
            v_cmd = (v * shaft[0], v * shaft[1], v * shaft[2])
            remaining = self.pulse_end - self.t
            if remaining < dt - 1e-12:
                # final partial tick: command the pulse velocity only for the
                # remaining pulse time, then coast
                self._integrate(chain, v_cmd, omega, remaining)
                chain = _chain(self.q, self._sc)
                shaft = chain[2]
                omega = self._guarded_correction(chain, cfg)
                self._integrate(chain, (0.0, 0.0, 0.0), omega, dt - remaining)
                pulse_done = True
                self.pulse_end = None
            else:
                self._integrate(chain, v_cmd, omega, dt)
                if abs(remaining - dt) < 1e-12:
                    pulse_done = True
                    self.pulse_end = None
        else:
            v_cmd, _mode = _key_velocity(keys, shaft, self.control)
            if self.workflow.step is Step.INFUSION and v_cmd != (0.0, 0.0, 0.0):
                raise AssertionError("infusion gate violated: nonzero command")
            self._integrate(chain, v_cmd, omega, dt)

        if cfg.actuation_noise_enabled:
            s = cfg.actuation_noise_mm
            g = self.rng.gauss
            qx, qy, qz, t1, t2 = self.q
            self.q = (qx + g(0.0, s), qy + g(0.0, s), qz + g(0.0, s), t1, t2)

        chain = _chain(self.q, self._sc)
        wrist, tip, shaft = chain[0], chain[1], chain[2]
        if self.tremor is not None:
            ox, oy, oz = self.tremor.offset_um(t_next)
            tip_eff = (tip[0] + ox / 1000.0, tip[1] + oy / 1000.0, tip[2] + oz / 1000.0)
        else:
            tip_eff = tip

        tip_prev = self._tip_eff
        if not self._geom.far_from(tip_eff, 1.0):
            events, self._seg_hint = step_tissue(
                self.tissue, tip_prev, tip_eff, dt, self.scenario,
                self._seg_hint,
            )
            for ev in events:
                self.tissue_events.append((ev, t_next))
                if ev is TissueEventKind.PUNCTURE_OCCURRED:
                    self.puncture_times.append(t_next)
        elif self.tissue.wall_deflection_um > 0.0:
            # retreated far from the vessel; the wall has fully relaxed
            self.tissue.wall_deflection_um = 0.0
            self.tissue.slipped = False

        # handle force: noise every tick (fixed rng order), plus spring/spikes
        g = self.rng.gauss
        s = self.force_cfg.noise_sigma_mn
        fx, fy, fz = g(0.0, s), g(0.0, s), g(0.0, s)
        magnitude = 0.0
        if self.tissue.wall_deflection_um > 0.0:
            magnitude += (self.force_cfg.wall_spring_mn_per_mm
                          * self.tissue.wall_deflection_um / 1000.0)
        if self.puncture_times:
            decay = self.force_cfg.spike_decay_s
            amp = self.force_cfg.spike_amplitude_mn
            for te in self.puncture_times:
                dt_e = t_next - te
                if 0.0 <= dt_e < 1.0:
                    magnitude += amp * math.exp(-dt_e / decay)
        if magnitude != 0.0:
            if self._seg_hint is not None:
                seg = self._geom.segments[self._seg_hint]
                # superficial normal at the hinted segment midpoint
                p0 = seg[0]
                an = math.sqrt(p0[0] ** 2 + p0[1] ** 2 + p0[2] ** 2)
                self._last_normal = (-p0[0] / an, -p0[1] / an, -p0[2] / an)
            nx, ny, nz = self._last_normal
            fx += magnitude * nx
            fy += magnitude * ny
            fz += magnitude * nz
        force = (fx, fy, fz)

        inv_dt = 1.0 / dt
        velocity = (
            (tip_eff[0] - tip_prev[0]) * inv_dt,
            (tip_eff[1] - tip_prev[1]) * inv_dt,
            (tip_eff[2] - tip_prev[2]) * inv_dt,
        )

        # RCM deviation bookkeeping
        rx = self._rcm_pt[0] - wrist[0]
        ry = self._rcm_pt[1] - wrist[1]
        rz = self._rcm_pt[2] - wrist[2]
        cx = ry * shaft[2] - rz * shaft[1]
        cy = rz * shaft[0] - rx * shaft[2]
        cz = rx * shaft[1] - ry * shaft[0]
        deviation_um = math.sqrt(cx * cx + cy * cy + cz * cz) * 1000.0
        if deviation_um > self.max_rcm_deviation_um:
            self.max_rcm_deviation_um = deviation_um

        self._tip = tip
        self._tip_eff = tip_eff
        self._last_velocity = velocity
        self._last_force = force
        self.t = t_next
        self.tick_index += 1

        if self.record:
            self.log.record_sample(Sample(
                t=t_next, joints=self.q, tip=tip_eff, tip_velocity=velocity,
                force_mn=force, step=self.workflow.step,
            ))

        if pulse_done:
            self._emit(EventKind.PUNCTURE_PULSE_DONE)

        if self.infusion_end is not None and t_next >= self.infusion_end - 1e-12:
            result = self._pending_infusion
            self.infusion_end = None
            self._pending_infusion = None
            if result.success:
                self.tissue.lumen_fluid = LumenFluid.FLUSHED
                self.tissue.flushed_length_mm = result.flushed_length_mm
                self._emit(EventKind.INFUSION_COMPLETE)
            else:
                cause = result.failure_cause
                cause = cause.value if isinstance(cause, FailureInjection) else cause
                self.outcome = Outcome(False, cause)
                self.log.outcome = self.outcome
                self._emit(EventKind.INFUSION_FAILED)

        if self.workflow.step is Step.RETRACTION:
            # exited once the tip reaches the sclerotomy along the shaft
            along = ((tip_eff[0] - self._rcm_pt[0]) * shaft[0]
                     + (tip_eff[1] - self._rcm_pt[1]) * shaft[1]
                     + (tip_eff[2] - self._rcm_pt[2]) * shaft[2])
            if along <= 0.25:
                self.outcome = Outcome(True, None)
                self.log.outcome = self.outcome
                self._emit(EventKind.NEEDLE_EXITED)

    def _guarded_correction(self, chain, cfg):
        """RCM correction with the constraint released right at the incision,
        where the line direction is ill-conditioned."""
        tip = chain[1]
        dx = tip[0] - self._rcm_pt[0]
        dy = tip[1] - self._rcm_pt[1]
        dz = tip[2] - self._rcm_pt[2]
        if dx * dx + dy * dy + dz * dz < 0.25:  # within 0.5 mm
            return (0.0, 0.0, 0.0)
        omega, _err = _correction(chain[2], tip, self._rcm_pt,
                                  self._thresh_rad, cfg.rcm_gain_per_s,
                                  cfg.rcm_max_rate_rad_s)
        return omega

    def _integrate(self, chain, v_cmd, omega, dt_eff):
        q = _geometric_step(self.q, self._sc, v_cmd, omega, dt_eff)
        if q is not self.q:
            lo = self.model.limits_lower
            hi = self.model.limits_upper
            self.q = tuple(
                lo[i] if q[i] < lo[i] else (hi[i] if q[i] > hi[i] else q[i])
                for i in range(5)
            )

    def run_until(self, t_target: float):
        while self.t < t_target - 1e-12 and not self.workflow.terminal:
            self.tick()

    def run_ticks(self, n: int):
        for _ in range(n):
            if self.workflow.terminal:
                break
            self.tick()

    # -- observation ----------------------------------------------------------

    @property
    def joint_state(self) -> JointState:
        return JointState.from_tuple(self.q)

    @property
    def tip(self):
        return self._tip_eff

    def snapshot(self) -> SimSnapshot:
        chain = _chain(self.q, self._sc)
        return SimSnapshot(
            t=self.t,
            tick=self.tick_index,
            joints=self.q,
            tip=self._tip_eff,
            shaft=chain[2],
            tip_velocity=self._last_velocity,
            force_mn=self._last_force,
            rcm_deviation_um=self._current_deviation_um(chain),
            step=self.workflow.step,
            attempt=self.workflow.attempt,
            terminal=self.workflow.terminal,
            tissue=self.tissue.copy(),
            outcome_success=self.outcome.success,
            outcome_cause=self.outcome.failure_cause,
        )

    def _current_deviation_um(self, chain):
        wrist, _, shaft = chain[0], chain[1], chain[2]
        rx = self._rcm_pt[0] - wrist[0]
        ry = self._rcm_pt[1] - wrist[1]
        rz = self._rcm_pt[2] - wrist[2]
        cx = ry * shaft[2] - rz * shaft[1]
        cy = rz * shaft[0] - rx * shaft[2]
        cz = rx * shaft[1] - ry * shaft[0]
        return math.sqrt(cx * cx + cy * cy + cz * cz) * 1000.0
