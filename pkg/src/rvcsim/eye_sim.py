"""Parametric eye scene and needle-tissue interaction.

The globe is a sphere centered at the origin; the retina is its interior
surface and the vessel runs along that surface as a thin tube around a
polyline centerline. The needle approaches from inside the globe, so the
superficial wall is the side of the tube facing the globe center.

Units: mm internally, micrometers at reporting boundaries, milli-newton for
forces. The saline bleb of the bench preparation is modeled as the plain
absence of vitreous drag, so free motion sees no resistance at all.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

GLOBE_CENTER = (0.0, 0.0, 0.0)
BRANCH_LUMEN_RADIUS_UM = 75.66    # half the 151.32 um mean branch caliber
CENTRAL_LUMEN_RADIUS_UM = 125.5   # half the 251.0 um central caliber
TREMOR_AMPLITUDE_UM = 180.0


class ScenarioValidationError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid scenario: " + "; ".join(self.problems))


class PreconditionError(RuntimeError):
    """Operation invoked while its stated precondition does not hold."""


class FailureInjection(str, Enum):
    NONE = "none"
    AIR_BUBBLE = "air_bubble"
    NO_INTRALUMINAL_BLOOD = "no_intraluminal_blood"


class LumenFluid(str, Enum):
    BLOOD = "blood"
    FLUSHED = "flushed"
    EMPTY = "empty"


class ContactPhase(str, Enum):
    FREE = "free"
    ON_WALL = "on_wall"
    INTRALUMINAL = "intraluminal"
    THROUGH_WALL = "through_wall"


class TissueEventKind(str, Enum):
    PUNCTURE_OCCURRED = "puncture_occurred"
    WALL_SLIP = "wall_slip"


@dataclass
class Vessel:
    """Tube of constant lumen radius around a centerline on the retina."""

    centerline_mm: list
    lumen_radius_um: float = BRANCH_LUMEN_RADIUS_UM
    wall_thickness_um: float = 15.0
    max_wall_deflection_um: float | None = None

    def __post_init__(self):
        if self.max_wall_deflection_um is None:
            self.max_wall_deflection_um = 0.5 * self.lumen_radius_um
        self._geom = None

    @property
    def outer_radius_um(self):
        return self.lumen_radius_um + self.wall_thickness_um

    def geometry(self):
        if self._geom is None:
            self._geom = _VesselGeometry(self.centerline_mm)
        return self._geom

    def length_mm(self):
        pts = np.asarray(self.centerline_mm)
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))

    def to_dict(self):
        return {
            "centerline_mm": [list(map(float, p)) for p in self.centerline_mm],
            "lumen_radius_um": self.lumen_radius_um,
            "wall_thickness_um": self.wall_thickness_um,
            "max_wall_deflection_um": self.max_wall_deflection_um,
        }


class _VesselGeometry:
    """Precomputed segment table with a locality-hinted nearest-point query."""

    def __init__(self, centerline):
        pts = [tuple(float(v) for v in p) for p in centerline]
        if len(pts) < 2:
            raise ValueError("centerline needs at least 2 points")
        self.points = pts
        self.segments = []
        for p0, p1 in zip(pts[:-1], pts[1:]):
            dx = p1[0] - p0[0]
            dy = p1[1] - p0[1]
            dz = p1[2] - p0[2]
            length = math.sqrt(dx * dx + dy * dy + dz * dz)
            if length < 1e-12:
                continue
            self.segments.append((p0, (dx / length, dy / length, dz / length), length))
        if not self.segments:
            raise ValueError("degenerate centerline")
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        zs = [p[2] for p in pts]
        self.bbox = (min(xs), max(xs), min(ys), max(ys), min(zs), max(zs))
        self.points_np = np.asarray(pts)
        # end-to-end chord and the polyline's max deviation from it; used as
        # a conservative prefilter for distance queries over pixel grids
        chord = self.points_np[-1] - self.points_np[0]
        clen = np.linalg.norm(chord)
        if clen > 1e-12:
            u = chord / clen
            rel = self.points_np - self.points_np[0]
            t = np.clip(rel @ u, 0.0, clen)
            self.chord_deviation = float(
                np.linalg.norm(rel - t[:, None] * u[None, :], axis=1).max()
            )
        else:
            self.chord_deviation = float(
                np.linalg.norm(self.points_np - self.points_np[0], axis=1).max()
            )

    def far_from(self, tip, margin_mm):
        """Cheap reject: tip further than margin from the bounding box."""
        x, y, z = tip
        x0, x1, y0, y1, z0, z1 = self.bbox
        dx = x0 - x if x < x0 else (x - x1 if x > x1 else 0.0)
        dy = y0 - y if y < y0 else (y - y1 if y > y1 else 0.0)
        dz = z0 - z if z < z0 else (z - z1 if z > z1 else 0.0)
        return dx * dx + dy * dy + dz * dz > margin_mm * margin_mm

    def locate(self, tip, hint=None):
        """Nearest centerline point. Returns (seg_idx, axis_pt, tangent, dist).

        With a hint only the neighboring segments are scanned; the tip moves
        a fraction of a segment per simulation step, so the hint tracks.
        """
        x, y, z = tip
        n = len(self.segments)
        if hint is None:
            indices = range(n)
        else:
            lo = hint - 2 if hint >= 2 else 0
            hi = hint + 3 if hint + 3 <= n else n
            indices = range(lo, hi)
        best = None
        best_d2 = float("inf")
        for i in indices:
            p0, d, length = self.segments[i]
            wx = x - p0[0]
            wy = y - p0[1]
            wz = z - p0[2]
            t = wx * d[0] + wy * d[1] + wz * d[2]
            if t < 0.0:
                t = 0.0
            elif t > length:
                t = length
            ax = p0[0] + t * d[0]
            ay = p0[1] + t * d[1]
            az = p0[2] + t * d[2]
            ex = x - ax
            ey = y - ay
            ez = z - az
            d2 = ex * ex + ey * ey + ez * ez
            if d2 < best_d2:
                best_d2 = d2
                best = (i, (ax, ay, az), d)
        i, axis_pt, tangent = best
        # If a hinted search rails against its window edge, rescan fully.
        if hint is not None and (i == hint - 2 or i == hint + 2) and n > 5:
            return self.locate(tip, None)
        return i, axis_pt, tangent, math.sqrt(best_d2)


@dataclass
class Scenario:
    """Full parametric description of one trial."""

    globe_radius_mm: float = 12.0
    vessel: Vessel = None
    sclerotomy_points_mm: list = field(default_factory=lambda: [[0.0, 0.0, 12.0]])
    puncture_speed_threshold_mm_s: float = 2.0
    blood_present: bool = True
    failure_injection: FailureInjection = FailureInjection.NONE
    tremor_enabled: bool = False
    tremor_amplitude_um: float = TREMOR_AMPLITUDE_UM

    _FIELDS = (
        "globe_radius_mm", "vessel", "sclerotomy_points_mm",
        "puncture_speed_threshold_mm_s", "blood_present", "failure_injection",
        "tremor_enabled", "tremor_amplitude_um",
    )
    _VESSEL_FIELDS = (
        "centerline_mm", "lumen_radius_um", "wall_thickness_um",
        "max_wall_deflection_um",
    )

    def __post_init__(self):
        if self.vessel is None:
            self.vessel = default_vessel(self.globe_radius_mm)
        self.failure_injection = FailureInjection(self.failure_injection)
        self.validate()

    def validate(self):
        problems = []
        if not self.globe_radius_mm > 0.0:
            problems.append("globe_radius_mm must be positive")
        v = self.vessel
        if not 0.0 < v.lumen_radius_um / 1000.0 < self.globe_radius_mm:
            problems.append("vessel.lumen_radius_um must be in (0, globe radius)")
        if v.wall_thickness_um < 0.0:
            problems.append("vessel.wall_thickness_um must be non-negative")
        if not v.max_wall_deflection_um > 0.0:
            problems.append("vessel.max_wall_deflection_um must be positive")
        if len(v.centerline_mm) < 2:
            problems.append("vessel.centerline_mm needs at least 2 points")
        else:
            for i, p in enumerate(v.centerline_mm):
                r = math.sqrt(sum(float(c) * float(c) for c in p))
                if abs(r - self.globe_radius_mm) > 1e-3:
                    problems.append(
                        f"vessel.centerline_mm[{i}] is {abs(r - self.globe_radius_mm) * 1000:.2f} um off the retina surface"
                    )
                    break
        if not self.sclerotomy_points_mm:
            problems.append("sclerotomy_points_mm needs at least one point")
        if not 0.2 < self.puncture_speed_threshold_mm_s < 5.4:
            problems.append(
                "puncture_speed_threshold_mm_s must lie strictly between 0.2 and 5.4"
            )
        if not self.tremor_amplitude_um > 0.0:
            problems.append("tremor_amplitude_um must be positive")
        if problems:
            raise ScenarioValidationError(problems)

    @property
    def effective_puncture_threshold(self):
        """Threshold in mm/s; collapsed walls (no blood) resist 50% harder,
        and the no-intraluminal-blood injection makes puncture impossible."""
        if self.failure_injection is FailureInjection.NO_INTRALUMINAL_BLOOD:
            return float("inf")
        t = self.puncture_speed_threshold_mm_s
        return t if self.blood_present else 1.5 * t

    def target_point(self):
        pts = self.vessel.centerline_mm
        return np.asarray(pts[len(pts) // 2], dtype=float)

    def to_dict(self):
        return {
            "globe_radius_mm": self.globe_radius_mm,
            "vessel": self.vessel.to_dict(),
            "sclerotomy_points_mm": [list(map(float, p)) for p in self.sclerotomy_points_mm],
            "puncture_speed_threshold_mm_s": self.puncture_speed_threshold_mm_s,
            "blood_present": self.blood_present,
            "failure_injection": self.failure_injection.value,
            "tremor_enabled": self.tremor_enabled,
            "tremor_amplitude_um": self.tremor_amplitude_um,
        }

    @classmethod
    def from_dict(cls, data):
        problems = []
        if not isinstance(data, dict):
            raise ScenarioValidationError(["scenario must be a JSON object"])
        unknown = sorted(set(data) - set(cls._FIELDS))
        if unknown:
            problems.append("unknown fields: " + ", ".join(unknown))
        vessel_data = data.get("vessel")
        vessel = None
        if vessel_data is not None:
            if not isinstance(vessel_data, dict):
                problems.append("vessel must be an object")
            else:
                vunknown = sorted(set(vessel_data) - set(cls._VESSEL_FIELDS))
                if vunknown:
                    problems.append("unknown vessel fields: " + ", ".join(vunknown))
                elif "centerline_mm" not in vessel_data:
                    problems.append("vessel.centerline_mm is required")
                else:
                    vessel = Vessel(**vessel_data)
        if problems:
            raise ScenarioValidationError(problems)
        kwargs = {k: v for k, v in data.items() if k != "vessel"}
        if vessel is not None:
            kwargs["vessel"] = vessel
        try:
            return cls(**kwargs)
        except ScenarioValidationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ScenarioValidationError([str(exc)]) from exc

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioValidationError([f"not valid JSON: {exc}"]) from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    @classmethod
    def default(cls, **overrides):
        return cls(**overrides)


def default_vessel(globe_radius_mm=12.0, half_extent_mm=1.5, n_points=31,
                   lumen_radius_um=BRANCH_LUMEN_RADIUS_UM):
    """Straight-ish vessel arc through the bottom pole, running along x."""
    xs = np.linspace(-half_extent_mm, half_extent_mm, n_points)
    pts = [[float(x), 0.0, -math.sqrt(globe_radius_mm ** 2 - x * x)] for x in xs]
    return Vessel(centerline_mm=pts, lumen_radius_um=lumen_radius_um)


@dataclass
class TissueState:
    wall_deflection_um: float = 0.0
    punctured: bool = False
    puncture_location_mm: tuple | None = None
    lumen_fluid: LumenFluid = LumenFluid.BLOOD
    bleb_present: bool = True
    slipped: bool = False
    flushed_length_mm: float = 0.0

    @classmethod
    def initial(cls, scenario: Scenario):
        fluid = LumenFluid.BLOOD if scenario.blood_present else LumenFluid.EMPTY
        return cls(lumen_fluid=fluid)

    def copy(self):
        return TissueState(
            self.wall_deflection_um, self.punctured, self.puncture_location_mm,
            self.lumen_fluid, self.bleb_present, self.slipped,
            self.flushed_length_mm,
        )

    def to_dict(self):
        return {
            "wall_deflection_um": self.wall_deflection_um,
            "punctured": self.punctured,
            "puncture_location_mm": list(self.puncture_location_mm) if self.puncture_location_mm else None,
            "lumen_fluid": self.lumen_fluid.value,
            "slipped": self.slipped,
            "flushed_length_mm": self.flushed_length_mm,
        }


@dataclass
class ContactReport:
    phase: ContactPhase
    gap_um: float           # FREE: clearance to the deflected wall; other
                            # phases: penetration depth past the relevant surface
    axis_point_mm: tuple
    tangent: tuple
    normal: tuple           # superficial normal (toward the globe center)
    height_um: float        # signed elevation of the tip above the vessel axis
    lateral_um: float       # offset across the tube, perpendicular to normal
    radial_um: float        # straight distance from tip to the centerline
    segment: int


def _decompose(tip, geom, hint=None):
    seg, axis_pt, tangent, radial = geom.locate(tip, hint)
    ax, ay, az = axis_pt
    an = math.sqrt(ax * ax + ay * ay + az * az)
    # superficial normal points from the axis toward the globe center (origin)
    nx, ny, nz = -ax / an, -ay / an, -az / an
    rx = tip[0] - ax
    ry = tip[1] - ay
    rz = tip[2] - az
    h = rx * nx + ry * ny + rz * nz
    wx = rx - h * nx
    wy = ry - h * ny
    wz = rz - h * nz
    w = math.sqrt(wx * wx + wy * wy + wz * wz)
    return seg, axis_pt, tangent, (nx, ny, nz), h, w, radial


def _phase_of(h, w, radial, deflection_um, punctured, r_lum, r_out):
    """Classification core shared by the query and the B-scan label."""
    delta = deflection_um / 1000.0
    if punctured:
        if radial < r_lum:
            return ContactPhase.INTRALUMINAL, (r_lum - radial) * 1000.0
        if w < r_out and h < 0.0:
            pen = max(0.0, -h - r_lum) * 1000.0
            return ContactPhase.THROUGH_WALL, pen
    if w < r_out:
        surf = math.sqrt(r_out * r_out - w * w) - delta
        gap = h - surf
    else:
        gap = radial - r_out + delta
    if gap > 0.0:
        return ContactPhase.FREE, gap * 1000.0
    return ContactPhase.ON_WALL, -gap * 1000.0


def tip_tissue_query(tip, scenario: Scenario, tissue: TissueState,
                     hint=None) -> ContactReport:
    """Classify the tip against the (deflected) vessel surfaces."""
    tip = tuple(float(v) for v in tip)
    geom = scenario.vessel.geometry()
    seg, axis_pt, tangent, normal, h, w, radial = _decompose(tip, geom, hint)
    r_lum = scenario.vessel.lumen_radius_um / 1000.0
    r_out = scenario.vessel.outer_radius_um / 1000.0
    phase, gap_um = _phase_of(h, w, radial, tissue.wall_deflection_um,
                              tissue.punctured, r_lum, r_out)
    return ContactReport(
        phase=phase, gap_um=gap_um, axis_point_mm=axis_pt, tangent=tangent,
        normal=normal, height_um=h * 1000.0, lateral_um=w * 1000.0,
        radial_um=radial * 1000.0, segment=seg,
    )


def is_intraluminal(tip, scenario: Scenario, tissue: TissueState,
                    margin_um: float = 5.0) -> bool:
    """True iff punctured and the tip sits inside the lumen by >= margin."""
    if not tissue.punctured:
        return False
    report = tip_tissue_query(tip, scenario, tissue)
    return report.phase is ContactPhase.INTRALUMINAL and report.gap_um >= margin_um


def step_tissue(tissue: TissueState, tip_from, tip_to, dt_s: float,
                scenario: Scenario, hint=None):
    """Advance the wall state over one step of the tip trajectory.

    Fast approaches (closing speed >= the scenario threshold) puncture at the
    wall crossing; slow ones deflect the wall with the tip up to the cap and
    then slip. Returns (events, segment_hint); the tissue is updated in place.
    """
    if dt_s <= 0.0:
        raise ValueError("dt must be positive")
    tip_from = tuple(float(v) for v in tip_from)
    tip_to = tuple(float(v) for v in tip_to)
    geom = scenario.vessel.geometry()
    r_lum = scenario.vessel.lumen_radius_um / 1000.0
    r_out = scenario.vessel.outer_radius_um / 1000.0
    events = []

    seg, _, _, _, h_new, w_new, _ = _decompose(tip_to, geom, hint)
    if tissue.punctured or w_new >= r_out:
        if not tissue.punctured and tissue.wall_deflection_um > 0.0 and w_new >= r_out:
            tissue.wall_deflection_um = 0.0
            tissue.slipped = False
        return events, seg

    _, _, _, _, h_old, _, _ = _decompose(tip_from, geom, seg)
    approach = (h_old - h_new) / dt_s
    delta = tissue.wall_deflection_um / 1000.0
    surf_deflected = math.sqrt(r_out * r_out - w_new * w_new) - delta
    in_contact = h_new <= surf_deflected

    if in_contact and approach >= scenario.effective_puncture_threshold:
        frac = 0.0
        if h_old > surf_deflected and h_old > h_new:
            frac = (h_old - surf_deflected) / (h_old - h_new)
        loc = tuple(a + frac * (b - a) for a, b in zip(tip_from, tip_to))
        tissue.punctured = True
        tissue.puncture_location_mm = loc
        tissue.wall_deflection_um = 0.0
        tissue.slipped = False
        events.append(TissueEventKind.PUNCTURE_OCCURRED)
        return events, seg

    surf_rest = math.sqrt(r_out * r_out - w_new * w_new)
    penetration_um = (surf_rest - h_new) * 1000.0
    if penetration_um <= 0.0:
        tissue.wall_deflection_um = 0.0
        tissue.slipped = False
        return events, seg
    cap = scenario.vessel.max_wall_deflection_um
    if penetration_um >= cap:
        tissue.wall_deflection_um = cap
        if not tissue.slipped:
            tissue.slipped = True
            events.append(TissueEventKind.WALL_SLIP)
    else:
        tissue.wall_deflection_um = penetration_um
    return events, seg


# ---------------------------------------------------------------------------
# Forces, infusion, tremor
# ---------------------------------------------------------------------------

@dataclass
class ForceConfig:
    noise_sigma_mn: float = 0.02
    noise_floor_mn: float = 0.15
    wall_spring_mn_per_mm: float = 10.0
    spike_amplitude_mn: float = 1.0
    spike_decay_s: float = 0.08


@dataclass
class ForceSample:
    force_mn: tuple
    t: float


def handle_force(tissue: TissueState, report: ContactReport, puncture_times,
                 t: float, rng: random.Random,
                 config: ForceConfig | None = None) -> ForceSample:
    """Synthesized handle force: sensor noise, wall spring, puncture spikes.

    puncture_times is the list of past puncture event timestamps; each one
    contributes a decaying transient along the wall normal.
    """
    cfg = config or ForceConfig()
    s = cfg.noise_sigma_mn
    fx = rng.gauss(0.0, s)
    fy = rng.gauss(0.0, s)
    fz = rng.gauss(0.0, s)
    magnitude = 0.0
    if tissue.wall_deflection_um > 0.0:
        magnitude += cfg.wall_spring_mn_per_mm * tissue.wall_deflection_um / 1000.0
    for te in puncture_times:
        if 0.0 <= t - te:
            magnitude += cfg.spike_amplitude_mn * math.exp(-(t - te) / cfg.spike_decay_s)
    if magnitude != 0.0:
        nx, ny, nz = report.normal
        fx += magnitude * nx
        fy += magnitude * ny
        fz += magnitude * nz
    return ForceSample(force_mn=(fx, fy, fz), t=t)


@dataclass
class InfusionResult:
    success: bool
    flushed_length_mm: float
    reflux: bool
    failure_cause: FailureInjection | str | None = None


@dataclass
class InfusionConfig:
    flush_rate_mm_per_mmhg_s: float = 0.005
    reflux_length_factor: float = 2.0
    intraluminal_margin_um: float = 5.0


def infuse(pressure_mmhg: float, duration_s: float, scenario: Scenario,
           tissue: TissueState, tip,
           config: InfusionConfig | None = None) -> InfusionResult:
    """Pressure-regulated flush of the lumen.

    Raises:
        PreconditionError: called before any puncture.
    """
    if pressure_mmhg <= 0.0:
        raise ValueError("pressure must be positive")
    if not tissue.punctured:
        raise PreconditionError("infusion requires a punctured vessel")
    cfg = config or InfusionConfig()
    if scenario.failure_injection is FailureInjection.AIR_BUBBLE:
        return InfusionResult(False, 0.0, False, FailureInjection.AIR_BUBBLE)
    if not is_intraluminal(tip, scenario, tissue, cfg.intraluminal_margin_um):
        return InfusionResult(False, 0.0, False, "not_intraluminal")
    flushed = cfg.flush_rate_mm_per_mmhg_s * pressure_mmhg * duration_s
    reflux = flushed > cfg.reflux_length_factor * scenario.vessel.length_mm()
    tissue.lumen_fluid = LumenFluid.FLUSHED
    tissue.flushed_length_mm = flushed
    return InfusionResult(True, flushed, reflux, None)


class TremorModel:
    """Band-limited 8-12 Hz hand tremor for the unassisted baseline.

    Each axis is a fixed 4-component sinusoid mix, rescaled at build time so
    its long-run peak-to-peak span equals the requested amplitude. The same
    seed always yields the same waveform.
    """

    N_COMPONENTS = 4
    BAND_HZ = (8.0, 12.0)

    def __init__(self, amplitude_um: float = TREMOR_AMPLITUDE_UM, seed: int = 0):
        self.amplitude_um = amplitude_um
        rng = random.Random(seed ^ 0x7E3A)
        self._components = []
        for _ in range(3):
            comps = []
            for _ in range(self.N_COMPONENTS):
                freq = rng.uniform(*self.BAND_HZ)
                phase = rng.uniform(0.0, 2.0 * math.pi)
                weight = rng.uniform(0.5, 1.0)
                comps.append((2.0 * math.pi * freq, phase, weight))
            self._components.append(comps)
        # calibrate each axis so peak-to-peak over a long window = amplitude
        ts = np.arange(0.0, 60.0, 0.002)
        self._scales = []
        for comps in self._components:
            signal = np.zeros_like(ts)
            for omega, phase, weight in comps:
                signal += weight * np.sin(omega * ts + phase)
            span = float(signal.max() - signal.min())
            self._scales.append(amplitude_um / span if span > 0 else 0.0)

    def offset_um(self, t: float):
        out = []
        for comps, scale in zip(self._components, self._scales):
            v = 0.0
            for omega, phase, weight in comps:
                v += weight * math.sin(omega * t + phase)
            out.append(v * scale)
        return tuple(out)


def tremor_offset(t: float, model: TremorModel | None):
    """Tip offset in micrometers; zero when tremor is disabled."""
    if model is None:
        return (0.0, 0.0, 0.0)
    return model.offset_um(t)
