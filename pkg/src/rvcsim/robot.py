"""5-DOF ophthalmic robot: XYZ prismatic stage carrying a 2-axis wrist.

Chain (all world-frame outputs, mm and rad):

    wrist = base_t + base_R @ (x, y, z)
    R_tool = base_R @ Ry(theta1) @ Rx(theta2)
    tip = wrist + tool_length * (R_tool @ z_hat)

The tool shaft is the +z axis of the tool frame. The default base pose is
rotated 180 degrees about x so the home shaft points world -z, i.e. down into
the eye, with the stage 30 mm above the globe center.

The private ``_chain`` / ``_correction`` / ``_solve_rates`` scalar helpers are
the single source of truth for the kinematics math; the public numpy API and
the fixed-step engine both call them (the engine skips the array wrapping to
stay fast enough for long batch runs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import (
    DegenerateGeometryError,
    RigidTransform,
    align_axis,
    rotation_error,
)

NAVIGATE_SPEED_MM_S = 0.2
PUNCTURE_SPEED_MM_S = 5.4
RCM_STOP_THRESHOLD_DEG = 0.1


class JointLimitError(ValueError):
    """Joint configuration outside the model's limits."""


class Key(str, Enum):
    LEFT = "Left"
    RIGHT = "Right"
    UP = "Up"
    DOWN = "Down"
    D = "D"
    U = "U"
    P = "P"
    R = "R"


class KeyAction(str, Enum):
    DOWN = "down"
    UP = "up"


class Mode(str, Enum):
    NAVIGATE = "navigate"
    PUNCTURE = "puncture"
    RETRACT = "retract"
    IDLE = "idle"


# World-frame direction each navigation key commands (Table-style key map).
KEY_DIRECTIONS = {
    Key.LEFT: (-1.0, 0.0, 0.0),
    Key.RIGHT: (1.0, 0.0, 0.0),
    Key.UP: (0.0, 1.0, 0.0),
    Key.DOWN: (0.0, -1.0, 0.0),
    Key.D: (0.0, 0.0, -1.0),
    Key.U: (0.0, 0.0, 1.0),
}


@dataclass(frozen=True)
class KeyCommand:
    key: Key
    action: KeyAction


@dataclass
class JointState:
    """x, y, z prismatic positions (mm); theta1 pitch, theta2 yaw (rad)."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    theta1: float = 0.0
    theta2: float = 0.0

    def as_tuple(self):
        return (self.x, self.y, self.z, self.theta1, self.theta2)

    def as_array(self):
        return np.array(self.as_tuple())

    @classmethod
    def from_tuple(cls, q):
        return cls(*(float(v) for v in q))


def _default_base_pose():
    # 180 deg about x: home shaft points world -z, stage above the globe.
    return RigidTransform(
        rotation=np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]),
        translation=np.array([0.0, 0.0, 30.0]),
    )


@dataclass
class RobotModel:
    tool_length_mm: float = 40.0
    base_pose: RigidTransform = field(default_factory=_default_base_pose)
    limits_lower: tuple = (-25.0, -25.0, -25.0, -0.8, -0.8)
    limits_upper: tuple = (25.0, 25.0, 25.0, 0.8, 0.8)
    # Taper band per joint inside which commanded rates scale down to zero.
    limit_band: tuple = (0.5, 0.5, 0.5, 0.01, 0.01)
    actuation_noise_mm: float = 0.005

    def __post_init__(self):
        if self.tool_length_mm <= 0.0:
            raise ValueError("tool length must be positive")
        for lo, hi in zip(self.limits_lower, self.limits_upper):
            if not lo < hi:
                raise ValueError("joint limits must be well-ordered")
        self._scalars = self._build_scalars()

    def _build_scalars(self):
        # plain floats only: numpy scalars would slow the whole tick path
        r = self.base_pose.rotation
        t = self.base_pose.translation
        return tuple(float(v) for v in (
            r[0, 0], r[0, 1], r[0, 2],
            r[1, 0], r[1, 1], r[1, 2],
            r[2, 0], r[2, 1], r[2, 2],
            t[0], t[1], t[2],
            self.tool_length_mm,
        ))

    def check_limits(self, q: JointState):
        for value, lo, hi in zip(q.as_tuple(), self.limits_lower, self.limits_upper):
            if not (lo <= value <= hi) or not math.isfinite(value):
                raise JointLimitError(
                    f"joint value {value} outside [{lo}, {hi}]"
                )


@dataclass
class RcmRegistration:
    """The scleral point the shaft must pass through, plus controller knobs."""

    point: np.ndarray
    rot_stop_threshold_deg: float = RCM_STOP_THRESHOLD_DEG
    max_correction_rate: float = 0.2  # rad/s

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        if self.rot_stop_threshold_deg <= 0.0:
            raise ValueError("stop threshold must be positive")


@dataclass
class ControllerConfig:
    navigate_speed: float = NAVIGATE_SPEED_MM_S
    puncture_speed: float = PUNCTURE_SPEED_MM_S
    correction_gain: float = 5.0  # s^-1, proportional gain on the shaft error


@dataclass
class VelocityCommand:
    linear: np.ndarray
    mode: Mode


@dataclass
class CommandResolution:
    joint_rates: np.ndarray          # 5-vector, mm/s and rad/s
    mode: Mode
    tip_velocity: np.ndarray         # commanded tip linear velocity, mm/s
    correction: np.ndarray           # applied angular velocity, rad/s, world
    error_rad: float                 # shaft-vs-line geodesic error
    limit_flags: tuple               # joint indices whose rates were tapered


# ---------------------------------------------------------------------------
# Scalar core (hot path; plain floats and tuples)
# ---------------------------------------------------------------------------

def _chain(q, sc):
    """Wrist, tip, shaft direction and wrist-axis data for a joint tuple."""
    qx, qy, qz, th1, th2 = q
    (r00, r01, r02, r10, r11, r12, r20, r21, r22, tbx, tby, tbz, L) = sc
    s1 = math.sin(th1)
    c1 = math.cos(th1)
    s2 = math.sin(th2)
    c2 = math.cos(th2)
    # shaft and its theta-derivatives in the base frame
    sbx = s1 * c2
    sby = -s2
    sbz = c1 * c2
    d1x = c1 * c2
    d1z = -s1 * c2
    d2x = -s1 * s2
    d2y = -c2
    d2z = -c1 * s2
    wx = tbx + r00 * qx + r01 * qy + r02 * qz
    wy = tby + r10 * qx + r11 * qy + r12 * qz
    wz = tbz + r20 * qx + r21 * qy + r22 * qz
    sx = r00 * sbx + r01 * sby + r02 * sbz
    sy = r10 * sbx + r11 * sby + r12 * sbz
    sz = r20 * sbx + r21 * sby + r22 * sbz
    px = wx + L * sx
    py = wy + L * sy
    pz = wz + L * sz
    # wrist rotation axes in world: theta1 about base y, theta2 about the
    # pitched x axis
    a1 = (r01, r11, r21)
    a2 = (r00 * c1 - r02 * s1, r10 * c1 - r12 * s1, r20 * c1 - r22 * s1)
    ds1 = (r00 * d1x + r02 * d1z, r10 * d1x + r12 * d1z, r20 * d1x + r22 * d1z)
    ds2 = (
        r00 * d2x + r01 * d2y + r02 * d2z,
        r10 * d2x + r11 * d2y + r12 * d2z,
        r20 * d2x + r21 * d2y + r22 * d2z,
    )
    return (wx, wy, wz), (px, py, pz), (sx, sy, sz), a1, a2, ds1, ds2


def _correction(shaft, tip, rcm_point, thresh_rad, gain, cap):
    """Angular velocity (world) steering the shaft onto the RCM-tip line.

    Returns (omega, error_angle). Zero omega inside the stop threshold.
    """
    sx, sy, sz = shaft
    dx = tip[0] - rcm_point[0]
    dy = tip[1] - rcm_point[1]
    dz = tip[2] - rcm_point[2]
    dist = math.sqrt(dx * dx + dy * dy + dz * dz)
    if dist < 1e-3:  # tip within 1 um of the RCM point
        raise DegenerateGeometryError("tip coincident with RCM point")
    dx /= dist
    dy /= dist
    dz /= dist
    cx = sy * dz - sz * dy
    cy = sz * dx - sx * dz
    cz = sx * dy - sy * dx
    sin_angle = math.sqrt(cx * cx + cy * cy + cz * cz)
    dot = sx * dx + sy * dy + sz * dz
    angle = math.atan2(sin_angle, dot)
    if angle < thresh_rad or sin_angle < 1e-15:
        return (0.0, 0.0, 0.0), angle
    rate = gain * angle
    if rate > cap:
        rate = cap
    scale = rate / sin_angle
    return (cx * scale, cy * scale, cz * scale), angle


def _solve_rates(chain, v_cmd, omega, sc):
    """Joint rates giving tip velocity v_cmd while rotating the shaft by omega.

    The wrist rates realize the shaft-direction change exactly (2x2 normal
    equations on the shaft Jacobian); the prismatic stage compensates the tip
    translation the wrist induces, so the correction rotates about the tip.
    """
    (w, p, s, a1, a2, ds1, ds2) = chain
    ox, oy, oz = omega
    if ox == 0.0 and oy == 0.0 and oz == 0.0:
        t1d = 0.0
        t2d = 0.0
    else:
        # desired shaft-direction velocity: omega x s
        vx = oy * s[2] - oz * s[1]
        vy = oz * s[0] - ox * s[2]
        vz = ox * s[1] - oy * s[0]
        g11 = ds1[0] * ds1[0] + ds1[1] * ds1[1] + ds1[2] * ds1[2]
        g12 = ds1[0] * ds2[0] + ds1[1] * ds2[1] + ds1[2] * ds2[2]
        g22 = ds2[0] * ds2[0] + ds2[1] * ds2[1] + ds2[2] * ds2[2]
        b1 = ds1[0] * vx + ds1[1] * vy + ds1[2] * vz
        b2 = ds2[0] * vx + ds2[1] * vy + ds2[2] * vz
        det = g11 * g22 - g12 * g12
        if det < 1e-12:
            t1d = 0.0
            t2d = 0.0
        else:
            t1d = (g22 * b1 - g12 * b2) / det
            t2d = (g11 * b2 - g12 * b1) / det
    # tip velocity induced by the wrist rotation about the wrist point
    lx = p[0] - w[0]
    ly = p[1] - w[1]
    lz = p[2] - w[2]
    awx = t1d * a1[0] + t2d * a2[0]
    awy = t1d * a1[1] + t2d * a2[1]
    awz = t1d * a1[2] + t2d * a2[2]
    vwx = awy * lz - awz * ly
    vwy = awz * lx - awx * lz
    vwz = awx * ly - awy * lx
    ex = v_cmd[0] - vwx
    ey = v_cmd[1] - vwy
    ez = v_cmd[2] - vwz
    (r00, r01, r02, r10, r11, r12, r20, r21, r22) = sc[:9]
    # prismatic rates in the base frame: base_R^T @ e
    return (
        r00 * ex + r10 * ey + r20 * ez,
        r01 * ex + r11 * ey + r21 * ez,
        r02 * ex + r12 * ey + r22 * ez,
        t1d,
        t2d,
    )


def _geometric_step(q, sc, v_cmd, omega, dt):
    """Advance joints one step with the tip and shaft moved exactly.

    The shaft direction is rotated by exp(omega*dt) and the tip translated by
    v_cmd*dt, then the 5 joints are recovered in closed form. This keeps the
    commanded tip velocity exact in discrete time (a plain Euler step on
    joint rates leaks ~1e-5 mm/s of curvature error per correction step).
    """
    ox, oy, oz = omega
    vx, vy, vz = v_cmd
    if ox == 0.0 and oy == 0.0 and oz == 0.0:
        if vx == 0.0 and vy == 0.0 and vz == 0.0:
            return q
        # translation only: prismatic increment in the base frame
        (r00, r01, r02, r10, r11, r12, r20, r21, r22) = sc[:9]
        ex = vx * dt
        ey = vy * dt
        ez = vz * dt
        return (
            q[0] + r00 * ex + r10 * ey + r20 * ez,
            q[1] + r01 * ex + r11 * ey + r21 * ez,
            q[2] + r02 * ex + r12 * ey + r22 * ez,
            q[3],
            q[4],
        )
    (r00, r01, r02, r10, r11, r12, r20, r21, r22, tbx, tby, tbz, L) = sc
    _, p, s, _, _, _, _ = _chain(q, sc)
    # rotate the shaft: Rodrigues about the unit correction axis
    norm = math.sqrt(ox * ox + oy * oy + oz * oz)
    phi = norm * dt
    kx, ky, kz = ox / norm, oy / norm, oz / norm
    c = math.cos(phi)
    si = math.sin(phi)
    dot = kx * s[0] + ky * s[1] + kz * s[2]
    crx = ky * s[2] - kz * s[1]
    cry = kz * s[0] - kx * s[2]
    crz = kx * s[1] - ky * s[0]
    sx = s[0] * c + crx * si + kx * dot * (1.0 - c)
    sy = s[1] * c + cry * si + ky * dot * (1.0 - c)
    sz = s[2] * c + crz * si + kz * dot * (1.0 - c)
    sn = math.sqrt(sx * sx + sy * sy + sz * sz)
    sx /= sn
    sy /= sn
    sz /= sn
    # closed-form wrist angles from the base-frame shaft direction
    sbx = r00 * sx + r10 * sy + r20 * sz
    sby = r01 * sx + r11 * sy + r21 * sz
    sbz = r02 * sx + r12 * sy + r22 * sz
    sin_t2 = -sby
    if sin_t2 > 1.0:
        sin_t2 = 1.0
    elif sin_t2 < -1.0:
        sin_t2 = -1.0
    t2 = math.asin(sin_t2)
    t1 = math.atan2(sbx, sbz)
    tx = p[0] + vx * dt
    ty = p[1] + vy * dt
    tz = p[2] + vz * dt
    wx = tx - L * sx - tbx
    wy = ty - L * sy - tby
    wz = tz - L * sz - tbz
    return (
        r00 * wx + r10 * wy + r20 * wz,
        r01 * wx + r11 * wy + r21 * wz,
        r02 * wx + r12 * wy + r22 * wz,
        t1,
        t2,
    )


def _apply_limits(q, rates, lower, upper, band):
    """Taper rates toward zero inside the limit band; returns (rates, flags)."""
    out = list(rates)
    flags = ()
    for i in range(5):
        rate = out[i]
        if rate > 0.0:
            margin = upper[i] - q[i]
        elif rate < 0.0:
            margin = q[i] - lower[i]
        else:
            continue
        if margin < band[i]:
            scale = margin / band[i]
            if scale < 0.0:
                scale = 0.0
            out[i] = rate * scale
            flags = flags + (i,)
    return tuple(out), flags


def _key_velocity(keys, shaft, control):
    """Commanded tip velocity and mode from the set of active keys."""
    if Key.P in keys:
        v = control.puncture_speed
        return (v * shaft[0], v * shaft[1], v * shaft[2]), Mode.PUNCTURE
    if Key.R in keys:
        v = -control.navigate_speed
        return (v * shaft[0], v * shaft[1], v * shaft[2]), Mode.RETRACT
    dx = dy = dz = 0.0
    for key in keys:
        d = KEY_DIRECTIONS.get(key)
        if d is not None:
            dx += d[0]
            dy += d[1]
            dz += d[2]
    norm = math.sqrt(dx * dx + dy * dy + dz * dz)
    if norm < 1e-12:
        return (0.0, 0.0, 0.0), Mode.IDLE
    v = control.navigate_speed / norm
    return (dx * v, dy * v, dz * v), Mode.NAVIGATE


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def forward_kinematics(q: JointState, model: RobotModel) -> RigidTransform:
    """Tip pose in the world frame.

    Raises:
        JointLimitError: q outside the configured limits.
    """
    model.check_limits(q)
    _, tip, _, _, _, _, _ = _chain(q.as_tuple(), model._scalars)
    qx, qy, qz, th1, th2 = q.as_tuple()
    s1, c1 = math.sin(th1), math.cos(th1)
    s2, c2 = math.sin(th2), math.cos(th2)
    ry = np.array([[c1, 0.0, s1], [0.0, 1.0, 0.0], [-s1, 0.0, c1]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, c2, -s2], [0.0, s2, c2]])
    rotation = model.base_pose.rotation @ ry @ rx
    return RigidTransform(rotation=rotation, translation=np.array(tip))


def wrist_position(q: JointState, model: RobotModel) -> np.ndarray:
    w, _, _, _, _, _, _ = _chain(q.as_tuple(), model._scalars)
    return np.array(w)


def shaft_direction(q: JointState, model: RobotModel) -> np.ndarray:
    """Unit vector from wrist to tip (tool-frame +z in world coordinates)."""
    _, _, s, _, _, _, _ = _chain(q.as_tuple(), model._scalars)
    return np.array(s)


def jacobian(q: JointState, model: RobotModel) -> np.ndarray:
    """6x5 tip twist Jacobian: rows 0-2 linear (mm/s), rows 3-5 angular (rad/s)."""
    model.check_limits(q)
    w, p, _, a1, a2, _, _ = _chain(q.as_tuple(), model._scalars)
    lever = np.array(p) - np.array(w)
    J = np.zeros((6, 5))
    J[:3, :3] = model.base_pose.rotation
    for col, axis in ((3, np.array(a1)), (4, np.array(a2))):
        J[:3, col] = np.cross(axis, lever)
        J[3:, col] = axis
    return J


def joint_state_for_tip(tip, shaft_dir, model: RobotModel) -> JointState:
    """Joint configuration placing the tip at ``tip`` with the given shaft
    direction (unit, world frame). Used to seed trials from scene geometry."""
    tip = np.asarray(tip, dtype=float)
    d = np.asarray(shaft_dir, dtype=float)
    d = d / np.linalg.norm(d)
    rb = model.base_pose.rotation
    db = rb.T @ d
    # base-frame shaft is (sin t1 cos t2, -sin t2, cos t1 cos t2)
    s2 = -db[1]
    if abs(s2) > 1.0 - 1e-12:
        raise DegenerateGeometryError("shaft direction at wrist gimbal")
    theta2 = math.asin(s2)
    theta1 = math.atan2(db[0], db[2])
    wrist = tip - model.tool_length_mm * d
    prism = rb.T @ (wrist - model.base_pose.translation)
    q = JointState(float(prism[0]), float(prism[1]), float(prism[2]),
                   float(theta1), float(theta2))
    model.check_limits(q)
    return q


def desired_shaft_rotation(q: JointState, rcm: RcmRegistration,
                           model: RobotModel) -> np.ndarray:
    """Target tool rotation whose shaft lies on the RCM-to-tip line.

    Built as the minimal rotation from the current frame, so no roll about
    the shaft is ever commanded.

    Raises:
        DegenerateGeometryError: tip within 1 um of the RCM point.
    """
    _, tip, s, _, _, _, _ = _chain(q.as_tuple(), model._scalars)
    line = np.array(tip) - rcm.point
    dist = np.linalg.norm(line)
    if dist < 1e-3:
        raise DegenerateGeometryError("tip coincident with RCM point")
    rc = forward_kinematics(q, model).rotation
    return align_axis(np.array(s), line / dist) @ rc


def rcm_correction(q: JointState, rcm: RcmRegistration, model: RobotModel,
                   gain: float = 5.0) -> np.ndarray:
    """Proportional angular velocity (world frame, rad/s) reducing the shaft
    error, clamped to the registration's max rate; exactly zero once the
    error norm is below the stop threshold."""
    _, tip, s, _, _, _, _ = _chain(q.as_tuple(), model._scalars)
    omega, _ = _correction(
        s, tip, tuple(rcm.point),
        math.radians(rcm.rot_stop_threshold_deg),
        gain, rcm.max_correction_rate,
    )
    return np.array(omega)


def shaft_error_rad(q: JointState, rcm: RcmRegistration, model: RobotModel) -> float:
    rc = forward_kinematics(q, model).rotation
    rd = desired_shaft_rotation(q, rcm, model)
    return float(np.linalg.norm(rotation_error(rc, rd)))


def rcm_deviation(q: JointState, rcm: RcmRegistration, model: RobotModel) -> float:
    """Perpendicular distance (mm) from the RCM point to the shaft line."""
    w, _, s, _, _, _, _ = _chain(q.as_tuple(), model._scalars)
    rel = rcm.point - np.array(w)
    return float(np.linalg.norm(np.cross(rel, np.array(s))))


def integrate_command(keys, q: JointState, rcm: RcmRegistration, model: RobotModel,
                      dt: float, control: ControllerConfig | None = None) -> JointState:
    """One exact simulation step: resolve the key set and advance the joints.

    This is the stepper the fixed-timestep engine uses; joints are clamped
    hard at their limits.
    """
    control = control or ControllerConfig()
    chain = _chain(q.as_tuple(), model._scalars)
    v_cmd, _mode = _key_velocity(frozenset(keys), chain[2], control)
    omega, _err = _correction(
        chain[2], chain[1], tuple(rcm.point),
        math.radians(rcm.rot_stop_threshold_deg),
        control.correction_gain, rcm.max_correction_rate,
    )
    q_new = _geometric_step(q.as_tuple(), model._scalars, v_cmd, omega, dt)
    lo = model.limits_lower
    hi = model.limits_upper
    q_new = tuple(
        lo[i] if q_new[i] < lo[i] else (hi[i] if q_new[i] > hi[i] else q_new[i])
        for i in range(5)
    )
    return JointState.from_tuple(q_new)


def resolve_command(keys, q: JointState, rcm: RcmRegistration, model: RobotModel,
                    control: ControllerConfig | None = None) -> CommandResolution:
    """Joint rates for the active key set, superposed with the RCM correction.

    Empty key set gives zero translation (the correction may still act).
    Opposing keys cancel; multiple agreeing keys share the navigation speed
    along their summed direction. P and R are exclusive shaft-axis modes.
    """
    control = control or ControllerConfig()
    chain = _chain(q.as_tuple(), model._scalars)
    shaft = chain[2]
    v_cmd, mode = _key_velocity(frozenset(keys), shaft, control)
    omega, err = _correction(
        shaft, chain[1], tuple(rcm.point),
        math.radians(rcm.rot_stop_threshold_deg),
        control.correction_gain, rcm.max_correction_rate,
    )
    rates = _solve_rates(chain, v_cmd, omega, model._scalars)
    rates, flags = _apply_limits(
        q.as_tuple(), rates, model.limits_lower, model.limits_upper,
        model.limit_band,
    )
    return CommandResolution(
        joint_rates=np.array(rates),
        mode=mode,
        tip_velocity=np.array(v_cmd),
        correction=np.array(omega),
        error_rad=err,
        limit_flags=flags,
    )
