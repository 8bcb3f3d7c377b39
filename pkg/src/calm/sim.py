"""Planar character dynamics: a 2D rigid body with articulated limb oscillators.

The character is a damped double integrator on the plane with a heading, a
posture scalar, and four limb joints modeled as torque-driven damped springs.
Integration is semi-implicit Euler at a fixed timestep: velocities update
first, then positions use the *new* velocities. All state mutation goes
through `step_batch`; the single-state `step` wraps a batch of one so both
paths are bit-identical.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi

# Flat state layout used by the batched API. One row per character.
STATE_CHANNELS = (
    "root_x", "root_y", "heading",
    "vel_x", "vel_y", "ang_vel",
    "posture",
    "limb_a0", "limb_a1", "limb_a2", "limb_a3",
    "limb_v0", "limb_v1", "limb_v2", "limb_v3",
    "time",
)
STATE_DIM = len(STATE_CHANNELS)

OBS_DIM = 16
ACTION_DIM = 8

POSTURE_MIN = 0.2
POSTURE_MAX = 1.0

# Two-segment arm used for effector kinematics (strike / reach tasks).
# Shoulder bases sit on the body's lateral axis; segment lengths are fixed.
EFFECTOR_BASE = np.array([[0.0, 0.2], [0.0, -0.2]], dtype=np.float64)
EFFECTOR_SEGMENTS = (0.4, 0.35)


def wrap_angle(theta):
    """Wrap angle(s) to the half-open interval (-pi, pi].

    Maps pi -> pi and -pi -> pi. Works on scalars and arrays.
    """
    return np.pi - np.mod(np.pi - np.asarray(theta), TWO_PI)


def rot(theta: np.ndarray) -> np.ndarray:
    """Rotation matrices for angle array of shape (...,): returns (..., 2, 2)."""
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty(np.shape(theta) + (2, 2), dtype=np.float64)
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


@dataclass(frozen=True)
class SimConfig:
    """Physical constants and integration settings.

    `limb_stiffness` is the restoring spring that makes each limb joint a
    damped oscillator around zero; without it the joints would be plain
    damped integrators and could not swing.
    """

    dt: float = 1.0 / 30.0
    lin_damping: float = 1.2
    ang_damping: float = 2.0
    limb_damping: float = 1.5
    limb_stiffness: float = 10.0
    posture_rate_max: float = 2.0
    accel_max: float = 4.0
    turn_torque_max: float = 8.0
    limb_torque_max: float = 8.0
    seed: int = 0

    def __post_init__(self):
        bad = [name for name in ("dt", "lin_damping", "ang_damping", "limb_damping",
                                 "limb_stiffness", "posture_rate_max", "accel_max",
                                 "turn_torque_max", "limb_torque_max")
               if getattr(self, name) <= 0]
        if bad:
            raise ValueError(f"SimConfig fields must be positive: {', '.join(bad)}")


@dataclass
class CharacterState:
    """Full pose of one character. `heading` is kept in (-pi, pi]."""

    root_pos: np.ndarray
    heading: float
    root_vel: np.ndarray
    ang_vel: float
    posture: float
    limb_angles: np.ndarray
    limb_vels: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.root_pos = np.asarray(self.root_pos, dtype=np.float64).reshape(2)
        self.root_vel = np.asarray(self.root_vel, dtype=np.float64).reshape(2)
        self.limb_angles = np.asarray(self.limb_angles, dtype=np.float64).reshape(4)
        self.limb_vels = np.asarray(self.limb_vels, dtype=np.float64).reshape(4)
        problems = []
        if not (-np.pi < self.heading <= np.pi):
            problems.append(f"heading={self.heading!r} outside (-pi, pi]")
        if not (POSTURE_MIN <= self.posture <= POSTURE_MAX):
            problems.append(f"posture={self.posture!r} outside [{POSTURE_MIN}, {POSTURE_MAX}]")
        if self.time < 0:
            problems.append(f"time={self.time!r} negative")
        for name, arr in (("root_pos", self.root_pos), ("root_vel", self.root_vel),
                          ("limb_angles", self.limb_angles), ("limb_vels", self.limb_vels)):
            if not np.all(np.isfinite(arr)):
                problems.append(f"{name} contains non-finite values")
        if problems:
            raise ValueError("invalid CharacterState: " + "; ".join(problems))

    def to_array(self) -> np.ndarray:
        out = np.empty(STATE_DIM, dtype=np.float64)
        out[0:2] = self.root_pos
        out[2] = self.heading
        out[3:5] = self.root_vel
        out[5] = self.ang_vel
        out[6] = self.posture
        out[7:11] = self.limb_angles
        out[11:15] = self.limb_vels
        out[15] = self.time
        return out

    @staticmethod
    def from_array(arr: np.ndarray) -> "CharacterState":
        arr = np.asarray(arr, dtype=np.float64).reshape(STATE_DIM)
        return CharacterState(
            root_pos=arr[0:2].copy(), heading=float(arr[2]),
            root_vel=arr[3:5].copy(), ang_vel=float(arr[5]),
            posture=float(arr[6]),
            limb_angles=arr[7:11].copy(), limb_vels=arr[11:15].copy(),
            time=float(arr[15]),
        )


def default_state() -> CharacterState:
    return CharacterState(
        root_pos=np.zeros(2), heading=0.0, root_vel=np.zeros(2), ang_vel=0.0,
        posture=1.0, limb_angles=np.zeros(4), limb_vels=np.zeros(4), time=0.0,
    )


@dataclass
class Action:
    """Control input: planar acceleration in the body frame, turn torque,
    posture rate, and four limb torques."""

    fwd_accel: float
    lat_accel: float
    turn_torque: float
    posture_rate: float
    limb_torques: np.ndarray

    def __post_init__(self):
        self.limb_torques = np.asarray(self.limb_torques, dtype=np.float64).reshape(4)
        bad = [name for name in ("fwd_accel", "lat_accel", "turn_torque", "posture_rate")
               if not np.isfinite(getattr(self, name))]
        if not np.all(np.isfinite(self.limb_torques)):
            bad.append("limb_torques")
        if bad:
            raise ValueError(f"non-finite Action fields: {', '.join(bad)}")

    def to_array(self) -> np.ndarray:
        out = np.empty(ACTION_DIM, dtype=np.float64)
        out[0] = self.fwd_accel
        out[1] = self.lat_accel
        out[2] = self.turn_torque
        out[3] = self.posture_rate
        out[4:8] = self.limb_torques
        return out

    @staticmethod
    def from_array(arr: np.ndarray) -> "Action":
        arr = np.asarray(arr, dtype=np.float64).reshape(ACTION_DIM)
        return Action(fwd_accel=float(arr[0]), lat_accel=float(arr[1]),
                      turn_torque=float(arr[2]), posture_rate=float(arr[3]),
                      limb_torques=arr[4:8].copy())


def clamp_action_batch(actions: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Clamp raw policy outputs to actuator limits.

    Componentwise clamps first; then the planar acceleration pair is rescaled
    so its Euclidean norm never exceeds accel_max. This keeps the speed bound
    accel_max / lin_damping + initial speed exact.
    """
    a = np.array(actions, dtype=np.float64)
    a[..., 0:2] = np.clip(a[..., 0:2], -cfg.accel_max, cfg.accel_max)
    norm = np.sqrt(np.sum(a[..., 0:2] ** 2, axis=-1, keepdims=True))
    scale = np.where(norm > cfg.accel_max, cfg.accel_max / np.maximum(norm, 1e-30), 1.0)
    a[..., 0:2] *= scale
    a[..., 2] = np.clip(a[..., 2], -cfg.turn_torque_max, cfg.turn_torque_max)
    a[..., 3] = np.clip(a[..., 3], -cfg.posture_rate_max, cfg.posture_rate_max)
    a[..., 4:8] = np.clip(a[..., 4:8], -cfg.limb_torque_max, cfg.limb_torque_max)
    return a


def step_batch(states: np.ndarray, actions: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Advance a batch of flat states one tick. Pure: returns a new array.

    Semi-implicit Euler: velocity integrates acceleration, then position
    integrates the updated velocity. The commanded planar acceleration is
    expressed in the body frame and rotated into the world by the *current*
    heading (before the heading update).
    """
    s = np.asarray(states, dtype=np.float64)
    squeeze = s.ndim == 1
    s = np.atleast_2d(s).copy()
    a = clamp_action_batch(np.atleast_2d(np.asarray(actions, dtype=np.float64)), cfg)
    dt = cfg.dt

    heading = s[:, 2]
    c, sn = np.cos(heading), np.sin(heading)
    acc_world_x = c * a[:, 0] - sn * a[:, 1]
    acc_world_y = sn * a[:, 0] + c * a[:, 1]

    # linear: dv = (a_world - lin_damping * v) dt
    s[:, 3] += (acc_world_x - cfg.lin_damping * s[:, 3]) * dt
    s[:, 4] += (acc_world_y - cfg.lin_damping * s[:, 4]) * dt
    s[:, 0] += s[:, 3] * dt
    s[:, 1] += s[:, 4] * dt

    # angular: dw = (torque - ang_damping * w) dt, heading wrapped
    s[:, 5] += (a[:, 2] - cfg.ang_damping * s[:, 5]) * dt
    s[:, 2] = wrap_angle(heading + s[:, 5] * dt)

    # posture: rate-limited first-order channel, clamped to its range
    s[:, 6] = np.clip(s[:, 6] + a[:, 3] * dt, POSTURE_MIN, POSTURE_MAX)

    # limbs: torque-driven damped oscillators around zero
    limb_acc = a[:, 4:8] - cfg.limb_stiffness * s[:, 7:11] - cfg.limb_damping * s[:, 11:15]
    s[:, 11:15] += limb_acc * dt
    s[:, 7:11] += s[:, 11:15] * dt

    s[:, 15] += dt
    return s[0] if squeeze else s


def step(state: CharacterState, action: Action, cfg: SimConfig) -> CharacterState:
    return CharacterState.from_array(step_batch(state.to_array(), action.to_array(), cfg))


def observe_batch(states: np.ndarray) -> np.ndarray:
    """Frame-invariant observation: everything the policy sees.

    Linear velocity is expressed in the body frame (rotated by -heading);
    world position, absolute heading, and time are excluded, so the
    observation is invariant under global translation and rotation.
    Layout (16): local_vel (2), ang_vel, posture, limb_angles (4),
    limb_vels (4), effector tips in the character frame (2 x 2).
    """
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    squeeze = np.asarray(states).ndim == 1
    obs = np.empty((s.shape[0], OBS_DIM), dtype=np.float64)
    c, sn = np.cos(s[:, 2]), np.sin(s[:, 2])
    obs[:, 0] = c * s[:, 3] + sn * s[:, 4]       # body-frame vx
    obs[:, 1] = -sn * s[:, 3] + c * s[:, 4]      # body-frame vy
    obs[:, 2] = s[:, 5]
    obs[:, 3] = s[:, 6]
    obs[:, 4:8] = s[:, 7:11]
    obs[:, 8:12] = s[:, 11:15]
    l1, l2 = EFFECTOR_SEGMENTS
    for e in range(2):
        a0 = s[:, 7 + 2 * e]
        a01 = a0 + s[:, 8 + 2 * e]
        obs[:, 12 + 2 * e] = EFFECTOR_BASE[e, 0] + l1 * np.cos(a0) + l2 * np.cos(a01)
        obs[:, 13 + 2 * e] = EFFECTOR_BASE[e, 1] + l1 * np.sin(a0) + l2 * np.sin(a01)
    return obs[0] if squeeze else obs


def observe(state: CharacterState) -> np.ndarray:
    return observe_batch(state.to_array())


def effector_positions(states: np.ndarray) -> np.ndarray:
    """World positions of both two-segment effector tips: (..., 2, 2).

    Effector e uses limb joints (2e, 2e+1): tip = root + R(h) @ (base_e
    + l1 * u(a0) + l2 * u(a0 + a1)), with u(t) = (cos t, sin t).
    """
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    squeeze = np.asarray(states).ndim == 1
    l1, l2 = EFFECTOR_SEGMENTS
    tips = np.empty((s.shape[0], 2, 2), dtype=np.float64)
    R = rot(s[:, 2])
    for e in range(2):
        a0 = s[:, 7 + 2 * e]
        a01 = a0 + s[:, 8 + 2 * e]
        local_x = EFFECTOR_BASE[e, 0] + l1 * np.cos(a0) + l2 * np.cos(a01)
        local_y = EFFECTOR_BASE[e, 1] + l1 * np.sin(a0) + l2 * np.sin(a01)
        tips[:, e, 0] = s[:, 0] + R[:, 0, 0] * local_x + R[:, 0, 1] * local_y
        tips[:, e, 1] = s[:, 1] + R[:, 1, 0] * local_x + R[:, 1, 1] * local_y
    return tips[0] if squeeze else tips


def effector_velocities(states: np.ndarray) -> np.ndarray:
    """World velocities of both effector tips: (..., 2, 2).

    v_tip = root_vel + ang_vel * perp(R p_local) + R @ J @ joint_vels,
    where perp rotates by +90 degrees and J is the planar two-link Jacobian.
    """
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    squeeze = np.asarray(states).ndim == 1
    l1, l2 = EFFECTOR_SEGMENTS
    vels = np.empty((s.shape[0], 2, 2), dtype=np.float64)
    h = s[:, 2]
    for e in range(2):
        a0 = s[:, 7 + 2 * e]
        a01 = a0 + s[:, 8 + 2 * e]
        v0 = s[:, 11 + 2 * e]
        v1 = s[:, 12 + 2 * e]
        # world-frame absolute segment angles
        w0 = h + a0
        w01 = h + a01
        local_x = EFFECTOR_BASE[e, 0] + l1 * np.cos(a0) + l2 * np.cos(a01)
        local_y = EFFECTOR_BASE[e, 1] + l1 * np.sin(a0) + l2 * np.sin(a01)
        px = np.cos(h) * local_x - np.sin(h) * local_y
        py = np.sin(h) * local_x + np.cos(h) * local_y
        # joint-rate contribution, differentiated in world coordinates
        jx = -l1 * np.sin(w0) * v0 - l2 * np.sin(w01) * (v0 + v1)
        jy = l1 * np.cos(w0) * v0 + l2 * np.cos(w01) * (v0 + v1)
        vels[:, e, 0] = s[:, 3] - s[:, 5] * py + jx
        vels[:, e, 1] = s[:, 4] + s[:, 5] * px + jy
    return vels[0] if squeeze else vels


# ---------------------------------------------------------------------------
# Task rewards. All pure; batched over leading axes where it matters.

def location_reward(root_pos: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """r = exp(-0.5 * ||goal - root||^2)."""
    d2 = np.sum((np.asarray(goal, dtype=np.float64) - np.asarray(root_pos, dtype=np.float64)) ** 2, axis=-1)
    return np.exp(-0.5 * d2)


def strike_reward(up: float | np.ndarray) -> np.ndarray:
    """r = 1 - up. Upright target (up=1) earns nothing; toppled earns 1."""
    return 1.0 - np.asarray(up, dtype=np.float64)


def reach_reward(effector: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """r = exp(-4 * ||effector - goal||^2)."""
    d2 = np.sum((np.asarray(effector, dtype=np.float64) - np.asarray(goal, dtype=np.float64)) ** 2, axis=-1)
    return np.exp(-4.0 * d2)


@dataclass
class StrikeTarget:
    pos: np.ndarray
    up: float = 1.0

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(2)
        if not (0.0 <= self.up <= 1.0):
            raise ValueError(f"StrikeTarget.up={self.up!r} outside [0, 1]")


# Effector tip topples the target when it arrives inside this radius at
# sufficient speed; the root "touching" the target (non-effector contact)
# ends the episode. Both radii are desk-scale choices.
STRIKE_CONTACT_RADIUS = 0.35
STRIKE_TIP_SPEED = 1.5
STRIKE_ROOT_CONTACT_RADIUS = 0.25


def strike_target_step(target: StrikeTarget, state_arr: np.ndarray) -> tuple[StrikeTarget, bool]:
    """Resolve one tick of strike contact.

    Topples the target (up -> 0) when either effector tip is within
    STRIKE_CONTACT_RADIUS moving faster than STRIKE_TIP_SPEED. Returns the
    new target and a termination flag that fires when the *root* contacts
    the target disc (illegal contact).
    """
    s = np.asarray(state_arr, dtype=np.float64).reshape(STATE_DIM)
    root_hit = bool(np.linalg.norm(s[0:2] - target.pos) < STRIKE_ROOT_CONTACT_RADIUS)
    up = target.up
    if up > 0.0:
        tips = effector_positions(s)
        tip_v = effector_velocities(s)
        for e in range(2):
            close = np.linalg.norm(tips[e] - target.pos) < STRIKE_CONTACT_RADIUS
            fast = np.linalg.norm(tip_v[e]) > STRIKE_TIP_SPEED
            if close and fast:
                up = 0.0
                break
    return StrikeTarget(pos=target.pos.copy(), up=up), root_hit


class ProjectilePhase:
    WARMUP = "warmup"
    LAUNCHED = "launched"
    RESOLVED = "resolved"


@dataclass
class Projectile:
    pos: np.ndarray
    vel: np.ndarray
    phase: str = ProjectilePhase.WARMUP

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(2)
        self.vel = np.asarray(self.vel, dtype=np.float64).reshape(2)
        if self.phase == ProjectilePhase.WARMUP and np.any(self.vel != 0.0):
            raise ValueError("Projectile in Warmup must have zero velocity")


SHIELD_HALF_ANGLE = np.pi / 4.0   # +-45 degrees about facing
SHIELD_RADIUS = 0.5


def block_step(proj: Projectile, state_arr: np.ndarray, cfg: SimConfig) -> tuple[Projectile, float]:
    """Advance the projectile one tick and score blocking.

    Warmup projectiles stay put. A launched projectile inside the shield
    arc (within SHIELD_RADIUS, bearing within +-45 degrees of facing) is
    blocked: reward 1, Resolved. One that passes the character (moving away
    beyond SHIELD_RADIUS) resolves with reward 0.
    """
    if proj.phase == ProjectilePhase.RESOLVED:
        raise ValueError("block_step on a Resolved projectile")
    if proj.phase == ProjectilePhase.WARMUP:
        return Projectile(proj.pos.copy(), proj.vel.copy(), proj.phase), 0.0

    s = np.asarray(state_arr, dtype=np.float64).reshape(STATE_DIM)
    new_pos = proj.pos + proj.vel * cfg.dt
    rel = new_pos - s[0:2]
    dist = np.linalg.norm(rel)
    if dist <= SHIELD_RADIUS:
        bearing = wrap_angle(np.arctan2(rel[1], rel[0]) - s[2])
        if abs(bearing) <= SHIELD_HALF_ANGLE:
            return Projectile(new_pos, proj.vel.copy(), ProjectilePhase.RESOLVED), 1.0
    receding = np.dot(rel, proj.vel) > 0.0
    if receding and dist > SHIELD_RADIUS:
        return Projectile(new_pos, proj.vel.copy(), ProjectilePhase.RESOLVED), 0.0
    return Projectile(new_pos, proj.vel.copy(), ProjectilePhase.LAUNCHED), 0.0
