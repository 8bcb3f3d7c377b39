"""Precision training: a 6 Hz controller drives the frozen skill stack.

The low-level policy and encoder never learn here. A small Gaussian policy
observes the character plus a task block (commanded direction and style,
or goal/projectile geometry), emits a pre-projection latent, and the
projected unit latent is held for HL_RATIO simulator ticks. Heading mode
rewards moving along the commanded direction while staying near the
commanded style's anchor encoding; task modes use the simulator's own
task rewards with no style term.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .motion import MotionDataset, mid_window_features, sample_reset_states
from .nn import AdamState, project_sphere
from .ppo import MlpGaussianPolicy, MlpValue, PpoConfig, gae, ppo_update_plain
from .pretrain import PolicyBundle, theta_fingerprint
from .sim import (
    OBS_DIM,
    STATE_DIM,
    Projectile,
    ProjectilePhase,
    SimConfig,
    StrikeTarget,
    block_step,
    effector_positions,
    location_reward,
    observe_batch,
    reach_reward,
    step_batch,
    strike_target_step,
)

logger = logging.getLogger("calm.hlc")

# low-level ticks per high-level decision: 30 Hz plant, 6 Hz commands
HL_RATIO = 5
EPS_V = 1e-3
# squared direction error when velocity is degenerate: ||d* - (-d*)||^2
WORST_DIR_SQ = 4.0

MODES = ("heading", "location", "reach", "strike", "block")


# ---------------------------------------------------------------------------
# Reward.

def locomotion_reward(root_vel: np.ndarray, dstar: np.ndarray, z: np.ndarray,
                      z_anchor: np.ndarray, style_weight: float = 1.0,
                      eps_v: float = EPS_V) -> np.ndarray:
    """r = exp(-0.25 ||d* - v/||v|| ||^2) + w exp(-4 ||z - z_anchor||^2).

    Speeds at or below eps_v take the worst-case direction error so that
    standing still cannot look like perfect tracking. With style_weight 0
    this is exactly the pure direction term.
    """
    v = np.atleast_2d(np.asarray(root_vel, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dstar, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    za = np.atleast_2d(np.asarray(z_anchor, dtype=np.float64))
    speed = np.linalg.norm(v, axis=1)
    moving = speed > eps_v
    u = v / np.maximum(speed, eps_v)[:, None]
    dir_sq = np.where(moving, np.sum((d - u) ** 2, axis=1), WORST_DIR_SQ)
    style_sq = np.sum((z - za) ** 2, axis=1)
    return np.exp(-0.25 * dir_sq) + style_weight * np.exp(-4.0 * style_sq)


def locomotion_reward_grads(root_vel: np.ndarray, dstar: np.ndarray,
                            z: np.ndarray, z_anchor: np.ndarray,
                            style_weight: float = 1.0, eps_v: float = EPS_V):
    """Reward plus analytic d r / d v and d r / d z.

    The degenerate-speed branch is piecewise constant in v, so its
    velocity gradient is zero by convention.
    """
    v = np.atleast_2d(np.asarray(root_vel, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dstar, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    za = np.atleast_2d(np.asarray(z_anchor, dtype=np.float64))
    speed = np.linalg.norm(v, axis=1)
    moving = speed > eps_v
    u = v / np.maximum(speed, eps_v)[:, None]
    dir_sq = np.where(moving, np.sum((d - u) ** 2, axis=1), WORST_DIR_SQ)
    dir_term = np.exp(-0.25 * dir_sq)
    style_sq = np.sum((z - za) ** 2, axis=1)
    style_term = style_weight * np.exp(-4.0 * style_sq)

    # d dir/dv = 0.5 dir/s (I - u u^T) d*  (and (I - u u^T) u = 0)
    proj_d = d - u * np.sum(u * d, axis=1)[:, None]
    dv = np.where(moving[:, None],
                  (0.5 * dir_term / np.maximum(speed, eps_v))[:, None] * proj_d,
                  0.0)
    dz = -8.0 * style_term[:, None] * (z - za)
    return dir_term + style_term, dv, dz


def to_char_frame(states: np.ndarray, world_vec: np.ndarray) -> np.ndarray:
    """Rotate world-frame planar vectors into each character's body frame."""
    s = np.atleast_2d(states)
    w = np.atleast_2d(world_vec)
    c, sn = np.cos(s[:, 2]), np.sin(s[:, 2])
    out = np.empty_like(w)
    out[:, 0] = c * w[:, 0] + sn * w[:, 1]
    out[:, 1] = -sn * w[:, 0] + c * w[:, 1]
    return out


# ---------------------------------------------------------------------------
# Style anchors.

def style_anchor_table(enc, ds: MotionDataset, styles: tuple[str, ...],
                       representatives: dict[str, str] | None = None):
    """Encode one representative mid-clip window per style.

    Default representative: the first clip carrying the style label (for
    the stock suite, the straight-line variant). Returns (anchors (S, d)
    float64, list of the clip ids used)."""
    representatives = representatives or {}
    feats, used = [], []
    for style in styles:
        if style in representatives:
            wanted = representatives[style]
            clip = next((c for c in ds.clips if c.id == wanted), None)
            if clip is None:
                raise ValueError(f"representative clip {wanted!r} for style "
                                 f"{style!r} not in dataset")
        else:
            clip = next((c for c in ds.clips if c.style_label == style), None)
            if clip is None:
                raise ValueError(f"no clip with style label {style!r} in dataset")
        feats.append(mid_window_features(clip))
        used.append(clip.id)
    z, _ = enc.encode(np.asarray(feats))
    return np.asarray(z, dtype=np.float64), used


# ---------------------------------------------------------------------------
# Config.

@dataclass
class HlcConfig:
    mode: str = "heading"
    styles: tuple[str, ...] = ("run", "walk", "crouch_walk")
    representatives: dict[str, str] | None = None
    n_envs: int = 64
    rollout_len: int = 16          # high-level decisions per env per iteration
    horizon: int = 60              # high-level decisions per episode
    total_hl_steps: int = 300_000
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    sigma: float = 0.3             # fixed pre-projection exploration scale
    p_redirect: float = 1.0 / 90.0
    style_weight: float = 1.0
    policy_hidden: tuple[int, ...] = (256, 128)
    value_hidden: tuple[int, ...] = (256, 128)
    seed: int = 0
    checkpoint_every: int = 200

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode {self.mode!r} not in {MODES}")
        if self.mode == "heading" and not self.styles:
            raise ValueError("heading mode needs at least one style")
        if not 0.0 <= self.p_redirect <= 1.0:
            raise ValueError(f"p_redirect={self.p_redirect} outside [0, 1]")
        bad = [n for n in ("n_envs", "rollout_len", "horizon", "total_hl_steps",
                           "epochs", "minibatch", "lr_actor", "lr_critic",
                           "sigma", "checkpoint_every")
               if getattr(self, n) <= 0]
        if bad:
            raise ValueError(f"HlcConfig fields must be positive: {', '.join(bad)}")
        if self.style_weight < 0:
            raise ValueError(f"style_weight={self.style_weight} negative")
        self.styles = tuple(self.styles)
        self.policy_hidden = tuple(self.policy_hidden)
        self.value_hidden = tuple(self.value_hidden)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("styles", "policy_hidden", "value_hidden"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "HlcConfig":
        d = dict(d)
        for key in ("styles", "policy_hidden", "value_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def ppo(self) -> PpoConfig:
        return PpoConfig(gamma=self.gamma, lam=self.lam, clip=self.clip,
                         epochs=self.epochs, minibatch=self.minibatch,
                         lr_actor=self.lr_actor, lr_critic=self.lr_critic)


# ---------------------------------------------------------------------------
# Environments. All follow the reset(rng) -> obs / step(actions, rng) ->
# (obs, rewards, dones) protocol with auto-reset; `actions` are
# pre-projection latents, held for HL_RATIO ticks after projection.

class _HlEnvBase:
    def __init__(self, ll_policy, ds: MotionDataset, cfg: HlcConfig,
                 latent_dim: int, n_extras: int,
                 sim_cfg: SimConfig | None = None, ratio: int = HL_RATIO):
        if ratio < 1:
            raise ValueError(f"ratio={ratio} must be >= 1")
        self.ll = ll_policy
        self.ds = ds
        self.cfg = cfg
        self.sim_cfg = sim_cfg or SimConfig()
        self.latent_dim = latent_dim
        self.obs_dim = OBS_DIM + n_extras
        self.hl_ratio = ratio
        N = cfg.n_envs
        self.states = np.zeros((N, STATE_DIM))
        self.hl_t = np.zeros(N, dtype=np.int64)
        self.recorder: list | None = None

    # -- subclass hooks -----------------------------------------------------
    def _reset_task(self, idx: np.ndarray, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _extras(self) -> np.ndarray:
        raise NotImplementedError

    def _tick(self, z: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """One simulator tick under held latents; returns (reward, abort mask)."""
        raise NotImplementedError

    def _between_decisions(self, rng: np.random.Generator) -> None:
        """Per-HL-step task dynamics (e.g. direction resampling)."""

    # -- protocol -----------------------------------------------------------
    def reset(self, rng: np.random.Generator) -> np.ndarray:
        idx = np.arange(self.cfg.n_envs)
        self.states = sample_reset_states(self.ds, rng, self.cfg.n_envs)
        self.hl_t[:] = 0
        self._reset_task(idx, rng)
        return self.observe()

    def observe(self) -> np.ndarray:
        return np.concatenate([observe_batch(self.states), self._extras()], axis=1)

    def step(self, actions: np.ndarray, rng: np.random.Generator):
        z = project_sphere(np.asarray(actions, dtype=np.float64))
        N = self.cfg.n_envs
        rewards = np.zeros(N)
        aborts = np.zeros(N, dtype=bool)
        for _ in range(self.hl_ratio):
            a, _ = self.ll.mean(observe_batch(self.states), z)
            self.states = step_batch(self.states, np.asarray(a, dtype=np.float64),
                                     self.sim_cfg)
            r, abort = self._tick(z, rng)
            rewards += r
            aborts |= abort
            if self.recorder is not None:
                self.recorder.append(self.states.copy())
        self.hl_t += 1
        self._between_decisions(rng)
        dones = (self.hl_t >= self.cfg.horizon) | aborts
        if np.any(dones):
            idx = np.flatnonzero(dones)
            self.states[idx] = sample_reset_states(self.ds, rng, idx.size)
            self.hl_t[idx] = 0
            self._reset_task(idx, rng)
        return self.observe(), rewards, dones.astype(np.float64)

    # -- checkpointing ------------------------------------------------------
    def state_arrays(self) -> dict:
        return {"env_states": self.states.copy(), "env_hl_t": self.hl_t.copy()}

    def load_arrays(self, arrays: dict) -> None:
        self.states = np.array(arrays["env_states"])
        self.hl_t = np.array(arrays["env_hl_t"])


class HeadingEnv(_HlEnvBase):
    """Move along a commanded world direction in a commanded style.

    Observation: base (16) + d* in the character frame (2) + style one-hot.
    Reward per tick: locomotion_reward against the style's anchor code.
    """

    def __init__(self, enc, ll_policy, ds, cfg, sim_cfg=None, ratio=HL_RATIO):
        super().__init__(ll_policy, ds, cfg, enc.latent_dim,
                         2 + len(cfg.styles), sim_cfg, ratio)
        self.anchors, self.anchor_clips = style_anchor_table(
            enc, ds, cfg.styles, cfg.representatives)
        if self.anchors.shape[1] != self.latent_dim:
            raise ValueError("anchor dimension disagrees with encoder latent_dim")
        N = cfg.n_envs
        self.dstar = np.zeros((N, 2))
        self.style_idx = np.zeros(N, dtype=np.int64)

    def _reset_task(self, idx, rng):
        ang = rng.uniform(-np.pi, np.pi, size=idx.size)
        self.dstar[idx, 0] = np.cos(ang)
        self.dstar[idx, 1] = np.sin(ang)
        self.style_idx[idx] = rng.integers(0, len(self.cfg.styles), size=idx.size)

    def _extras(self):
        one_hot = np.zeros((self.cfg.n_envs, len(self.cfg.styles)))
        one_hot[np.arange(self.cfg.n_envs), self.style_idx] = 1.0
        return np.concatenate([to_char_frame(self.states, self.dstar), one_hot],
                              axis=1)

    def _tick(self, z, rng):
        r = locomotion_reward(self.states[:, 3:5], self.dstar, z,
                              self.anchors[self.style_idx],
                              self.cfg.style_weight)
        return r, np.zeros(self.cfg.n_envs, dtype=bool)

    def _between_decisions(self, rng):
        flip = rng.random(self.cfg.n_envs) < self.cfg.p_redirect
        if np.any(flip):
            idx = np.flatnonzero(flip)
            ang = rng.uniform(-np.pi, np.pi, size=idx.size)
            self.dstar[idx, 0] = np.cos(ang)
            self.dstar[idx, 1] = np.sin(ang)

    def state_arrays(self):
        out = super().state_arrays()
        out["env_dstar"] = self.dstar.copy()
        out["env_style_idx"] = self.style_idx.copy()
        return out

    def load_arrays(self, arrays):
        super().load_arrays(arrays)
        self.dstar = np.array(arrays["env_dstar"])
        self.style_idx = np.array(arrays["env_style_idx"])


class LocationEnv(_HlEnvBase):
    """Reach a world goal point. Extras: goal offset in the character frame."""

    GOAL_RADIUS = (2.0, 6.0)

    def __init__(self, enc, ll_policy, ds, cfg, sim_cfg=None):
        super().__init__(ll_policy, ds, cfg, enc.latent_dim, 2, sim_cfg)
        self.goals = np.zeros((cfg.n_envs, 2))

    def _reset_task(self, idx, rng):
        ang = rng.uniform(-np.pi, np.pi, size=idx.size)
        rad = rng.uniform(*self.GOAL_RADIUS, size=idx.size)
        self.goals[idx, 0] = self.states[idx, 0] + rad * np.cos(ang)
        self.goals[idx, 1] = self.states[idx, 1] + rad * np.sin(ang)

    def _extras(self):
        return to_char_frame(self.states, self.goals - self.states[:, 0:2])

    def _tick(self, z, rng):
        r = location_reward(self.states[:, 0:2], self.goals)
        return r, np.zeros(self.cfg.n_envs, dtype=bool)

    def state_arrays(self):
        out = super().state_arrays()
        out["env_goals"] = self.goals.copy()
        return out

    def load_arrays(self, arrays):
        super().load_arrays(arrays)
        self.goals = np.array(arrays["env_goals"])


class ReachEnv(_HlEnvBase):
    """Hold an effector tip at a nearby world point; best tip scores."""

    GOAL_RADIUS = (0.4, 1.2)

    def __init__(self, enc, ll_policy, ds, cfg, sim_cfg=None):
        super().__init__(ll_policy, ds, cfg, enc.latent_dim, 2, sim_cfg)
        self.goals = np.zeros((cfg.n_envs, 2))

    def _reset_task(self, idx, rng):
        ang = rng.uniform(-np.pi, np.pi, size=idx.size)
        rad = rng.uniform(*self.GOAL_RADIUS, size=idx.size)
        self.goals[idx, 0] = self.states[idx, 0] + rad * np.cos(ang)
        self.goals[idx, 1] = self.states[idx, 1] + rad * np.sin(ang)

    def _extras(self):
        return to_char_frame(self.states, self.goals - self.states[:, 0:2])

    def _tick(self, z, rng):
        tips = effector_positions(self.states)          # (N, 2, 2)
        r = np.maximum(reach_reward(tips[:, 0], self.goals),
                       reach_reward(tips[:, 1], self.goals))
        return r, np.zeros(self.cfg.n_envs, dtype=bool)

    def state_arrays(self):
        out = super().state_arrays()
        out["env_goals"] = self.goals.copy()
        return out

    def load_arrays(self, arrays):
        super().load_arrays(arrays)
        self.goals = np.array(arrays["env_goals"])


class StrikeEnv(_HlEnvBase):
    """Topple a standing target with a fast effector tip.

    Reward per tick: toppled-ness plus a small approach term. Root contact
    with the target disc aborts the episode. Extras: target offset in the
    character frame and the target's up scalar.
    """

    TARGET_RADIUS = (1.5, 4.0)
    APPROACH_WEIGHT = 0.25

    def __init__(self, enc, ll_policy, ds, cfg, sim_cfg=None):
        super().__init__(ll_policy, ds, cfg, enc.latent_dim, 3, sim_cfg)
        self.target_pos = np.zeros((cfg.n_envs, 2))
        self.target_up = np.ones(cfg.n_envs)

    def _reset_task(self, idx, rng):
        ang = rng.uniform(-np.pi, np.pi, size=idx.size)
        rad = rng.uniform(*self.TARGET_RADIUS, size=idx.size)
        self.target_pos[idx, 0] = self.states[idx, 0] + rad * np.cos(ang)
        self.target_pos[idx, 1] = self.states[idx, 1] + rad * np.sin(ang)
        self.target_up[idx] = 1.0

    def _extras(self):
        rel = to_char_frame(self.states, self.target_pos - self.states[:, 0:2])
        return np.concatenate([rel, self.target_up[:, None]], axis=1)

    def _tick(self, z, rng):
        N = self.cfg.n_envs
        abort = np.zeros(N, dtype=bool)
        for i in range(N):
            target = StrikeTarget(pos=self.target_pos[i], up=self.target_up[i])
            target, root_hit = strike_target_step(target, self.states[i])
            self.target_up[i] = target.up
            abort[i] = root_hit
        d2 = np.sum((self.target_pos - self.states[:, 0:2]) ** 2, axis=1)
        r = (1.0 - self.target_up) + self.APPROACH_WEIGHT * np.exp(-0.5 * d2)
        return r, abort

    def state_arrays(self):
        out = super().state_arrays()
        out["env_target_pos"] = self.target_pos.copy()
        out["env_target_up"] = self.target_up.copy()
        return out

    def load_arrays(self, arrays):
        super().load_arrays(arrays)
        self.target_pos = np.array(arrays["env_target_pos"])
        self.target_up = np.array(arrays["env_target_up"])


class BlockEnv(_HlEnvBase):
    """Face down an incoming projectile; the shield arc scores the block.

    Projectiles spawn at SPAWN_DIST, sit in warmup for WARMUP_TICKS, then
    launch at the character's position at launch time. Resolution (blocked
    or passed) ends the episode. Extras: relative position and velocity in
    the character frame plus a launched flag.
    """

    SPAWN_DIST = 5.0
    SPEED = 4.0
    WARMUP_TICKS = 15

    def __init__(self, enc, ll_policy, ds, cfg, sim_cfg=None):
        super().__init__(ll_policy, ds, cfg, enc.latent_dim, 5, sim_cfg)
        N = cfg.n_envs
        self.proj_pos = np.zeros((N, 2))
        self.proj_vel = np.zeros((N, 2))
        self.proj_age = np.zeros(N, dtype=np.int64)
        self.launched = np.zeros(N, dtype=bool)
        self.resolved = np.zeros(N, dtype=bool)

    def _reset_task(self, idx, rng):
        ang = rng.uniform(-np.pi, np.pi, size=idx.size)
        self.proj_pos[idx, 0] = self.states[idx, 0] + self.SPAWN_DIST * np.cos(ang)
        self.proj_pos[idx, 1] = self.states[idx, 1] + self.SPAWN_DIST * np.sin(ang)
        self.proj_vel[idx] = 0.0
        self.proj_age[idx] = 0
        self.launched[idx] = False
        self.resolved[idx] = False

    def _extras(self):
        rel = to_char_frame(self.states, self.proj_pos - self.states[:, 0:2])
        vel = to_char_frame(self.states, self.proj_vel)
        return np.concatenate([rel, vel, self.launched[:, None].astype(np.float64)],
                              axis=1)

    def _tick(self, z, rng):
        N = self.cfg.n_envs
        r = np.zeros(N)
        self.proj_age += 1
        launch = (~self.launched) & (self.proj_age >= self.WARMUP_TICKS)
        if np.any(launch):
            idx = np.flatnonzero(launch)
            aim = self.states[idx, 0:2] - self.proj_pos[idx]
            aim /= np.maximum(np.linalg.norm(aim, axis=1), 1e-9)[:, None]
            self.proj_vel[idx] = self.SPEED * aim
            self.launched[idx] = True
        for i in range(N):
            if self.resolved[i]:
                continue
            phase = ProjectilePhase.LAUNCHED if self.launched[i] else ProjectilePhase.WARMUP
            proj = Projectile(pos=self.proj_pos[i], vel=self.proj_vel[i], phase=phase)
            proj, reward = block_step(proj, self.states[i], self.sim_cfg)
            self.proj_pos[i] = proj.pos
            r[i] = reward
            self.resolved[i] = proj.phase == ProjectilePhase.RESOLVED
        # resolution ends the episode through the abort channel
        return r, self.resolved.copy()

    def state_arrays(self):
        out = super().state_arrays()
        out["env_proj_pos"] = self.proj_pos.copy()
        out["env_proj_vel"] = self.proj_vel.copy()
        out["env_proj_age"] = self.proj_age.copy()
        out["env_launched"] = self.launched.copy()
        out["env_resolved"] = self.resolved.copy()
        return out

    def load_arrays(self, arrays):
        super().load_arrays(arrays)
        self.proj_pos = np.array(arrays["env_proj_pos"])
        self.proj_vel = np.array(arrays["env_proj_vel"])
        self.proj_age = np.array(arrays["env_proj_age"])
        self.launched = np.array(arrays["env_launched"])
        self.resolved = np.array(arrays["env_resolved"])


_ENV_CLASSES = {
    "heading": HeadingEnv,
    "location": LocationEnv,
    "reach": ReachEnv,
    "strike": StrikeEnv,
    "block": BlockEnv,
}


def make_env(cfg: HlcConfig, bundle: PolicyBundle, ds: MotionDataset,
             sim_cfg: SimConfig | None = None) -> _HlEnvBase:
    return _ENV_CLASSES[cfg.mode](bundle.encoder, bundle.policy, ds, cfg, sim_cfg)


# ---------------------------------------------------------------------------
# Trainer.

class HlcTrainer:
    """PPO over high-level transitions with the skill stack frozen."""

    def __init__(self, cfg: HlcConfig, bundle: PolicyBundle, ds: MotionDataset,
                 sim_cfg: SimConfig | None = None):
        self.cfg = cfg
        self.bundle = bundle
        self.ds = ds
        self.frozen_fingerprint = bundle.fingerprint
        self.env = make_env(cfg, bundle, ds, sim_cfg)
        s_policy, s_value = np.random.SeedSequence(cfg.seed).generate_state(2)
        self.policy = MlpGaussianPolicy(
            self.env.obs_dim, self.env.latent_dim, cfg.policy_hidden,
            init_log_std=float(np.log(cfg.sigma)), learn_std=False,
            seed=int(s_policy))
        self.value = MlpValue(self.env.obs_dim, cfg.value_hidden, seed=int(s_value))
        self.adam_actor = AdamState.init(self.policy.theta.size, cfg.lr_actor,
                                         name="hl_actor", dtype="float64")
        self.adam_critic = AdamState.init(self.value.theta.size, cfg.lr_critic,
                                          name="hl_critic", dtype="float64")
        self.rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 11)))
        self.obs = self.env.reset(self.rng)
        self.iteration = 0
        self.total_hl_steps = 0

    def iterate(self) -> dict:
        t0 = time.perf_counter()
        cfg = self.cfg
        N, T = cfg.n_envs, cfg.rollout_len
        obs_buf = np.empty((T, N, self.env.obs_dim))
        act_buf = np.empty((T, N, self.env.latent_dim))
        logp_buf = np.empty((T, N))
        rew_buf = np.empty((T, N))
        done_buf = np.empty((T, N))
        val_buf = np.empty((T, N))
        for t in range(T):
            actions, logp, _ = self.policy.act(self.obs, self.rng)
            values, _ = self.value.value(self.obs)
            nxt, rewards, dones = self.env.step(actions, self.rng)
            obs_buf[t], act_buf[t], logp_buf[t] = self.obs, actions, logp
            rew_buf[t], done_buf[t], val_buf[t] = rewards, dones, values
            self.obs = nxt
        last_values, _ = self.value.value(self.obs)
        adv, rets = gae(rew_buf, val_buf, done_buf, last_values, cfg.gamma, cfg.lam)
        batch = {
            "obs": obs_buf.reshape(-1, self.env.obs_dim),
            "actions": act_buf.reshape(-1, self.env.latent_dim),
            "logp_old": logp_buf.ravel(),
            "adv": adv.ravel(),
            "returns": rets.ravel(),
        }
        stats = ppo_update_plain(self.policy, self.value, batch, cfg.ppo(),
                                 self.adam_actor, self.adam_critic, self.rng)
        if self.bundle.fingerprint != self.frozen_fingerprint:
            raise AssertionError("frozen low-level parameters drifted during "
                                 "high-level training")
        self.iteration += 1
        self.total_hl_steps += T * N
        return {
            "iteration": self.iteration,
            "hl_steps": self.total_hl_steps,
            "reward_mean": float(rew_buf.mean()),
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "skipped": stats["skipped"],
            "elapsed": time.perf_counter() - t0,
        }

    def state_dict(self) -> tuple[dict, dict]:
        arrays = {
            "policy_theta": self.policy.theta.copy(),
            "value_theta": self.value.theta.copy(),
            "adam_actor_m": self.adam_actor.m.copy(),
            "adam_actor_v": self.adam_actor.v.copy(),
            "adam_critic_m": self.adam_critic.m.copy(),
            "adam_critic_v": self.adam_critic.v.copy(),
            "cur_obs": self.obs.copy(),
        }
        arrays.update(self.env.state_arrays())
        if isinstance(self.env, HeadingEnv):
            arrays["anchors"] = self.env.anchors.copy()
        extra = {
            "iteration": self.iteration,
            "total_hl_steps": self.total_hl_steps,
            "rng_state": self.rng.bit_generator.state,
            "adam_steps": {"actor": self.adam_actor.step,
                           "critic": self.adam_critic.step},
            "pretrain_fingerprint": self.frozen_fingerprint,
            "obs_dim": self.env.obs_dim,
            "latent_dim": self.env.latent_dim,
        }
        return arrays, extra

    def load_state(self, arrays: dict, extra: dict) -> None:
        if extra["pretrain_fingerprint"] != self.frozen_fingerprint:
            raise ValueError(
                "checkpoint was trained against a different frozen stack: "
                f"stored {extra['pretrain_fingerprint'][:12]}…, "
                f"loaded bundle {self.frozen_fingerprint[:12]}…")
        self.policy.theta = arrays["policy_theta"]
        self.value.theta = arrays["value_theta"]
        self.adam_actor.m = np.array(arrays["adam_actor_m"])
        self.adam_actor.v = np.array(arrays["adam_actor_v"])
        self.adam_critic.m = np.array(arrays["adam_critic_m"])
        self.adam_critic.v = np.array(arrays["adam_critic_v"])
        self.adam_actor.step = int(extra["adam_steps"]["actor"])
        self.adam_critic.step = int(extra["adam_steps"]["critic"])
        self.obs = np.array(arrays["cur_obs"])
        self.env.load_arrays(arrays)
        self.iteration = int(extra["iteration"])
        self.total_hl_steps = int(extra["total_hl_steps"])
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = extra["rng_state"]


# ---------------------------------------------------------------------------
# Driver.

CHECKPOINT_KIND = "hlc"


def save_hlc(trainer: HlcTrainer, path: str | Path) -> Path:
    arrays, extra = trainer.state_dict()
    return save_checkpoint(path, CHECKPOINT_KIND, trainer.cfg.to_dict(),
                           arrays, extra)


def load_hlc(path: str | Path, bundle: PolicyBundle, ds: MotionDataset,
             sim_cfg: SimConfig | None = None) -> HlcTrainer:
    meta, arrays = load_checkpoint(path)
    if meta["kind"] != CHECKPOINT_KIND:
        raise ValueError(f"checkpoint kind {meta['kind']!r} is not {CHECKPOINT_KIND!r}")
    cfg = HlcConfig.from_dict(meta["config"])
    trainer = HlcTrainer(cfg, bundle, ds, sim_cfg)
    trainer.load_state(arrays, meta["extra"])
    return trainer


def train_highlevel(cfg: HlcConfig, bundle: PolicyBundle, ds: MotionDataset,
                    out_dir: str | Path, resume: str | Path | None = None,
                    force: bool = False, log_every: int = 10,
                    sim_cfg: SimConfig | None = None) -> dict:
    """Train the high-level policy until cfg.total_hl_steps transitions.

    Mirrors the pretraining driver: JSONL curve, rolling checkpoints, and
    a last-good checkpoint preserved on a non-finite abort.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        load_checkpoint(resume, expect_config=cfg.to_dict(), force=force)
        trainer = load_hlc(resume, bundle, ds, sim_cfg)
    else:
        trainer = HlcTrainer(cfg, bundle, ds, sim_cfg)
    curve_path = out_dir / "curve.jsonl"
    mode = "a" if resume is not None else "w"
    last_good: tuple[dict, dict] | None = None
    with open(curve_path, mode) as curve:
        while trainer.total_hl_steps < cfg.total_hl_steps:
            try:
                stats = trainer.iterate()
                bad = [k for k, v in stats.items()
                       if isinstance(v, float) and not np.isfinite(v)]
                if bad:
                    raise FloatingPointError(f"non-finite stats: {bad}")
            except FloatingPointError as exc:
                if last_good is not None:
                    abort_path = out_dir / "checkpoint_abort.npz"
                    save_checkpoint(abort_path, CHECKPOINT_KIND, cfg.to_dict(),
                                    last_good[0], last_good[1])
                    raise RuntimeError(
                        f"training aborted ({exc}); last good state in {abort_path}"
                    ) from exc
                raise RuntimeError(f"training aborted on first iteration ({exc})") from exc
            curve.write(json.dumps(stats) + "\n")
            curve.flush()
            last_good = trainer.state_dict()
            if trainer.iteration % cfg.checkpoint_every == 0:
                save_hlc(trainer, out_dir / "checkpoint_latest.npz")
            if log_every and trainer.iteration % log_every == 0:
                logger.info("iter %d hl_steps %d reward %.3f",
                            stats["iteration"], stats["hl_steps"],
                            stats["reward_mean"])
    final = save_hlc(trainer, out_dir / "checkpoint_final.npz")
    return {"checkpoint": str(final), "iterations": trainer.iteration,
            "hl_steps": trainer.total_hl_steps, "curve": str(curve_path)}


# ---------------------------------------------------------------------------
# Inference bundle.

@dataclass
class HighLevelBundle:
    """Trained high-level controller plus everything needed to drive it."""
    cfg: HlcConfig
    policy: MlpGaussianPolicy
    anchors: np.ndarray | None      # (S, d) for heading mode, else None
    pretrain_fingerprint: str

    def verify_frozen(self, bundle: PolicyBundle) -> None:
        if bundle.fingerprint != self.pretrain_fingerprint:
            raise ValueError(
                "high-level controller was trained against a different "
                f"frozen stack: stored {self.pretrain_fingerprint[:12]}…, "
                f"given {bundle.fingerprint[:12]}…")

    @property
    def fingerprint(self) -> str:
        return theta_fingerprint(self.policy.theta)

    def command(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic latent command: mean action, projected."""
        mu, _ = self.policy.mlp.forward(obs)
        return project_sphere(np.asarray(mu, dtype=np.float64))


def load_hl_bundle(path: str | Path) -> HighLevelBundle:
    meta, arrays = load_checkpoint(path)
    if meta["kind"] != CHECKPOINT_KIND:
        raise ValueError(f"checkpoint kind {meta['kind']!r} is not {CHECKPOINT_KIND!r}")
    cfg = HlcConfig.from_dict(meta["config"])
    extra = meta["extra"]
    policy = MlpGaussianPolicy(int(extra["obs_dim"]), int(extra["latent_dim"]),
                               cfg.policy_hidden,
                               init_log_std=float(np.log(cfg.sigma)),
                               learn_std=False)
    policy.theta = arrays["policy_theta"]
    anchors = np.array(arrays["anchors"]) if "anchors" in arrays else None
    return HighLevelBundle(cfg=cfg, policy=policy, anchors=anchors,
                           pretrain_fingerprint=extra["pretrain_fingerprint"])


# ---------------------------------------------------------------------------
# Heading evaluation.

def evaluate_heading(hl: HighLevelBundle, bundle: PolicyBundle,
                     ds: MotionDataset, clf=None, n_episodes: int = 32,
                     hl_steps: int = 60, seed: int = 0,
                     sim_cfg: SimConfig | None = None) -> dict:
    """Deterministic rollouts under the training command distribution.

    Reports the mean cosine between commanded direction and velocity over
    every tick with speed above EPS_V, and (given a trustworthy window
    classifier) the fraction of episodes whose rollout windows classify
    as the commanded style.
    """
    if hl.cfg.mode != "heading":
        raise ValueError(f"evaluate_heading needs a heading checkpoint, "
                         f"got mode {hl.cfg.mode!r}")
    hl.verify_frozen(bundle)
    cfg = dataclasses.replace(hl.cfg, n_envs=n_episodes, horizon=hl_steps)
    env = HeadingEnv(bundle.encoder, bundle.policy, ds, cfg, sim_cfg)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 23)))
    obs = env.reset(rng)
    style_idx = env.style_idx.copy()

    cos_sum, cos_n = 0.0, 0
    track = np.empty((n_episodes, hl_steps * HL_RATIO, OBS_DIM))
    env.recorder = []
    for t in range(hl_steps):
        # redirects land between decisions, so this dstar governs all 5 ticks
        dstar_t = env.dstar.copy()
        obs, _, _ = env.step(hl.command(obs), rng)
        for k, states in enumerate(env.recorder):
            tick = t * HL_RATIO + k
            track[:, tick] = observe_batch(states)
            v = states[:, 3:5]
            speed = np.linalg.norm(v, axis=1)
            ok = speed > EPS_V
            cos = np.sum(v[ok] * dstar_t[ok], axis=1) / speed[ok]
            cos_sum += float(np.sum(cos))
            cos_n += int(np.count_nonzero(ok))
        env.recorder = []
    env.recorder = None

    out = {
        "mean_cosine": cos_sum / max(cos_n, 1),
        "n_episodes": n_episodes,
        "speed_coverage": cos_n / (n_episodes * hl_steps * HL_RATIO),
        "style_accuracy": None,
        "per_style": None,
    }
    if clf is not None:
        from .metrics import _require_trustworthy, rollout_posteriors
        _require_trustworthy(clf)
        posts = rollout_posteriors(clf, track)
        clf_index = np.array([clf.styles.index(s) for s in cfg.styles])
        hit = np.argmax(posts, axis=1) == clf_index[style_idx]
        out["style_accuracy"] = float(np.mean(hit))
        out["per_style"] = {
            style: float(np.mean(hit[style_idx == i]))
            for i, style in enumerate(cfg.styles) if np.any(style_idx == i)
        }
    return out
