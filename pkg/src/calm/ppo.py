"""PPO building blocks: GAE, advantage normalization, clipped-surrogate
gradients, and a small trainer for plain Gaussian policies on vectorized
environments.

The latent-conditioned pretraining loop lives in pretrain.py and reuses the
pieces here; the plain trainer below drives the point-mass sanity check and
the high-level controller (whose "action" is a pre-projection latent).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .models import LOG_STD_MAX, LOG_STD_MIN, GaussianPolicy
from .nn import AdamState, Mlp, MlpSpec, adam_step

log = logging.getLogger("calm.ppo")

RATIO_LOG_CAP = 10.0


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    entropy_coef: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma={self.gamma} outside [0, 1)")
        bad = [n for n in ("lam", "clip", "epochs", "minibatch", "lr_actor", "lr_critic")
               if getattr(self, n) <= 0]
        if bad:
            raise ValueError(f"PpoConfig fields must be positive: {', '.join(bad)}")


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        last_values: np.ndarray, gamma: float, lam: float):
    """Generalized advantage estimation over time-major (K, N) arrays.

    `dones[t]` marks that step t ended its episode; the bootstrap value for
    the final step comes from `last_values`. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    K = rewards.shape[0]
    adv = np.zeros_like(rewards)
    carry = np.zeros(rewards.shape[1:], dtype=np.float64)
    for t in range(K - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        next_v = last_values if t == K - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        carry = delta + gamma * lam * nonterminal * carry
        adv[t] = carry
    return adv, adv + values


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + eps)


def clip_objective(ratio: np.ndarray, adv: np.ndarray, clip: float):
    """Per-sample clipped surrogate objective and its d/dlogp.

    objective_i = min(rho*A, clip(rho, 1-c, 1+c)*A); gradient flows through
    the unclipped branch only where it is the active minimum.
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    objective = np.minimum(unclipped, clipped)
    live = np.where(adv >= 0, ratio < 1.0 + clip, ratio > 1.0 - clip)
    dlogp = np.where(live, ratio * adv, 0.0)
    return objective, dlogp


# ---------------------------------------------------------------------------
# Plain (latent-free) Gaussian policy and value nets.

class MlpGaussianPolicy:
    """Diagonal Gaussian with MLP mean; log-std is a free parameter unless
    frozen (the high-level controller uses a fixed exploration scale)."""

    def __init__(self, obs_dim: int, action_dim: int, hidden=(64, 64),
                 init_log_std: float = -0.5, learn_std: bool = True,
                 seed: int = 0, dtype: str = "float32"):
        self.mlp = Mlp(MlpSpec(widths=(obs_dim, *hidden, action_dim), activation="relu",
                               final_gain=0.01, seed=seed, dtype=dtype))
        self.action_dim = action_dim
        self.learn_std = learn_std
        self.log_std = np.full(action_dim, init_log_std, dtype=self.mlp.dtype)
        self.n_params = self.mlp.n_params + (action_dim if learn_std else 0)
        self.dtype = self.mlp.dtype

    @property
    def theta(self) -> np.ndarray:
        if self.learn_std:
            return np.concatenate([self.mlp.theta, self.log_std])
        return self.mlp.theta

    @theta.setter
    def theta(self, value: np.ndarray):
        value = np.asarray(value, dtype=self.dtype)
        if self.learn_std:
            self.mlp.theta = value[: self.mlp.n_params].copy()
            self.log_std = value[self.mlp.n_params:].copy()
        else:
            self.mlp.theta = value.copy()

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)).astype(np.float64)

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        mu, _ = self.mlp.forward(obs)
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        sigma = self.std()
        action = mu + sigma * rng.standard_normal(mu.shape)
        logp = GaussianPolicy._log_prob_from(mu, action, sigma)
        return action, logp, mu

    def log_prob(self, obs: np.ndarray, action: np.ndarray):
        mu, cache = self.mlp.forward(obs)
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        logp = GaussianPolicy._log_prob_from(mu, np.atleast_2d(action), self.std())
        return logp, mu, cache

    def backward_logprob(self, cache, mu, action, dlogp):
        sigma = self.std()
        action = np.atleast_2d(np.asarray(action, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        dlogp = np.asarray(dlogp, dtype=np.float64).reshape(-1, 1)
        u = (action - mu) / sigma
        dmu = dlogp * (u / sigma)
        _, dmlp = self.mlp.backward(cache, dmu.astype(self.dtype))
        if not self.learn_std:
            return dmlp
        gate = ((self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX)).astype(np.float64)
        dls = np.sum(dlogp * (u * u - 1.0), axis=0) * gate
        return np.concatenate([dmlp, dls.astype(self.dtype)])


class MlpValue:
    def __init__(self, obs_dim: int, hidden=(64, 64), seed: int = 0, dtype: str = "float32"):
        self.mlp = Mlp(MlpSpec(widths=(obs_dim, *hidden, 1), activation="relu",
                               seed=seed, dtype=dtype))
        self.n_params = self.mlp.n_params
        self.dtype = self.mlp.dtype

    @property
    def theta(self) -> np.ndarray:
        return self.mlp.theta

    @theta.setter
    def theta(self, value: np.ndarray):
        self.mlp.theta = np.asarray(value, dtype=self.dtype).copy()

    def value(self, obs: np.ndarray):
        v, cache = self.mlp.forward(obs)
        return np.atleast_2d(np.asarray(v, dtype=np.float64))[:, 0], cache

    def backward(self, cache, dv):
        dv = np.asarray(dv, dtype=self.dtype).reshape(-1, 1)
        _, dtheta = self.mlp.backward(cache, dv)
        return dtheta


def ppo_update_plain(policy: MlpGaussianPolicy, valuenet: MlpValue, batch: dict,
                     cfg: PpoConfig, adam_actor: AdamState, adam_critic: AdamState,
                     rng: np.random.Generator) -> dict:
    """Epochs of shuffled minibatch updates on a flat batch.

    batch: obs (B, o), actions (B, a), logp_old (B,), adv (B,), returns (B,).
    Minibatches whose importance ratio exploded (|log rho| > 10) are skipped.
    """
    B = batch["obs"].shape[0]
    adv = normalize_advantages(batch["adv"])
    stats = {"policy_loss": [], "value_loss": [], "skipped": 0}
    for _ in range(cfg.epochs):
        order = rng.permutation(B)
        for lo in range(0, B, cfg.minibatch):
            idx = order[lo: lo + cfg.minibatch]
            obs = batch["obs"][idx]
            act = batch["actions"][idx]
            logp, mu, cache = policy.log_prob(obs, act)
            log_rho = logp - batch["logp_old"][idx]
            if np.max(np.abs(log_rho)) > RATIO_LOG_CAP:
                log.warning("ppo: skipping minibatch, |log ratio| %.2f > %.0f",
                            float(np.max(np.abs(log_rho))), RATIO_LOG_CAP)
                stats["skipped"] += 1
                continue
            ratio = np.exp(log_rho)
            objective, dlogp_obj = clip_objective(ratio, adv[idx], cfg.clip)
            m = idx.size
            # minimize -objective: upstream on logp is -d(objective)/dlogp / m
            dtheta = policy.backward_logprob(cache, mu, act, -dlogp_obj / m)
            policy.theta = adam_step(adam_actor, policy.theta, dtheta)
            stats["policy_loss"].append(-float(objective.mean()))

            v, vcache = valuenet.value(obs)
            verr = v - batch["returns"][idx]
            dv = valuenet.backward(vcache, verr / m)
            valuenet.theta = adam_step(adam_critic, valuenet.theta, dv)
            stats["value_loss"].append(0.5 * float(np.mean(verr ** 2)))
    return {k: (float(np.mean(v)) if isinstance(v, list) and v else v)
            for k, v in stats.items()}


def train_plain_ppo(env, policy: MlpGaussianPolicy, valuenet: MlpValue,
                    cfg: PpoConfig, rollout_len: int, total_steps: int,
                    rng: np.random.Generator, log_every: int = 0) -> list[dict]:
    """Alternate rollout collection and PPO updates until total_steps."""
    obs = env.reset(rng)
    N = obs.shape[0]
    history = []
    steps = 0
    it = 0
    while steps < total_steps:
        obs_buf = np.empty((rollout_len, N, obs.shape[1]))
        act_buf = np.empty((rollout_len, N, policy.action_dim))
        logp_buf = np.empty((rollout_len, N))
        rew_buf = np.empty((rollout_len, N))
        done_buf = np.empty((rollout_len, N))
        val_buf = np.empty((rollout_len, N))
        for t in range(rollout_len):
            actions, logp, _ = policy.act(obs, rng)
            values, _ = valuenet.value(obs)
            nxt, rewards, dones = env.step(actions, rng)
            obs_buf[t], act_buf[t], logp_buf[t] = obs, actions, logp
            rew_buf[t], done_buf[t], val_buf[t] = rewards, dones, values
            obs = nxt
        last_values, _ = valuenet.value(obs)
        adv, rets = gae(rew_buf, val_buf, done_buf, last_values, cfg.gamma, cfg.lam)
        batch = {
            "obs": obs_buf.reshape(-1, obs.shape[1]),
            "actions": act_buf.reshape(-1, policy.action_dim),
            "logp_old": logp_buf.ravel(),
            "adv": adv.ravel(),
            "returns": rets.ravel(),
        }
        stats = ppo_update_plain(policy, valuenet, batch, cfg, self_adam(policy, cfg),
                                 self_adam(valuenet, cfg, critic=True), rng)
        steps += rollout_len * N
        it += 1
        stats["iteration"] = it
        stats["steps"] = steps
        stats["mean_reward"] = float(rew_buf.mean())
        history.append(stats)
        if log_every and it % log_every == 0:
            log.info("iter %d steps %d mean_reward %.4f", it, steps, stats["mean_reward"])
    return history


def self_adam(model, cfg: PpoConfig, critic: bool = False) -> AdamState:
    """Adam state pinned onto the model instance so the loop above stays
    stateless for callers."""
    attr = "_adam"
    if not hasattr(model, attr):
        lr = cfg.lr_critic if critic else cfg.lr_actor
        setattr(model, attr, AdamState.init(model.theta.size, lr,
                                            name=type(model).__name__, dtype="float64"))
    return getattr(model, attr)


# ---------------------------------------------------------------------------
# Point-mass sanity environment: damped 2-D mass rewarded for +x velocity.

class PointMassEnv:
    """Vectorized toy: obs = velocity (2,), action = acceleration (2,),
    reward = v_x after the step. The optimal policy saturates +x thrust."""

    def __init__(self, n_envs: int, accel_max: float = 4.0, damping: float = 1.2,
                 dt: float = 1.0 / 30.0, horizon: int = 150):
        self.n = n_envs
        self.accel_max = accel_max
        self.damping = damping
        self.dt = dt
        self.horizon = horizon
        self.vel = np.zeros((n_envs, 2))
        self.t = np.zeros(n_envs, dtype=int)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.vel = np.zeros((self.n, 2))
        self.t = np.zeros(self.n, dtype=int)
        return self.vel.copy()

    def step(self, actions: np.ndarray, rng: np.random.Generator):
        a = np.clip(actions, -self.accel_max, self.accel_max)
        norm = np.linalg.norm(a, axis=1, keepdims=True)
        a = np.where(norm > self.accel_max, a * (self.accel_max / np.maximum(norm, 1e-30)), a)
        self.vel = self.vel + (a - self.damping * self.vel) * self.dt
        self.t += 1
        rewards = self.vel[:, 0].copy()
        dones = self.t >= self.horizon
        if np.any(dones):
            self.vel[dones] = 0.0
            self.t[dones] = 0
        return self.vel.copy(), rewards, dones.astype(np.float64)

    def optimal_mean_reward(self) -> float:
        """Greedy full-throttle +x rollout; exact optimum for this env."""
        v = 0.0
        total = 0.0
        for _ in range(self.horizon):
            v = v + (self.accel_max - self.damping * v) * self.dt
            total += v
        return total / self.horizon
