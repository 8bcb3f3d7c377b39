"""Adversarial imitation pretraining: jointly trains the motion encoder,
the latent-conditioned low-level policy, and the conditional discriminator.

The training loop alternates three phases per iteration:

1. rollout: N parallel characters act under per-character latents; each
   latent is the encoding of a reference sub-motion and is resampled with a
   small per-step probability plus at every episode reset. The style reward
   for a step scores the trailing window of observations against the
   character's current latent.
2. discriminator update: matched real windows (drawn from the sub-motion
   that produced the conditioning latent) vs. policy windows, plus a
   negative term pairing real windows with random latents so the
   discriminator must actually read its conditioning. A gradient penalty on
   the pre-sigmoid logit at real samples keeps it smooth. Latents enter this
   phase as plain arrays: no gradient ever reaches the encoder from here.
3. PPO update: clipped-surrogate policy step where the latent of every
   sample is re-encoded from its source sub-motion, so policy gradients
   flow end-to-end into the encoder, together with alignment/uniformity
   regularizers on the sphere. The value net conditions on the rollout
   latents as constants.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .models import (
    Discriminator,
    Encoder,
    GaussianPolicy,
    ValueNet,
)
from .motion import (
    TRANSITION_FRAMES,
    WINDOW_FRAMES,
    MotionDataset,
    sample_pair,
    sample_submotion,
    submotion_features,
)
from .nn import AdamState, LatentHeadSpec, adam_step, sample_sphere_uniform
from .ppo import RATIO_LOG_CAP, clip_objective, gae, normalize_advantages
from .sim import ACTION_DIM, OBS_DIM, SimConfig, observe_batch, step_batch

logger = logging.getLogger("calm.pretrain")

# discriminator probability clamp inside the log terms
EPS_D = 1e-4


# ---------------------------------------------------------------------------
# Configuration.

@dataclass
class PretrainConfig:
    latent_dim: int = 64
    n_envs: int = 64
    rollout_len: int = 32
    horizon: int = 300
    total_steps: int = 500_000

    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    lr_disc: float = 3e-4
    lr_encoder: float = 3e-4
    init_log_std: float = -0.5

    w_gp: float = 5.0
    w_align: float = 0.5
    w_uniform: float = 0.5
    p_switch: float = 1.0 / 100.0
    disc_batch: int = 256
    disc_updates: int = 2
    reg_pairs: int = 32

    # exploration-noise schedule, as fractions of total_steps. The floor
    # stays moderate: tiny sigma makes PPO importance ratios explosive.
    final_log_std: float = -1.2
    anneal_start: float = 0.25
    anneal_end: float = 0.75

    enc_hidden: tuple[int, ...] = (256, 128)
    policy_hidden: tuple[int, ...] = (512, 256)
    disc_hidden: tuple[int, ...] = (512, 256)
    value_hidden: tuple[int, ...] = (512, 256)
    head_widths: tuple[int, ...] = (64,)

    use_negatives: bool = True
    use_regularizers: bool = True
    negatives_from_policy: bool = False

    seed: int = 0
    checkpoint_every: int = 200

    def __post_init__(self):
        for name in ("latent_dim", "n_envs", "rollout_len", "horizon", "total_steps",
                     "epochs", "minibatch", "disc_batch", "disc_updates", "reg_pairs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.p_switch < 1.0:
            raise ValueError("p_switch must be in [0, 1)")
        if not 0.0 <= self.anneal_start <= self.anneal_end <= 1.0:
            raise ValueError("need 0 <= anneal_start <= anneal_end <= 1")
        for name in ("enc_hidden", "policy_hidden", "disc_hidden", "value_hidden",
                     "head_widths"):
            value = tuple(int(w) for w in getattr(self, name))
            if any(w <= 0 for w in value):
                raise ValueError(f"{name} must be positive widths")
            object.__setattr__(self, name, value)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @staticmethod
    def from_dict(data: dict) -> "PretrainConfig":
        kwargs = dict(data)
        for k, v in kwargs.items():
            if isinstance(v, list):
                kwargs[k] = tuple(v)
        return PretrainConfig(**kwargs)


FEATURE_DIM = WINDOW_FRAMES * OBS_DIM
WINDOW_DIM = TRANSITION_FRAMES * OBS_DIM


def build_models(cfg: PretrainConfig):
    """Encoder, policy, value, discriminator with per-model derived seeds."""
    seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
    head = LatentHeadSpec(cfg.latent_dim, cfg.head_widths)
    enc = Encoder(FEATURE_DIM, cfg.latent_dim, hidden=cfg.enc_hidden, seed=int(seeds[0]))
    policy = GaussianPolicy(OBS_DIM, ACTION_DIM, head, hidden=cfg.policy_hidden,
                            init_log_std=cfg.init_log_std, seed=int(seeds[1]))
    value = ValueNet(OBS_DIM, head, hidden=cfg.value_hidden, seed=int(seeds[2]))
    disc = Discriminator(WINDOW_DIM, head, hidden=cfg.disc_hidden, seed=int(seeds[3]))
    return enc, policy, value, disc


def theta_fingerprint(*arrays: np.ndarray) -> str:
    """sha256 over the exact bytes of the given parameter vectors."""
    import hashlib
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Style reward.

def style_reward(disc: Discriminator, windows: np.ndarray, z: np.ndarray,
                 eps: float = EPS_D) -> np.ndarray:
    """r = -log(1 - min(D, 1-eps)). Zero at D=0, capped at -log(eps)."""
    d = disc.predict(windows, z)
    return -np.log(1.0 - np.minimum(d, 1.0 - eps))


# ---------------------------------------------------------------------------
# Discriminator loss.

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def discriminator_terms(disc: Discriminator,
                        real_w: np.ndarray, real_z: np.ndarray,
                        fake_w: np.ndarray, fake_z: np.ndarray,
                        neg_w: np.ndarray | None = None,
                        neg_z: np.ndarray | None = None,
                        w_gp: float = 0.0,
                        eps: float = EPS_D) -> tuple[dict, np.ndarray]:
    """Binary-cross-entropy terms, gradient penalty, and parameter gradient.

    Probabilities are clamped to [eps, 1-eps] inside the logs, so the loss
    stays finite at saturation; the penalty acts on the pre-sigmoid logit.
    Latents are consumed as constants: no gradient is returned for them.
    """
    logit_r, cache_r = disc.logits(real_w, real_z)
    logit_f, cache_f = disc.logits(fake_w, fake_z)
    for tag, lg in (("real", logit_r), ("fake", logit_f)):
        if not np.all(np.isfinite(lg)):
            bad = np.flatnonzero(~np.isfinite(lg)).tolist()
            raise FloatingPointError(
                f"non-finite discriminator logits in {tag} batch at indices {bad}")
    p_r = _sigmoid(logit_r)
    p_f = _sigmoid(logit_f)
    b_r, b_f = len(logit_r), len(logit_f)

    loss_real = float(-np.mean(np.log(np.clip(p_r, eps, 1.0 - eps))))
    loss_fake = float(-np.mean(np.log(1.0 - np.clip(p_f, eps, 1.0 - eps))))
    in_band_r = (p_r > eps) & (p_r < 1.0 - eps)
    in_band_f = (p_f > eps) & (p_f < 1.0 - eps)
    dlogit_r = np.where(in_band_r, -(1.0 - p_r), 0.0) / b_r
    dlogit_f = np.where(in_band_f, p_f, 0.0) / b_f

    _, _, dtheta = disc.net.backward(cache_r, dlogit_r.reshape(-1, 1).astype(disc.dtype))
    _, _, dth_f = disc.net.backward(cache_f, dlogit_f.reshape(-1, 1).astype(disc.dtype))
    dtheta = dtheta + dth_f

    loss_neg = 0.0
    if neg_w is not None:
        logit_n, cache_n = disc.logits(neg_w, neg_z)
        p_n = _sigmoid(logit_n)
        b_n = len(logit_n)
        loss_neg = float(-np.mean(np.log(1.0 - np.clip(p_n, eps, 1.0 - eps))))
        in_band_n = (p_n > eps) & (p_n < 1.0 - eps)
        dlogit_n = np.where(in_band_n, p_n, 0.0) / b_n
        _, _, dth_n = disc.net.backward(cache_n, dlogit_n.reshape(-1, 1).astype(disc.dtype))
        dtheta = dtheta + dth_n

    ones = np.ones((b_r, 1), dtype=disc.dtype)
    g = disc.net.input_grad_x(cache_r, ones)
    gp = float(np.mean(np.sum(np.asarray(g, dtype=np.float64) ** 2, axis=1)))
    if w_gp != 0.0:
        _, dth_gp = disc.net.double_backward_x(cache_r, g, rbar=w_gp * 2.0 / b_r)
        dtheta = dtheta + dth_gp

    parts = {
        "real": loss_real,
        "fake": loss_fake,
        "neg": loss_neg,
        "gp": gp,
        "total": loss_real + loss_fake + loss_neg + w_gp * gp,
        "mean_d_real": float(np.mean(p_r)),
        "mean_d_fake": float(np.mean(p_f)),
    }
    return parts, dtheta


def disc_update(disc: Discriminator, adam: AdamState, *args, **kwargs) -> dict:
    parts, dtheta = discriminator_terms(disc, *args, **kwargs)
    disc.theta = adam_step(adam, disc.theta, np.asarray(dtheta, dtype=disc.dtype))
    return parts


# ---------------------------------------------------------------------------
# Encoder regularizers.

def regularizer_pairs(ds: MotionDataset, rng: np.random.Generator,
                      n_pairs: int) -> dict[str, np.ndarray]:
    """Feature matrices for `n_pairs` overlapping and `n_pairs` iid pairs."""
    def feats(mode):
        a = np.empty((n_pairs, FEATURE_DIM))
        b = np.empty((n_pairs, FEATURE_DIM))
        for i in range(n_pairs):
            s1, s2 = sample_pair(ds, rng, mode)
            a[i] = submotion_features(s1)
            b[i] = submotion_features(s2)
        return a, b
    oa, ob = feats("overlapping")
    ia, ib = feats("iid")
    return {"overlap_a": oa, "overlap_b": ob, "iid_a": ia, "iid_b": ib}


def alignment_loss(za: np.ndarray, zb: np.ndarray):
    """mean ||za_i - zb_i||^2 over paired codes; returns (loss, dza, dzb)."""
    za = np.atleast_2d(np.asarray(za, dtype=np.float64))
    zb = np.atleast_2d(np.asarray(zb, dtype=np.float64))
    n = za.shape[0]
    diff = za - zb
    loss = float(np.mean(np.sum(diff ** 2, axis=1)))
    dza = 2.0 * diff / n
    return loss, dza, -dza


def uniformity_loss(za: np.ndarray, zb: np.ndarray):
    """log mean exp(-2 ||za_i - zb_i||^2) over iid pairs; (loss, dza, dzb)."""
    za = np.atleast_2d(np.asarray(za, dtype=np.float64))
    zb = np.atleast_2d(np.asarray(zb, dtype=np.float64))
    diff = za - zb
    d2 = np.sum(diff ** 2, axis=1)
    e = np.exp(-2.0 * d2)
    loss = float(np.log(np.mean(e)))
    # d loss / d d2_i = -2 e_i / sum(e)
    dza = (-2.0 * e / np.sum(e))[:, None] * 2.0 * diff
    return loss, dza, -dza


def encoder_regularizers(enc: Encoder, pairs: dict[str, np.ndarray],
                         w_align: float, w_uniform: float,
                         theta: np.ndarray | None = None):
    """Alignment + uniformity on the sphere, with the exact gradient of
    w_align * L_align + w_uniform * L_uniform through the projection.

    Returns (L_align, L_uniform, dtheta).
    """
    n = pairs["overlap_a"].shape[0]
    stacked = np.concatenate([pairs["overlap_a"], pairs["overlap_b"],
                              pairs["iid_a"], pairs["iid_b"]], axis=0)
    z, cache = enc.encode(stacked, theta=theta)
    z = np.asarray(z, dtype=np.float64)

    l_align, da_a, da_b = alignment_loss(z[:n], z[n:2 * n])
    l_uniform, du_a, du_b = uniformity_loss(z[2 * n:3 * n], z[3 * n:])
    dz = np.concatenate([w_align * da_a, w_align * da_b,
                         w_uniform * du_a, w_uniform * du_b], axis=0)
    dtheta = enc.backward(cache, dz)
    return l_align, l_uniform, dtheta


# ---------------------------------------------------------------------------
# Trainer.

class PretrainTrainer:
    """Holds all mutable training state; one `iterate()` = rollout +
    discriminator updates + PPO/encoder updates."""

    def __init__(self, cfg: PretrainConfig, ds: MotionDataset,
                 sim_cfg: SimConfig | None = None):
        self.cfg = cfg
        self.ds = ds
        self.sim_cfg = sim_cfg or SimConfig()
        self.encoder, self.policy, self.value, self.disc = build_models(cfg)
        self.adam_enc = AdamState.init(self.encoder.n_params, cfg.lr_encoder, "encoder")
        self.adam_policy = AdamState.init(self.policy.n_params, cfg.lr_actor, "policy")
        self.adam_value = AdamState.init(self.value.n_params, cfg.lr_critic, "value")
        self.adam_disc = AdamState.init(self.disc.n_params, cfg.lr_disc, "disc")
        self.rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))

        # Discriminator inputs are standardized per observation channel over
        # the reference data. The gradient penalty is isotropic in input
        # units, so without this a narrow-range channel (posture spans 0.65,
        # velocities span 5) is taxed into invisibility no matter how
        # discriminative it is.
        ref_obs = observe_batch(np.concatenate([c.frames for c in ds.clips]))
        self.win_mu = np.tile(ref_obs.mean(axis=0), TRANSITION_FRAMES)
        self.win_sd = np.tile(ref_obs.std(axis=0) + 1e-6, TRANSITION_FRAMES)

        N = cfg.n_envs
        H = TRANSITION_FRAMES
        self.states = np.zeros((N, 16))
        self.env_feats = np.zeros((N, FEATURE_DIM))
        self.env_frames = np.zeros((N, WINDOW_FRAMES, 16))
        self.env_padded = np.zeros(N, dtype=np.int64)
        self.env_z = np.zeros((N, cfg.latent_dim))
        self.obs_hist = np.zeros((N, H, OBS_DIM))
        self.cur_obs = np.zeros((N, OBS_DIM))
        self.ep_steps = np.zeros(N, dtype=np.int64)
        self.iteration = 0
        self.total_env_steps = 0
        self._init_envs()

    # -- environment bookkeeping ------------------------------------------

    def _resample_submotions(self, idx: np.ndarray) -> None:
        if len(idx) == 0:
            return
        feats = np.empty((len(idx), FEATURE_DIM))
        for j, i in enumerate(idx):
            sub = sample_submotion(self.ds, self.rng)
            feats[j] = submotion_features(sub)
            self.env_frames[i] = sub.frames
            self.env_padded[i] = sub.padded
        z, _ = self.encoder.encode(feats)
        self.env_feats[idx] = feats
        self.env_z[idx] = np.asarray(z, dtype=np.float64)

    def _reset_envs(self, idx: np.ndarray) -> None:
        """Fresh episodes start inside the window that conditions them: the
        reset state is a random real frame of the sampled sub-motion, so the
        sampled latent is in-style from the first step. Cross-style
        transitions are still exercised, by the mid-episode latent switches,
        which keep the state and swap the goal."""
        if len(idx) == 0:
            return
        self._resample_submotions(idx)
        for i in idx:
            real = WINDOW_FRAMES - int(self.env_padded[i])
            st = self.env_frames[i, self.rng.integers(real)].copy()
            st[0:2] = 0.0   # world position is irrelevant to every objective
            st[15] = 0.0
            self.states[i] = st
        obs = observe_batch(self.states[idx])
        self.cur_obs[idx] = obs
        self.obs_hist[idx] = obs[:, None, :]
        self.ep_steps[idx] = 0

    def _init_envs(self) -> None:
        self._reset_envs(np.arange(self.cfg.n_envs))

    # -- phase 1: rollout --------------------------------------------------

    def collect_rollout(self) -> dict:
        cfg = self.cfg
        K, N, H = cfg.rollout_len, cfg.n_envs, TRANSITION_FRAMES
        table_feats = [self.env_feats[i].copy() for i in range(N)]
        table_frames = [self.env_frames[i].copy() for i in range(N)]
        table_padded = [int(self.env_padded[i]) for i in range(N)]
        env_row = np.arange(N)

        def push_rows(idx):
            nonlocal env_row
            for i in idx:
                table_feats.append(self.env_feats[i].copy())
                table_frames.append(self.env_frames[i].copy())
                table_padded.append(int(self.env_padded[i]))
                env_row[i] = len(table_feats) - 1

        obs = np.zeros((K, N, OBS_DIM))
        zs = np.zeros((K, N, cfg.latent_dim))
        actions = np.zeros((K, N, ACTION_DIM))
        logps = np.zeros((K, N))
        values = np.zeros((K, N))
        rewards = np.zeros((K, N))
        dones = np.zeros((K, N), dtype=bool)
        switches = np.zeros((K, N), dtype=bool)
        rows = np.zeros((K, N), dtype=np.int64)
        windows = np.zeros((K, N, WINDOW_DIM))

        for t in range(K):
            if cfg.p_switch > 0.0:
                switch = np.flatnonzero(self.rng.random(N) < cfg.p_switch)
                if len(switch):
                    self._resample_submotions(switch)
                    push_rows(switch)
                    switches[t, switch] = True
            obs[t] = self.cur_obs
            zs[t] = self.env_z
            rows[t] = env_row
            act, logp, _ = self.policy.act(self.cur_obs, self.env_z, self.rng)
            v, _ = self.value.value(self.cur_obs, self.env_z)
            actions[t] = act
            logps[t] = logp
            values[t] = v

            self.states = step_batch(self.states, act, self.sim_cfg)
            new_obs = observe_batch(self.states)
            self.obs_hist = np.concatenate([self.obs_hist[:, 1:], new_obs[:, None]], axis=1)
            self.cur_obs = new_obs
            win = (self.obs_hist.reshape(N, H * OBS_DIM) - self.win_mu) / self.win_sd
            windows[t] = win
            rewards[t] = style_reward(self.disc, win, self.env_z)
            self.ep_steps += 1
            done = self.ep_steps >= cfg.horizon
            dones[t] = done
            if np.any(done):
                idx = np.flatnonzero(done)
                self._reset_envs(idx)
                push_rows(idx)

        last_values, _ = self.value.value(self.cur_obs, self.env_z)
        self.total_env_steps += K * N
        return {
            "obs": obs, "z": zs, "actions": actions, "logp": logps,
            "values": values, "rewards": rewards, "dones": dones,
            "switches": switches, "rows": rows, "windows": windows,
            "last_values": last_values,
            "table_feats": np.asarray(table_feats),
            "table_frames": np.asarray(table_frames),
            "table_padded": np.asarray(table_padded, dtype=np.int64),
        }

    # -- phase 2: discriminator -------------------------------------------

    @staticmethod
    def _table_observations(frames: np.ndarray, padded: np.ndarray) -> np.ndarray:
        U, W, _ = frames.shape
        obs = observe_batch(frames.reshape(U * W, 16)).reshape(U, W, OBS_DIM)
        for u in np.flatnonzero(padded > 0):
            obs[u, W - padded[u]:] = 0.0
        return obs

    def disc_phase(self, batch: dict) -> dict:
        cfg = self.cfg
        H = TRANSITION_FRAMES
        win_flat = batch["windows"].reshape(-1, WINDOW_DIM)
        z_flat = batch["z"].reshape(-1, cfg.latent_dim)
        rows_flat = batch["rows"].reshape(-1)
        table_obs = self._table_observations(batch["table_frames"], batch["table_padded"])

        stats: dict[str, float] = {}
        for _ in range(cfg.disc_updates):
            idx = self.rng.integers(0, len(win_flat), size=cfg.disc_batch)
            fake_w = win_flat[idx]
            cond_z = z_flat[idx]
            r = rows_flat[idx]
            real_len = WINDOW_FRAMES - batch["table_padded"][r]
            hi = real_len - H
            if np.any(hi < 0):
                raise ValueError("reference sub-motion shorter than one transition window")
            starts = self.rng.integers(0, hi + 1)
            gather = starts[:, None] + np.arange(H)
            real_w = (table_obs[r[:, None], gather].reshape(len(idx), WINDOW_DIM)
                      - self.win_mu) / self.win_sd

            neg_w = neg_z = None
            if cfg.use_negatives:
                neg_w = fake_w if cfg.negatives_from_policy else real_w
                neg_z = sample_sphere_uniform(cfg.latent_dim, self.rng, len(idx))
            parts = disc_update(self.disc, self.adam_disc, real_w, cond_z,
                                fake_w, cond_z, neg_w, neg_z, w_gp=cfg.w_gp)
            for k, v in parts.items():
                stats[k] = stats.get(k, 0.0) + v / cfg.disc_updates
        return stats

    # -- phase 3: PPO + encoder -------------------------------------------

    def ppo_phase(self, batch: dict) -> dict:
        cfg = self.cfg
        adv, rets = gae(batch["rewards"], batch["values"], batch["dones"],
                        batch["last_values"], cfg.gamma, cfg.lam)
        adv = normalize_advantages(adv).reshape(-1)
        rets = rets.reshape(-1)
        obs = batch["obs"].reshape(-1, OBS_DIM)
        actions = batch["actions"].reshape(-1, ACTION_DIM)
        logp_old = batch["logp"].reshape(-1)
        z_roll = batch["z"].reshape(-1, cfg.latent_dim)
        rows = batch["rows"].reshape(-1)
        table_feats = batch["table_feats"]
        B = len(obs)

        stats = {"policy_obj": 0.0, "value_loss": 0.0, "align": 0.0, "uniform": 0.0,
                 "skipped": 0, "minibatches": 0}
        order = np.arange(B)
        for _ in range(cfg.epochs):
            self.rng.shuffle(order)
            for lo in range(0, B - cfg.minibatch + 1, cfg.minibatch):
                idx = order[lo:lo + cfg.minibatch]
                m = len(idx)
                uniq, inverse = np.unique(rows[idx], return_inverse=True)
                z_u, ecache = self.encoder.encode(table_feats[uniq])
                z_mb = np.asarray(z_u, dtype=np.float64)[inverse]

                logp, mu, pcache = self.policy.log_prob(obs[idx], z_mb, actions[idx])
                log_rho = logp - logp_old[idx]
                if np.max(np.abs(log_rho)) > RATIO_LOG_CAP:
                    logger.warning("skipping minibatch: |log ratio| %.2f exceeds %.1f",
                                   float(np.max(np.abs(log_rho))), RATIO_LOG_CAP)
                    stats["skipped"] += 1
                    continue
                ratio = np.exp(log_rho)
                objective, dlogp_obj = clip_objective(ratio, adv[idx], cfg.clip)
                dtheta_pol, dz = self.policy.backward_logprob(
                    pcache, mu, actions[idx], -dlogp_obj / m)
                self.policy.theta = adam_step(
                    self.adam_policy, self.policy.theta,
                    np.asarray(dtheta_pol, dtype=self.policy.dtype))

                dz_u = np.zeros((len(uniq), cfg.latent_dim))
                np.add.at(dz_u, inverse, dz)
                dtheta_enc = self.encoder.backward(ecache, dz_u)
                if cfg.use_regularizers:
                    pairs = regularizer_pairs(self.ds, self.rng, cfg.reg_pairs)
                    la, lu, dth_reg = encoder_regularizers(
                        self.encoder, pairs, cfg.w_align, cfg.w_uniform)
                    dtheta_enc = dtheta_enc + dth_reg
                    stats["align"] += la
                    stats["uniform"] += lu
                self.encoder.theta = adam_step(
                    self.adam_enc, self.encoder.theta,
                    np.asarray(dtheta_enc, dtype=self.encoder.mlp.dtype))

                v, vcache = self.value.value(obs[idx], z_roll[idx])
                verr = v - rets[idx]
                dtheta_val = self.value.backward(vcache, 2.0 * verr / m)
                self.value.theta = adam_step(
                    self.adam_value, self.value.theta,
                    np.asarray(dtheta_val, dtype=self.value.dtype))

                stats["policy_obj"] += float(np.mean(objective))
                stats["value_loss"] += float(np.mean(verr ** 2))
                stats["minibatches"] += 1
        mb = max(stats["minibatches"], 1)
        for k in ("policy_obj", "value_loss", "align", "uniform"):
            stats[k] /= mb
        return stats

    # -- one iteration -----------------------------------------------------

    def scheduled_log_std(self) -> float:
        """Exploration noise, annealed linearly over the middle of training.

        Left free, action noise is a shortcut cue: the discriminator can
        reject rollout windows by their jitter alone, which the policy
        cannot remove, and the style reward goes flat. Annealing removes
        the cue, so late training judges structure, not noise."""
        cfg = self.cfg
        frac = self.total_env_steps / max(cfg.total_steps, 1)
        if frac <= cfg.anneal_start:
            u = 0.0
        elif frac >= cfg.anneal_end:
            u = 1.0
        else:
            u = (frac - cfg.anneal_start) / (cfg.anneal_end - cfg.anneal_start)
        return cfg.init_log_std + u * (cfg.final_log_std - cfg.init_log_std)

    def iterate(self) -> dict:
        t0 = time.perf_counter()
        self.policy.log_std[:] = self.scheduled_log_std()
        batch = self.collect_rollout()
        enc_before = self.encoder.theta.copy()
        disc_stats = self.disc_phase(batch)
        if not np.array_equal(self.encoder.theta, enc_before):
            raise AssertionError("discriminator phase must not touch the encoder")
        ppo_stats = self.ppo_phase(batch)
        self.iteration += 1
        stats = {
            "iteration": self.iteration,
            "env_steps": self.total_env_steps,
            "reward_mean": float(np.mean(batch["rewards"])),
            "elapsed": time.perf_counter() - t0,
        }
        stats.update({f"disc_{k}": v for k, v in disc_stats.items()})
        stats.update(ppo_stats)
        return stats

    # -- (de)serialization -------------------------------------------------

    def state_dict(self) -> tuple[dict, dict]:
        arrays = {
            "enc_theta": self.encoder.theta.copy(),
            "policy_theta": self.policy.theta.copy(),
            "value_theta": self.value.theta.copy(),
            "disc_theta": self.disc.theta.copy(),
            "env_states": self.states.copy(),
            "env_feats": self.env_feats.copy(),
            "env_frames": self.env_frames.copy(),
            "env_padded": self.env_padded.copy(),
            "env_z": self.env_z.copy(),
            "obs_hist": self.obs_hist.copy(),
            "cur_obs": self.cur_obs.copy(),
            "ep_steps": self.ep_steps.copy(),
        }
        for tag, adam in (("enc", self.adam_enc), ("policy", self.adam_policy),
                          ("value", self.adam_value), ("disc", self.adam_disc)):
            arrays[f"adam_{tag}_m"] = adam.m.copy()
            arrays[f"adam_{tag}_v"] = adam.v.copy()
        extra = {
            "iteration": self.iteration,
            "total_env_steps": self.total_env_steps,
            "rng_state": self.rng.bit_generator.state,
            "adam_steps": {tag: adam.step for tag, adam in
                           (("enc", self.adam_enc), ("policy", self.adam_policy),
                            ("value", self.adam_value), ("disc", self.adam_disc))},
        }
        return arrays, extra

    def load_state(self, arrays: dict, extra: dict) -> None:
        self.encoder.theta = arrays["enc_theta"]
        self.policy.theta = arrays["policy_theta"]
        self.value.theta = arrays["value_theta"]
        self.disc.theta = arrays["disc_theta"]
        self.states = np.array(arrays["env_states"])
        self.env_feats = np.array(arrays["env_feats"])
        self.env_frames = np.array(arrays["env_frames"])
        self.env_padded = np.array(arrays["env_padded"])
        self.env_z = np.array(arrays["env_z"])
        self.obs_hist = np.array(arrays["obs_hist"])
        self.cur_obs = np.array(arrays["cur_obs"])
        self.ep_steps = np.array(arrays["ep_steps"])
        for tag, adam in (("enc", self.adam_enc), ("policy", self.adam_policy),
                          ("value", self.adam_value), ("disc", self.adam_disc)):
            adam.m = np.array(arrays[f"adam_{tag}_m"])
            adam.v = np.array(arrays[f"adam_{tag}_v"])
            adam.step = int(extra["adam_steps"][tag])
        self.iteration = int(extra["iteration"])
        self.total_env_steps = int(extra["total_env_steps"])
        state = extra["rng_state"]
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = state


# ---------------------------------------------------------------------------
# Driver.

CHECKPOINT_KIND = "pretrain"


def save_trainer(trainer: PretrainTrainer, path: str | Path) -> Path:
    arrays, extra = trainer.state_dict()
    return save_checkpoint(path, CHECKPOINT_KIND, trainer.cfg.to_dict(), arrays, extra)


def load_trainer(path: str | Path, ds: MotionDataset,
                 force: bool = False) -> PretrainTrainer:
    meta, arrays = load_checkpoint(path, expect_config=None)
    if meta["kind"] != CHECKPOINT_KIND:
        raise ValueError(f"checkpoint kind {meta['kind']!r} is not {CHECKPOINT_KIND!r}")
    cfg = PretrainConfig.from_dict(meta["config"])
    trainer = PretrainTrainer(cfg, ds)
    trainer.load_state(arrays, meta["extra"])
    return trainer


def pretrain(cfg: PretrainConfig, ds: MotionDataset, out_dir: str | Path,
             resume: str | Path | None = None, force: bool = False,
             log_every: int = 10) -> dict:
    """Run the training loop until `cfg.total_steps` environment steps.

    Writes a JSONL training curve and rolling checkpoints under `out_dir`.
    A non-finite gradient aborts the run but the last completed iteration's
    checkpoint survives as `checkpoint_abort.npz`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        meta, _ = load_checkpoint(resume, expect_config=cfg.to_dict(), force=force)
        trainer = load_trainer(resume, ds, force=force)
    else:
        trainer = PretrainTrainer(cfg, ds)
    curve_path = out_dir / "curve.jsonl"
    mode = "a" if resume is not None else "w"
    last_good: tuple[dict, dict] | None = None
    with open(curve_path, mode) as curve:
        while trainer.total_env_steps < cfg.total_steps:
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
                save_trainer(trainer, out_dir / "checkpoint_latest.npz")
            if log_every and trainer.iteration % log_every == 0:
                logger.info("iter %d steps %d reward %.3f disc %.3f",
                            stats["iteration"], stats["env_steps"],
                            stats["reward_mean"], stats.get("disc_total", float("nan")))
    final = save_trainer(trainer, out_dir / "checkpoint_final.npz")
    return {"checkpoint": str(final), "iterations": trainer.iteration,
            "env_steps": trainer.total_env_steps, "curve": str(curve_path)}


# ---------------------------------------------------------------------------
# Downstream access to a trained bundle.

@dataclass
class PolicyBundle:
    """Frozen result of pretraining, as consumed by every later stage."""
    cfg: PretrainConfig
    encoder: Encoder
    policy: GaussianPolicy
    value: ValueNet
    disc: Discriminator

    @property
    def fingerprint(self) -> str:
        return theta_fingerprint(self.encoder.theta, self.policy.theta)


def load_bundle(path: str | Path) -> PolicyBundle:
    meta, arrays = load_checkpoint(path)
    if meta["kind"] != CHECKPOINT_KIND:
        raise ValueError(f"checkpoint kind {meta['kind']!r} is not {CHECKPOINT_KIND!r}")
    cfg = PretrainConfig.from_dict(meta["config"])
    enc, policy, value, disc = build_models(cfg)
    enc.theta = arrays["enc_theta"]
    policy.theta = arrays["policy_theta"]
    value.theta = arrays["value_theta"]
    disc.theta = arrays["disc_theta"]
    return PolicyBundle(cfg=cfg, encoder=enc, policy=policy, value=value, disc=disc)
