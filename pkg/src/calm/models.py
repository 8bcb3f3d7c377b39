"""Model zoo: motion encoder, latent-conditioned Gaussian policy,
conditional discriminator, and value function.

Every model packs its parameters into one flat vector (`theta`) so a single
Adam state drives it and checkpoints stay a dict of named arrays. The
latent-conditioned nets share one composite shape: a small linear head
parses the latent, and the trunk consumes [x, head(z)].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    LatentHeadSpec,
    Mlp,
    MlpSpec,
    project_sphere,
    project_sphere_backward,
)

LOG_STD_MIN = -4.0
LOG_STD_MAX = 1.0

ENCODER_HIDDEN = (256, 128)
POLICY_HIDDEN = (512, 256)
DISC_HIDDEN = (512, 256)
VALUE_HIDDEN = (512, 256)
HEAD_WIDTHS = (64,)


class Encoder:
    """Flattened sub-motion features -> unit-sphere latent."""

    def __init__(self, in_dim: int, latent_dim: int, hidden=ENCODER_HIDDEN,
                 seed: int = 0, dtype: str = "float32"):
        self.latent_dim = latent_dim
        self.mlp = Mlp(MlpSpec(widths=(in_dim, *hidden, latent_dim), activation="relu",
                               seed=seed, dtype=dtype))
        self.n_params = self.mlp.n_params

    @property
    def theta(self) -> np.ndarray:
        return self.mlp.theta

    @theta.setter
    def theta(self, value: np.ndarray):
        self.mlp.theta = value

    def encode(self, features: np.ndarray, theta: np.ndarray | None = None):
        """Returns (z, cache); z rows are unit-norm."""
        v, cache = self.mlp.forward(features, theta=theta)
        z = project_sphere(np.asarray(v, dtype=np.float64))
        cache["pre_projection"] = np.asarray(v, dtype=np.float64)
        return z.astype(self.mlp.dtype), cache

    def backward(self, cache, dz: np.ndarray) -> np.ndarray:
        """Chain dz through the sphere projection into MLP parameters."""
        dv = project_sphere_backward(cache["pre_projection"], np.asarray(dz, dtype=np.float64))
        _, dtheta = self.mlp.backward(cache, dv.astype(self.mlp.dtype))
        return dtheta


class LatentConditionedNet:
    """trunk([x, head(z)]) with gradients to x, z, and all parameters."""

    def __init__(self, x_dim: int, head_spec: LatentHeadSpec, trunk_hidden,
                 out_dim: int, activation: str = "relu", out_activation: str = "none",
                 final_gain: float | None = None, seed: int = 0, dtype: str = "float32"):
        self.x_dim = x_dim
        self.head = Mlp(MlpSpec(widths=(head_spec.latent_dim, *head_spec.widths),
                                activation=activation, seed=seed, dtype=dtype))
        head_out = head_spec.widths[-1]
        self.trunk = Mlp(MlpSpec(widths=(x_dim + head_out, *trunk_hidden, out_dim),
                                 activation=activation, out_activation=out_activation,
                                 final_gain=final_gain, seed=seed + 1, dtype=dtype))
        self.n_params = self.head.n_params + self.trunk.n_params
        self.dtype = self.trunk.dtype

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.head.theta, self.trunk.theta])

    @theta.setter
    def theta(self, value: np.ndarray):
        value = np.asarray(value, dtype=self.dtype)
        if value.size != self.n_params:
            raise ValueError(f"theta size {value.size} != {self.n_params}")
        self.head.theta = value[: self.head.n_params].copy()
        self.trunk.theta = value[self.head.n_params:].copy()

    def forward(self, x: np.ndarray, z: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=self.dtype))
        z = np.atleast_2d(np.asarray(z, dtype=self.dtype))
        if z.shape[0] == 1 and x.shape[0] > 1:
            z = np.broadcast_to(z, (x.shape[0], z.shape[1]))
        e, head_cache = self.head.forward(z)
        c = np.concatenate([x, np.atleast_2d(e)], axis=1)
        y, trunk_cache = self.trunk.forward(c)
        cache = {"head": head_cache, "trunk": trunk_cache, "x_dim": x.shape[1]}
        return y, cache

    def backward(self, cache, dy: np.ndarray):
        """Returns (dx, dz, dtheta)."""
        dc, dtrunk = self.trunk.backward(cache["trunk"], dy)
        dc = np.atleast_2d(dc)
        dx = dc[:, : cache["x_dim"]]
        de = dc[:, cache["x_dim"]:]
        dz, dhead = self.head.backward(cache["head"], de)
        return dx, dz, np.concatenate([dhead, dtrunk])

    def input_grad_x(self, cache, dy: np.ndarray) -> np.ndarray:
        dc = self.trunk.input_grad(cache["trunk"], dy)
        return np.atleast_2d(dc)[:, : cache["x_dim"]]

    def double_backward_x(self, cache, v_x: np.ndarray, rbar: float):
        """Parameter gradient of sum(rbar * J_x y . v_x).

        Tangent enters only through x (latents are conditioning constants),
        so the head's tangent is identically zero and its parameters pick up
        gradient solely through the primal adjoint of the concat input.
        """
        v_x = np.atleast_2d(np.asarray(v_x, dtype=self.dtype))
        head_out = self.head.spec.out_dim
        v_c = np.concatenate([v_x, np.zeros((v_x.shape[0], head_out), dtype=self.dtype)], axis=1)
        Ry, dtrunk, _, xbar_c = self.trunk.double_backward(cache["trunk"], v_c, rbar=rbar)
        xbar_e = np.atleast_2d(xbar_c)[:, cache["x_dim"]:]
        _, dhead = self.head.backward(cache["head"], xbar_e)
        return Ry, np.concatenate([dhead, dtrunk])


LOG_2PI = float(np.log(2.0 * np.pi))


class GaussianPolicy:
    """Diagonal Gaussian over actions; mean from the composite net,
    log-std a free state-independent parameter clamped to [-4, 1]."""

    def __init__(self, obs_dim: int, action_dim: int, head_spec: LatentHeadSpec,
                 hidden=POLICY_HIDDEN, init_log_std: float = -0.5,
                 seed: int = 0, dtype: str = "float32"):
        self.net = LatentConditionedNet(obs_dim, head_spec, hidden, action_dim,
                                        final_gain=0.01, seed=seed, dtype=dtype)
        self.action_dim = action_dim
        self.log_std = np.full(action_dim, init_log_std, dtype=dtype)
        self.n_params = self.net.n_params + action_dim
        self.dtype = self.net.dtype

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.net.theta, self.log_std])

    @theta.setter
    def theta(self, value: np.ndarray):
        value = np.asarray(value, dtype=self.dtype)
        self.net.theta = value[: self.net.n_params]
        self.log_std = value[self.net.n_params:].copy()

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)).astype(np.float64)

    def mean(self, obs: np.ndarray, z: np.ndarray):
        return self.net.forward(obs, z)

    def act(self, obs: np.ndarray, z: np.ndarray, rng: np.random.Generator):
        """Sample actions; returns (action, logp, mean)."""
        mu, _ = self.net.forward(obs, z)
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        sigma = self.std()
        noise = rng.standard_normal(mu.shape)
        action = mu + sigma * noise
        logp = self._log_prob_from(mu, action, sigma)
        return action, logp, mu

    def log_prob(self, obs: np.ndarray, z: np.ndarray, action: np.ndarray):
        mu, cache = self.net.forward(obs, z)
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        logp = self._log_prob_from(mu, np.atleast_2d(action), self.std())
        return logp, mu, cache

    @staticmethod
    def _log_prob_from(mu: np.ndarray, action: np.ndarray, sigma: np.ndarray) -> np.ndarray:
        u = (action - mu) / sigma
        return (-0.5 * np.sum(u * u, axis=1) - np.sum(np.log(sigma))
                - 0.5 * mu.shape[1] * LOG_2PI)

    def backward_logprob(self, cache, mu: np.ndarray, action: np.ndarray,
                         dlogp: np.ndarray):
        """Chain per-sample upstream dlogp through log-prob into parameters.

        Returns (dtheta, dz). dz is what flows on to the encoder when the
        latent was produced end-to-end.
        """
        sigma = self.std()
        action = np.atleast_2d(np.asarray(action, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        dlogp = np.asarray(dlogp, dtype=np.float64).reshape(-1, 1)
        u = (action - mu) / sigma
        dmu = dlogp * (u / sigma)
        # d logp / d log_std_k = u_k^2 - 1, gated by the clamp
        gate = ((self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX)).astype(np.float64)
        dlog_std = np.sum(dlogp * (u * u - 1.0), axis=0) * gate
        _, dz, dnet = self.net.backward(cache, dmu.astype(self.dtype))
        dtheta = np.concatenate([dnet, dlog_std.astype(self.dtype)])
        return dtheta, dz


class Discriminator:
    """Conditional discriminator over transition windows; trunk emits a
    logit, predictions go through sigmoid."""

    def __init__(self, window_dim: int, head_spec: LatentHeadSpec,
                 hidden=DISC_HIDDEN, seed: int = 0, dtype: str = "float32"):
        self.net = LatentConditionedNet(window_dim, head_spec, hidden, 1,
                                        seed=seed, dtype=dtype)
        self.n_params = self.net.n_params
        self.dtype = self.net.dtype

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta

    @theta.setter
    def theta(self, value: np.ndarray):
        self.net.theta = value

    def logits(self, windows: np.ndarray, z: np.ndarray):
        y, cache = self.net.forward(windows, z)
        return np.atleast_2d(np.asarray(y, dtype=np.float64))[:, 0], cache

    def predict(self, windows: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Sigmoid probability that (window, z) is a matched real pair."""
        logit, _ = self.logits(windows, z)
        return 1.0 / (1.0 + np.exp(-logit))


class ValueNet:
    """V(obs, z) -> scalar."""

    def __init__(self, obs_dim: int, head_spec: LatentHeadSpec,
                 hidden=VALUE_HIDDEN, seed: int = 0, dtype: str = "float32"):
        self.net = LatentConditionedNet(obs_dim, head_spec, hidden, 1,
                                        seed=seed, dtype=dtype)
        self.n_params = self.net.n_params
        self.dtype = self.net.dtype

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta

    @theta.setter
    def theta(self, value: np.ndarray):
        self.net.theta = value

    def value(self, obs: np.ndarray, z: np.ndarray):
        y, cache = self.net.forward(obs, z)
        return np.atleast_2d(np.asarray(y, dtype=np.float64))[:, 0], cache

    def backward(self, cache, dv: np.ndarray) -> np.ndarray:
        dv = np.asarray(dv, dtype=self.dtype).reshape(-1, 1)
        _, _, dtheta = self.net.backward(cache, dv)
        return dtheta
