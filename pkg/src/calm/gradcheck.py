"""Finite-difference verification of every differentiable path in the
stack, runnable from the CLI and the acceptance suite.

Each entry builds a small float64 instance of one module, wraps a scalar
loss with its analytic parameter (or input) gradient, and compares random
coordinates against central differences. Small widths keep the whole
suite fast; the code paths are the production ones.
"""

from __future__ import annotations

import time

import numpy as np

from .hlc import locomotion_reward_grads
from .models import Discriminator, Encoder, GaussianPolicy, ValueNet
from .nn import LatentHeadSpec, Mlp, MlpSpec, grad_check, sample_sphere_uniform
from .pretrain import discriminator_terms, encoder_regularizers

TOLERANCE = 1e-4

_HEAD = LatentHeadSpec(6, (8,))


def _unit_rows(rng, n, d):
    return sample_sphere_uniform(d, rng, n)


def _encoder_entry(rng):
    enc = Encoder(24, 6, hidden=(16,), seed=1, dtype="float64")
    x = rng.normal(size=(5, 24))
    w = rng.normal(size=(5, 6))

    def fn(theta):
        z, cache = enc.encode(x, theta=theta)
        return float(np.sum(w * z)), enc.backward(cache, w)

    return fn, enc.theta.copy()


def _policy_entry(rng):
    pol = GaussianPolicy(16, 8, _HEAD, hidden=(16,), seed=2, dtype="float64")
    obs = rng.normal(size=(4, 16))
    z = _unit_rows(rng, 4, 6)
    act = rng.normal(size=(4, 8))

    def fn(theta):
        pol.theta = theta
        logp, mu, cache = pol.log_prob(obs, z, act)
        dtheta, _ = pol.backward_logprob(cache, mu, act, np.ones(len(logp)))
        return float(np.sum(logp)), dtheta

    return fn, pol.theta.copy()


def _discriminator_entry(rng):
    disc = Discriminator(20, _HEAD, hidden=(16,), seed=3, dtype="float64")
    real_w, fake_w, neg_w = (rng.normal(size=(4, 20)) for _ in range(3))
    real_z, fake_z, neg_z = (_unit_rows(rng, 4, 6) for _ in range(3))

    def fn(theta):
        disc.theta = theta
        parts, dtheta = discriminator_terms(disc, real_w, real_z, fake_w,
                                            fake_z, neg_w, neg_z, w_gp=5.0)
        return parts["total"], dtheta

    return fn, disc.theta.copy()


def _value_entry(rng):
    val = ValueNet(16, _HEAD, hidden=(16,), seed=4, dtype="float64")
    obs = rng.normal(size=(5, 16))
    z = _unit_rows(rng, 5, 6)
    w = rng.normal(size=5)

    def fn(theta):
        val.theta = theta
        v, cache = val.value(obs, z)
        return float(np.sum(w * np.ravel(v))), val.backward(cache, w.reshape(-1, 1))

    return fn, val.theta.copy()


def _regularizer_entry(rng, w_align, w_uniform):
    enc = Encoder(24, 6, hidden=(16,), seed=5, dtype="float64")
    pairs = {k: rng.normal(size=(6, 24))
             for k in ("overlap_a", "overlap_b", "iid_a", "iid_b")}

    def fn(theta):
        l_align, l_uniform, dtheta = encoder_regularizers(
            enc, pairs, w_align, w_uniform, theta=theta)
        return w_align * l_align + w_uniform * l_uniform, dtheta

    return fn, enc.theta.copy()


def _locomotion_entry(rng):
    dstar = _unit_rows(rng, 1, 2)[0]
    anchor = _unit_rows(rng, 1, 6)[0]
    v0 = rng.normal(size=2) * 1.5
    z0 = rng.normal(size=6)

    def fn(x):
        v, z = x[:2], x[2:]
        r, dv, dz = locomotion_reward_grads(v[None], dstar[None], z[None],
                                            anchor[None])
        return float(r[0]), np.concatenate([dv[0], dz[0]])

    return fn, np.concatenate([v0, z0])


def _plain_mlp_entry(rng):
    # the high-level policy and task value heads are plain MLPs
    mlp = Mlp(MlpSpec(widths=(12, 16, 4), activation="relu", seed=6,
                      dtype="float64"))
    x = rng.normal(size=(5, 12))
    w = rng.normal(size=(5, 4))

    def fn(theta):
        y, cache = mlp.forward(x, theta=theta)
        _, dtheta = mlp.backward(cache, w)
        return float(np.sum(w * y)), dtheta

    return fn, mlp.theta.copy()


ENTRIES = {
    "encoder_projection": _encoder_entry,
    "policy_logprob": _policy_entry,
    "discriminator_with_penalty": _discriminator_entry,
    "value_head": _value_entry,
    "alignment_regularizer": lambda rng: _regularizer_entry(rng, 1.0, 0.0),
    "uniformity_regularizer": lambda rng: _regularizer_entry(rng, 0.0, 1.0),
    "locomotion_reward": _locomotion_entry,
    "plain_mlp_policy": _plain_mlp_entry,
}


def run_suite(probes: int = 25, seed: int = 0) -> dict:
    """Returns {'entries': {name: max_rel_error}, 'worst', 'elapsed', 'ok'}."""
    t0 = time.time()
    results = {}
    for name, build in ENTRIES.items():
        rng = np.random.default_rng(np.random.SeedSequence((seed, hash(name) % 2**31)))
        fn, x0 = build(rng)
        report = grad_check(fn, np.asarray(x0, dtype=np.float64), rng,
                            probes=probes)
        results[name] = report["max_rel_error"]
    worst = max(results.values())
    return {"entries": results, "worst": worst,
            "elapsed": time.time() - t0, "ok": worst < TOLERANCE}
