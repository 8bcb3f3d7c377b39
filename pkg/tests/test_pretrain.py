"""Adversarial pretraining: loss identities, discriminator optimality,
stop-gradient, rollout bookkeeping, determinism, and checkpoint flow."""

import json
import math

import numpy as np
import pytest

from calm.checkpoint import load_checkpoint
from calm.models import Discriminator, Encoder
from calm.motion import default_style_suite
from calm.nn import LatentHeadSpec, grad_check
from calm.pretrain import (
    EPS_D,
    PolicyBundle,
    PretrainConfig,
    PretrainTrainer,
    alignment_loss,
    build_models,
    discriminator_terms,
    encoder_regularizers,
    load_bundle,
    load_trainer,
    pretrain,
    regularizer_pairs,
    save_trainer,
    style_reward,
    theta_fingerprint,
    uniformity_loss,
)


@pytest.fixture(scope="module")
def two_style_ds():
    return default_style_suite(0, styles=["walk", "run"])


def tiny_cfg(**over) -> PretrainConfig:
    base = dict(latent_dim=8, n_envs=16, rollout_len=16, horizon=100,
                total_steps=16 * 16 * 2, minibatch=64, disc_batch=64,
                reg_pairs=8, enc_hidden=(64, 32), policy_hidden=(64, 64),
                disc_hidden=(64, 64), value_hidden=(64, 64), head_widths=(16,),
                seed=0)
    base.update(over)
    return PretrainConfig(**base)


def zeroed_disc(window_dim=6, d=4, dtype="float64") -> Discriminator:
    disc = Discriminator(window_dim, LatentHeadSpec(d, (4,)), hidden=(8,), dtype=dtype)
    disc.theta = np.zeros_like(disc.theta)
    return disc


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Analytic identities.

def test_style_reward_at_half_is_ln2():
    disc = zeroed_disc()
    rng = np.random.default_rng(0)
    w = rng.standard_normal((5, 6))
    z = unit_rows(rng, 5, 4)
    r = style_reward(disc, w, z)
    assert np.all(np.abs(r - math.log(2.0)) < 1e-9)


def linear_logit_disc(g, window_dim, d=2):
    """Discriminator computing logit = g.x exactly (relu pairs trick);
    the latent head is zeroed out so conditioning is ignored."""
    disc = Discriminator(window_dim, LatentHeadSpec(d, (2,)),
                         hidden=(2 * window_dim,), dtype="float64")
    g = np.asarray(g, dtype=np.float64)
    theta = np.zeros_like(disc.theta)
    disc.theta = theta
    trunk = disc.net.trunk
    w1 = np.zeros((2 * window_dim, window_dim + 2))
    w1[:window_dim, :window_dim] = np.eye(window_dim)
    w1[window_dim:, :window_dim] = -np.eye(window_dim)
    w2 = np.concatenate([g, -g])[None, :]
    th = trunk.theta.copy()
    th[trunk.segments[0][1]] = w1.ravel()
    th[trunk.segments[2][1]] = w2.ravel()
    trunk.theta = th
    return disc


def test_style_reward_floor_and_ceiling():
    rng = np.random.default_rng(1)
    z = unit_rows(rng, 4, 2)
    w = np.full((4, 3), 1.0)
    # logit -600 -> D = 0 in double precision -> reward exactly 0
    disc = linear_logit_disc([-200.0, -200.0, -200.0], 3)
    assert np.all(style_reward(disc, w, z) == 0.0)
    # logit +600 -> D = 1 -> clamped at 1 - eps -> reward -ln(eps)
    disc = linear_logit_disc([200.0, 200.0, 200.0], 3)
    assert np.all(np.abs(style_reward(disc, w, z) + math.log(EPS_D)) < 1e-9)


def test_disc_loss_balanced_identity():
    disc = zeroed_disc()
    rng = np.random.default_rng(2)
    w = rng.standard_normal((7, 6))
    z = unit_rows(rng, 7, 4)
    parts, _ = discriminator_terms(disc, w, z, w, z, w, unit_rows(rng, 7, 4), w_gp=0.0)
    assert abs(parts["total"] - 3.0 * math.log(2.0)) < 1e-9
    parts, _ = discriminator_terms(disc, w, z, w, z, w_gp=0.0)
    assert abs(parts["total"] - 2.0 * math.log(2.0)) < 1e-9


def test_disc_loss_perfect_floor():
    # saturated correct predictions on all three batches hit the clamp floor
    disc = linear_logit_disc([200.0, 0.0], 2)
    rng = np.random.default_rng(3)
    real_w = np.array([[1.0, 0.5]] * 5)
    fake_w = np.array([[-1.0, 0.5]] * 5)
    z = unit_rows(rng, 5, 2)
    parts, _ = discriminator_terms(disc, real_w, z, fake_w, z,
                                   fake_w, unit_rows(rng, 5, 2), w_gp=0.0)
    floor = 3.0 * math.log(1.0 / (1.0 - EPS_D))
    assert abs(parts["total"] - floor) < 1e-9
    assert abs(floor - 3e-4) < 2e-8


def test_disc_linear_gradient_penalty_closed_form():
    g = np.array([0.3, -0.7, 1.1])
    disc = linear_logit_disc(g, 3)
    rng = np.random.default_rng(4)
    real_w = rng.standard_normal((6, 3)) + 0.01
    fake_w = rng.standard_normal((6, 3)) + 0.01
    z = unit_rows(rng, 6, 2)
    w_gp = 5.0
    parts, _ = discriminator_terms(disc, real_w, z, fake_w, z, w_gp=w_gp)
    assert abs(parts["gp"] - float(np.sum(g * g))) < 1e-9
    expected_bce = parts["real"] + parts["fake"]
    assert abs(parts["total"] - (expected_bce + w_gp * float(np.sum(g * g)))) < 1e-9


def test_disc_loss_full_gradient_matches_fd():
    rng = np.random.default_rng(5)
    disc = Discriminator(5, LatentHeadSpec(3, (4,)), hidden=(8, 6), dtype="float64")
    real_w = rng.standard_normal((4, 5))
    fake_w = rng.standard_normal((4, 5))
    neg_w = rng.standard_normal((4, 5))
    rz, fz, nz = (unit_rows(rng, 4, 3) for _ in range(3))

    def fn(theta):
        disc.theta = theta
        parts, dtheta = discriminator_terms(disc, real_w, rz, fake_w, fz,
                                            neg_w, nz, w_gp=2.5)
        return parts["total"], np.asarray(dtheta, dtype=np.float64)

    report = grad_check(fn, disc.theta.astype(np.float64), rng, probes=15)
    assert report["max_rel_error"] < 1e-4


def test_disc_nonfinite_logit_reports_index():
    disc = zeroed_disc()
    rng = np.random.default_rng(6)
    w = rng.standard_normal((4, 6))
    w[2, 0] = np.inf
    z = unit_rows(rng, 4, 4)
    ok = rng.standard_normal((4, 6))
    with np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError, match=r"real batch at indices \[2\]"):
            discriminator_terms(disc, w, z, ok, z)
        with pytest.raises(FloatingPointError, match="fake batch"):
            discriminator_terms(disc, ok, z, w, z)


# ---------------------------------------------------------------------------
# Discriminator optimality on a frozen discrete toy problem.

def test_disc_converges_to_count_ratio():
    points = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    real_counts = np.array([10, 20, 30, 40])
    fake_counts = np.array([40, 30, 20, 10])
    optimum = real_counts / (real_counts + fake_counts)

    real_w = np.repeat(points, real_counts, axis=0)
    fake_w = np.repeat(points, fake_counts, axis=0)
    z = np.zeros((len(real_w), 2))
    z[:, 0] = 1.0

    disc = Discriminator(2, LatentHeadSpec(2, (4,)), hidden=(32, 32), seed=7)
    from calm.nn import AdamState, adam_step
    adam = AdamState.init(disc.n_params, 3e-3, "toy-disc")
    for _ in range(3000):
        _, dtheta = discriminator_terms(disc, real_w, z, fake_w, z, w_gp=0.0)
        disc.theta = adam_step(adam, disc.theta, np.asarray(dtheta, disc.dtype))

    zq = np.zeros((4, 2))
    zq[:, 0] = 1.0
    d = disc.predict(points, zq)
    assert np.all(np.abs(d - optimum) <= 0.05), (d, optimum)


# ---------------------------------------------------------------------------
# Encoder regularizers.

def test_alignment_uniformity_degenerate_identities():
    z = np.tile(np.array([[0.0, 1.0, 0.0]]), (5, 1))
    la, _, _ = alignment_loss(z, z)
    lu, _, _ = uniformity_loss(z, z)
    assert la == 0.0
    assert abs(lu) < 1e-12


def test_uniformity_antipodal_pair():
    za = np.array([[1.0, 0.0]])
    zb = np.array([[-1.0, 0.0]])
    lu, _, _ = uniformity_loss(za, zb)
    assert abs(lu + 8.0) < 1e-12


def test_regularizer_gradients_match_fd():
    rng = np.random.default_rng(8)
    enc = Encoder(12, 4, hidden=(16, 8), dtype="float64", seed=3)
    pairs = {k: rng.standard_normal((3, 12)) for k in
             ("overlap_a", "overlap_b", "iid_a", "iid_b")}
    for w_align, w_uniform in ((1.0, 0.0), (0.0, 1.0), (0.5, 0.5)):
        def fn(theta):
            la, lu, dtheta = encoder_regularizers(enc, pairs, w_align, w_uniform,
                                                  theta=theta)
            return w_align * la + w_uniform * lu, np.asarray(dtheta, np.float64)
        report = grad_check(fn, enc.theta.astype(np.float64), rng, probes=12)
        assert report["max_rel_error"] < 1e-4, (w_align, w_uniform)


def test_regularizer_pairs_shapes(two_style_ds):
    rng = np.random.default_rng(9)
    pairs = regularizer_pairs(two_style_ds, rng, 6)
    for k in ("overlap_a", "overlap_b", "iid_a", "iid_b"):
        assert pairs[k].shape == (6, 960)
        assert np.all(np.isfinite(pairs[k]))


# ---------------------------------------------------------------------------
# Rollout bookkeeping.

def test_rollout_shapes_rewards_latents(two_style_ds):
    cfg = tiny_cfg()
    tr = PretrainTrainer(cfg, two_style_ds)
    batch = tr.collect_rollout()
    K, N = cfg.rollout_len, cfg.n_envs
    assert batch["obs"].shape == (K, N, 16)
    assert batch["z"].shape == (K, N, cfg.latent_dim)
    assert batch["windows"].shape == (K, N, 160)
    assert np.all(np.isfinite(batch["rewards"]))
    assert np.all(batch["rewards"] >= 0.0)
    assert np.all(batch["rewards"] <= -math.log(EPS_D) + 1e-12)
    norms = np.linalg.norm(batch["z"].reshape(-1, cfg.latent_dim), axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-6
    # row table covers every step's conditioning sub-motion
    assert batch["table_feats"].shape[0] >= N
    assert np.all(batch["rows"] < len(batch["table_feats"]))


def test_p_switch_zero_single_latent_per_episode(two_style_ds):
    cfg = tiny_cfg(p_switch=0.0, horizon=20, rollout_len=45, n_envs=4)
    tr = PretrainTrainer(cfg, two_style_ds)
    batch = tr.collect_rollout()
    assert not np.any(batch["switches"])
    z = batch["z"]
    dones = batch["dones"]
    for i in range(cfg.n_envs):
        for t in range(1, cfg.rollout_len):
            changed = not np.array_equal(z[t, i], z[t - 1, i])
            if changed:
                assert dones[t - 1, i], f"latent changed mid-episode at t={t} env={i}"


def test_p_switch_binomial_rate(two_style_ds):
    cfg = tiny_cfg(p_switch=1.0 / 150.0, n_envs=64, rollout_len=32, horizon=300,
                   total_steps=10 ** 9)
    tr = PretrainTrainer(cfg, two_style_ds)
    n_steps = 0
    switches = 0
    while n_steps < 100_000:
        batch = tr.collect_rollout()
        switches += int(np.sum(batch["switches"]))
        n_steps += cfg.n_envs * cfg.rollout_len
    p = cfg.p_switch
    mean = n_steps * p
    sigma = math.sqrt(n_steps * p * (1 - p))
    assert abs(switches - mean) <= 3 * sigma, (switches, mean, sigma)


def test_constant_disc_gives_constant_reward(two_style_ds):
    cfg = tiny_cfg(rollout_len=8)
    tr = PretrainTrainer(cfg, two_style_ds)
    tr.disc.theta = np.zeros_like(tr.disc.theta)
    tr.value.theta = np.zeros_like(tr.value.theta)
    batch = tr.collect_rollout()
    assert np.all(np.abs(batch["rewards"] - math.log(2.0)) < 1e-12)
    # with V = 0 and no resets, the advantage depends only on the timestep,
    # so a constant reward carries no information about actions
    from calm.ppo import gae
    adv, _ = gae(batch["rewards"], batch["values"], batch["dones"],
                 batch["last_values"], cfg.gamma, cfg.lam)
    spread = np.max(adv, axis=1) - np.min(adv, axis=1)
    assert np.all(spread < 1e-12)


# ---------------------------------------------------------------------------
# Stop-gradient and update mechanics.

def test_disc_phase_never_touches_encoder(two_style_ds):
    cfg = tiny_cfg()
    tr = PretrainTrainer(cfg, two_style_ds)
    for _ in range(3):
        batch = tr.collect_rollout()
        before = tr.encoder.theta.copy()
        tr.disc_phase(batch)
        assert np.array_equal(tr.encoder.theta, before)


def test_iterate_runs_and_reports(two_style_ds):
    cfg = tiny_cfg()
    tr = PretrainTrainer(cfg, two_style_ds)
    stats = tr.iterate()
    for key in ("reward_mean", "disc_total", "policy_obj", "value_loss",
                "align", "uniform"):
        assert key in stats and np.isfinite(stats[key])
    assert stats["minibatches"] > 0


# ---------------------------------------------------------------------------
# Determinism, checkpointing, resume.

def _strip_timing(stats_list):
    return [{k: v for k, v in s.items() if k != "elapsed"} for s in stats_list]


def test_fresh_runs_bit_identical(two_style_ds):
    results = []
    for _ in range(2):
        tr = PretrainTrainer(tiny_cfg(), two_style_ds)
        s = _strip_timing([tr.iterate() for _ in range(2)])
        results.append((tr.policy.theta.copy(), tr.encoder.theta.copy(),
                        tr.disc.theta.copy(), s))
    assert np.array_equal(results[0][0], results[1][0])
    assert np.array_equal(results[0][1], results[1][1])
    assert np.array_equal(results[0][2], results[1][2])
    assert results[0][3] == results[1][3]


def test_resume_reproduces_next_iterations_bit_exactly(tmp_path, two_style_ds):
    cfg = tiny_cfg()
    a = PretrainTrainer(cfg, two_style_ds)
    a.iterate()
    a.iterate()
    ckpt = save_trainer(a, tmp_path / "mid.npz")
    stats_a = _strip_timing([a.iterate() for _ in range(2)])

    b = load_trainer(ckpt, two_style_ds)
    stats_b = _strip_timing([b.iterate() for _ in range(2)])
    assert stats_a == stats_b
    for attr in ("encoder", "policy", "value", "disc"):
        assert np.array_equal(getattr(a, attr).theta, getattr(b, attr).theta), attr


def test_checkpoint_hash_guard(tmp_path, two_style_ds):
    cfg = tiny_cfg()
    tr = PretrainTrainer(cfg, two_style_ds)
    path = save_trainer(tr, tmp_path / "ck.npz")
    other = tiny_cfg(lr_actor=1e-4)
    with pytest.raises(ValueError, match="config hash mismatch"):
        load_checkpoint(path, expect_config=other.to_dict())
    meta, _ = load_checkpoint(path, expect_config=other.to_dict(), force=True)
    assert meta.get("hash_mismatch") is True


def test_nan_abort_keeps_last_good(tmp_path, two_style_ds, monkeypatch):
    cfg = tiny_cfg(total_steps=16 * 16 * 3)
    orig = PretrainTrainer.iterate

    def poisoned(self):
        if self.iteration >= 1:
            raise FloatingPointError("injected")
        return orig(self)

    monkeypatch.setattr(PretrainTrainer, "iterate", poisoned)
    with pytest.raises(RuntimeError, match="last good state"):
        pretrain(cfg, two_style_ds, tmp_path)
    meta, arrays = load_checkpoint(tmp_path / "checkpoint_abort.npz")
    assert meta["extra"]["iteration"] == 1
    assert "policy_theta" in arrays


def test_pretrain_writes_curve_and_final(tmp_path, two_style_ds):
    cfg = tiny_cfg(total_steps=16 * 16 * 2)
    out = pretrain(cfg, two_style_ds, tmp_path)
    lines = [json.loads(l) for l in
             (tmp_path / "curve.jsonl").read_text().splitlines()]
    assert len(lines) == 2
    assert {"iteration", "reward_mean", "disc_total", "value_loss"} <= set(lines[0])
    bundle = load_bundle(out["checkpoint"])
    assert isinstance(bundle, PolicyBundle)
    assert bundle.cfg.latent_dim == cfg.latent_dim
    assert len(bundle.fingerprint) == 64
    # resume appends to the curve rather than truncating it
    cfg2 = tiny_cfg(total_steps=16 * 16 * 4)
    pretrain(cfg2, two_style_ds, tmp_path, resume=out["checkpoint"], force=True)
    lines = (tmp_path / "curve.jsonl").read_text().splitlines()
    assert len(lines) == 4


def test_fingerprint_sensitivity():
    a = np.zeros(8, dtype=np.float32)
    b = a.copy()
    assert theta_fingerprint(a) == theta_fingerprint(b)
    b[3] = 1e-7
    assert theta_fingerprint(a) != theta_fingerprint(b)


# ---------------------------------------------------------------------------
# End-to-end learning smoke.

def test_two_style_smoke_policy_gains_on_discriminator(two_style_ds):
    # adversarial transient: reward first falls while the discriminator
    # strengthens, then the policy recovers; the learning signal is the
    # climb out of the trough (margin set from three seeded runs)
    cfg = tiny_cfg(total_steps=10 ** 9, seed=1)
    tr = PretrainTrainer(cfg, two_style_ds)
    rewards = [tr.iterate()["reward_mean"] for _ in range(200)]
    smooth = np.convolve(rewards, np.ones(10) / 10.0, mode="valid")
    trough = float(np.min(smooth))
    late = float(np.mean(smooth[-15:]))
    assert late > trough + 0.02, (trough, late)
