"""Metric kernels against brute-force oracles, classifier preconditions,
and interpolation invariants. Oracles are written as explicit double loops
so each kernel is checked against an independent computation."""

import logging
import math

import numpy as np
import pytest

from calm.metrics import (
    MetricPreconditionError,
    MetricsReport,
    WindowClassifier,
    class_distance_matrix,
    clip_sliding_features,
    controllability,
    dataset_window_codes,
    distance_matrix_from_codes,
    evaluate_bundle,
    fisher_concentration,
    fisher_from_codes,
    inception_score,
    interpolate_rollout,
    random_latent_inception,
    rollout_observations,
    rollout_posteriors,
    slerp,
    train_window_classifier,
)
from calm.motion import GaitParams, MotionDataset, generate_clip, default_style_suite
from calm.pretrain import PolicyBundle, PretrainConfig, build_models


# ---------------------------------------------------------------------------
# Brute-force oracles (independent, loop-based implementations).

def fisher_oracle(codes, groups):
    codes = [np.asarray(c, dtype=np.float64) for c in codes]
    coeffs = []
    for g in sorted(set(groups)):
        members = [c for c, gg in zip(codes, groups) if gg == g]
        m = len(members)
        num = 0.0
        for a in members:
            for b in members:
                num += float(np.linalg.norm(a - b))
        num /= m * m
        den = 0.0
        for a in members:
            for b in codes:
                den += float(np.linalg.norm(a - b))
        den /= m * len(codes)
        coeffs.append(1.0 if den < 1e-12 else num / den)
    return sum(coeffs) / len(coeffs)


def inception_oracle(posts, n_splits):
    chunks = np.array_split(np.asarray(posts, dtype=np.float64), n_splits)
    scores = []
    for ch in chunks:
        if len(ch) == 0:
            continue
        py = ch.mean(axis=0)
        kls = []
        for row in ch:
            kl = 0.0
            for pi, qi in zip(row, py):
                kl += pi * (math.log(pi + 1e-12) - math.log(qi + 1e-12))
            kls.append(kl)
        scores.append(math.exp(sum(kls) / len(kls)))
    return (sum(scores) / len(scores),
            float(np.std(np.asarray(scores))))


def distance_matrix_oracle(codes, groups):
    names = list(dict.fromkeys(groups))
    C = len(names)
    out = np.zeros((C, C))
    for i, gi in enumerate(names):
        for j, gj in enumerate(names):
            total, count = 0.0, 0
            for a, ga in zip(codes, groups):
                for b, gb in zip(codes, groups):
                    if ga != gi or gb != gj:
                        continue
                    if i == j and a is b:
                        continue
                    total += float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
                    count += 1
            out[i, j] = total / count if count else 0.0
    return out, names


# ---------------------------------------------------------------------------
# Fisher concentration.

def test_fisher_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    codes = rng.standard_normal((20, 4))
    groups = np.array([0] * 10 + [1] * 10)
    assert abs(fisher_from_codes(codes, groups)
               - fisher_oracle(list(codes), list(groups))) < 1e-9


def test_fisher_distinct_point_per_clip_is_zero():
    codes = np.repeat(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]), 4, axis=0)
    groups = np.repeat(np.arange(3), 4)
    assert fisher_from_codes(codes, groups) == 0.0


def test_fisher_total_collapse_is_one():
    codes = np.tile(np.array([[0.3, 0.4]]), (12, 1))
    groups = np.repeat(np.arange(3), 4)
    assert fisher_from_codes(codes, groups) == 1.0


def test_fisher_rotation_invariant():
    rng = np.random.default_rng(1)
    codes = rng.standard_normal((30, 5))
    groups = rng.integers(0, 3, size=30)
    base = fisher_from_codes(codes, groups)
    for _ in range(3):
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        assert abs(fisher_from_codes(codes @ q.T, groups) - base) < 1e-9


def test_fisher_skips_short_clips_with_warning(caplog):
    walk = GaitParams(speed=1.0, posture=1.0, limb_freq=0.9, limb_amp=0.2)
    ds = MotionDataset(clips=[
        generate_clip(walk, 4.0, 0, clip_id="long", style_label="walk"),
        generate_clip(walk, 1.0, 1, clip_id="short", style_label="walk"),
    ])
    cfg = PretrainConfig(latent_dim=4, enc_hidden=(16,), policy_hidden=(8,),
                         disc_hidden=(8,), value_hidden=(8,), head_widths=(4,))
    enc, _, _, _ = build_models(cfg)
    with caplog.at_level(logging.WARNING, logger="calm.metrics"):
        codes, clip_labels, _ = dataset_window_codes(enc, ds)
    assert "short" in caplog.text
    assert set(clip_labels) == {0}
    assert np.isfinite(fisher_concentration(enc, ds))


def test_sliding_windows_count():
    walk = GaitParams(speed=1.0, posture=1.0, limb_freq=0.9, limb_amp=0.2)
    clip = generate_clip(walk, 4.0, 0)
    # 120 frames, window 60, stride 10 -> starts 0..60
    assert clip_sliding_features(clip).shape == (7, 960)


# ---------------------------------------------------------------------------
# Inception score.

def test_inception_uniform_is_one():
    posts = np.full((40, 5), 0.2)
    mean, std = inception_score(posts, n_splits=10)
    assert abs(mean - 1.0) < 1e-9
    assert abs(std) < 1e-9


def test_inception_confident_balanced_is_class_count():
    C = 6
    posts = np.zeros((60, C))
    posts[np.arange(60), np.arange(60) % C] = 1.0
    mean, _ = inception_score(posts, n_splits=10)
    assert abs(mean - C) < 1e-8


def test_inception_matches_direct_kl_oracle():
    posts = np.array([
        [0.7, 0.2, 0.1],
        [0.1, 0.8, 0.1],
        [0.3, 0.3, 0.4],
        [0.05, 0.05, 0.9],
        [0.5, 0.25, 0.25],
        [0.2, 0.6, 0.2],
    ])
    got = inception_score(posts, n_splits=2)
    want = inception_oracle(posts, 2)
    assert abs(got[0] - want[0]) < 1e-9
    assert abs(got[1] - want[1]) < 1e-9


def test_inception_rejects_non_probability_rows():
    with pytest.raises(ValueError, match="probability"):
        inception_score(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError, match="probability"):
        inception_score(np.array([[-0.1, 1.1]]))


# ---------------------------------------------------------------------------
# Window classifier.

@pytest.fixture(scope="module")
def two_style_ds():
    return default_style_suite(0, styles=["walk", "run"])


@pytest.fixture(scope="module")
def two_style_clf(two_style_ds):
    return train_window_classifier(two_style_ds, hidden=(64, 32), steps=200)


def test_classifier_outputs_probabilities(two_style_clf):
    rng = np.random.default_rng(2)
    p = two_style_clf.predict_proba(rng.standard_normal((9, 160)))
    assert p.shape == (9, 2)
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-6


def test_classifier_learns_reference_styles(two_style_clf):
    assert two_style_clf.held_out_accuracy is not None
    assert two_style_clf.held_out_accuracy >= 0.9


def test_untrustworthy_classifier_blocks_metrics(two_style_ds):
    clf = WindowClassifier(["walk", "run"])
    clf.held_out_accuracy = 0.5
    cfg = PretrainConfig(latent_dim=4, enc_hidden=(16,), policy_hidden=(8,),
                         disc_hidden=(8,), value_hidden=(8,), head_widths=(4,))
    enc, policy, _, _ = build_models(cfg)
    with pytest.raises(MetricPreconditionError, match="0.5"):
        controllability(enc, policy, clf, two_style_ds, n_refs=2, n_gens=1)
    with pytest.raises(MetricPreconditionError):
        random_latent_inception(4, policy, clf, two_style_ds, n_rollouts=4)


def test_controllability_rejects_empty_evaluation(two_style_ds, two_style_clf):
    cfg = PretrainConfig(latent_dim=4, enc_hidden=(16,), policy_hidden=(8,),
                         disc_hidden=(8,), value_hidden=(8,), head_widths=(4,))
    enc, policy, _, _ = build_models(cfg)
    with pytest.raises(ValueError, match="n_gens"):
        controllability(enc, policy, two_style_clf, two_style_ds, n_refs=5, n_gens=0)


class _NoisePolicy:
    """Emits large random actions; carries no information about the latent."""

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)

    def mean(self, obs, z):
        return self.rng.normal(0.0, 5.0, (len(np.atleast_2d(obs)), 8)), None


def test_controllability_noise_policy_is_chance_level(two_style_ds, two_style_clf):
    cfg = PretrainConfig(latent_dim=4, enc_hidden=(16,), policy_hidden=(8,),
                         disc_hidden=(8,), value_hidden=(8,), head_widths=(4,))
    enc, _, _, _ = build_models(cfg)
    frac = controllability(enc, _NoisePolicy(3), two_style_clf, two_style_ds,
                           n_refs=100, n_gens=5, rollout_steps=100,
                           rng=np.random.default_rng(4))
    assert abs(frac - 0.5) < 0.12, frac


def test_reference_replay_beats_classifier_floor(two_style_ds, two_style_clf):
    # feeding the reference frames directly through the window-scoring path
    # must recover the clip's style at least as reliably as the classifier's
    # held-out accuracy
    from calm.motion import sample_submotion
    from calm.sim import observe_batch
    rng = np.random.default_rng(5)
    index = {s: i for i, s in enumerate(two_style_clf.styles)}
    hits, total = 0, 0
    for _ in range(40):
        sub = sample_submotion(two_style_ds, rng)
        obs = observe_batch(sub.frames)[None]
        posts = rollout_posteriors(two_style_clf, obs)
        style = next(c.style_label for c in two_style_ds.clips
                     if c.id == sub.source_id)
        hits += int(np.argmax(posts[0]) == index[style])
        total += 1
    assert hits / total >= two_style_clf.held_out_accuracy - 0.05


# ---------------------------------------------------------------------------
# Class-distance matrix.

def test_distance_matrix_matches_oracle():
    rng = np.random.default_rng(6)
    codes = rng.standard_normal((14, 3))
    groups = np.array(["a"] * 5 + ["b"] * 9)
    got, names = distance_matrix_from_codes(codes, groups)
    want, names_o = distance_matrix_oracle(list(codes), list(groups))
    assert names == names_o
    assert np.max(np.abs(got - want)) < 1e-9
    assert np.allclose(got, got.T)


def test_distance_matrix_single_group():
    codes = np.array([[0.0, 0.0], [3.0, 4.0]])
    got, names = distance_matrix_from_codes(codes, np.array(["only", "only"]))
    assert names == ["only"]
    assert abs(got[0, 0] - 5.0) < 1e-12


def test_distance_matrix_constant_encoder_is_zero():
    codes = np.tile(np.array([[0.6, 0.8]]), (8, 1))
    groups = np.array(["a"] * 4 + ["b"] * 4)
    got, _ = distance_matrix_from_codes(codes, groups)
    assert np.all(got == 0.0)


def test_class_distance_matrix_grouping_validation(two_style_ds):
    cfg = PretrainConfig(latent_dim=4, enc_hidden=(16,), policy_hidden=(8,),
                         disc_hidden=(8,), value_hidden=(8,), head_widths=(4,))
    enc, _, _, _ = build_models(cfg)
    with pytest.raises(ValueError, match="grouping misses"):
        class_distance_matrix(enc, two_style_ds, grouping={"walk_0": "x"})
    matrix, names = class_distance_matrix(enc, two_style_ds)
    assert set(names) == {"walk", "run"}
    assert matrix.shape == (2, 2)


# ---------------------------------------------------------------------------
# Interpolation.

def test_slerp_endpoint_and_midpoint():
    za = np.array([1.0, 0.0, 0.0])
    zb = np.array([0.0, 1.0, 0.0])
    assert np.array_equal(slerp(za, zb, 0.0), za)
    mid = slerp(za, zb, 0.5)
    assert abs(np.dot(mid, za) - math.cos(math.pi / 4)) < 1e-12
    assert abs(np.dot(mid, zb) - math.cos(math.pi / 4)) < 1e-12


class _FixedEncoder:
    def __init__(self, z_by_call):
        self.z_by_call = [np.asarray(z, dtype=np.float64) for z in z_by_call]
        self.calls = 0

    def encode(self, feats):
        z = self.z_by_call[min(self.calls, len(self.z_by_call) - 1)]
        self.calls += 1
        return z[None].copy(), None


class _ZeroPolicy:
    def mean(self, obs, z):
        return np.zeros((len(np.atleast_2d(obs)), 8)), None


def test_interpolate_rollout_latent_path(two_style_ds):
    enc = _FixedEncoder([[1.0, 0.0], [0.0, 1.0]])
    trace = interpolate_rollout(enc, _ZeroPolicy(), two_style_ds.clips[0],
                                two_style_ds.clips[3], duration=1.0)
    assert trace.latents.shape[0] == 30
    assert np.array_equal(trace.latents[0], [1.0, 0.0])
    norms = np.linalg.norm(trace.latents, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9
    # final step reaches the second endpoint
    assert np.max(np.abs(trace.latents[-1] - [0.0, 1.0])) < 1e-9


def test_interpolate_antipodal_perturbed_with_warning(two_style_ds, caplog):
    enc = _FixedEncoder([[1.0, 0.0], [-1.0, 0.0]])
    with caplog.at_level(logging.WARNING, logger="calm.metrics"):
        trace = interpolate_rollout(enc, _ZeroPolicy(), two_style_ds.clips[0],
                                    two_style_ds.clips[3], duration=0.5)
    assert "antipodal" in caplog.text
    norms = np.linalg.norm(trace.latents, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9


def test_interpolate_linear_mode_unit_norm(two_style_ds):
    enc = _FixedEncoder([[1.0, 0.0], [0.0, 1.0]])
    trace = interpolate_rollout(enc, _ZeroPolicy(), two_style_ds.clips[0],
                                two_style_ds.clips[3], duration=0.5, mode="linear")
    norms = np.linalg.norm(trace.latents, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9
    with pytest.raises(ValueError, match="interpolation mode"):
        interpolate_rollout(enc, _ZeroPolicy(), two_style_ds.clips[0],
                            two_style_ds.clips[3], duration=0.5, mode="bezier")


# ---------------------------------------------------------------------------
# Report assembly.

def test_evaluate_bundle_report_deterministic(two_style_ds, two_style_clf):
    cfg = PretrainConfig(latent_dim=4, enc_hidden=(32, 16), policy_hidden=(32, 16),
                         disc_hidden=(16,), value_hidden=(16,), head_widths=(8,))
    bundle = PolicyBundle(cfg, *build_models(cfg))
    reports = [evaluate_bundle(bundle, two_style_ds, clf=two_style_clf,
                               n_refs=6, n_gens=2, n_rollouts=20,
                               rollout_steps=60, seed=7) for _ in range(2)]
    a, b = reports
    assert a.fisher == b.fisher
    assert a.inception == b.inception
    assert a.controllability == b.controllability
    assert np.array_equal(a.distance_matrix, b.distance_matrix)
    text = a.to_text()
    assert "fisher_concentration" in text and "controllability" in text
    assert "meta.checkpoint_fingerprint" in text
    csv = a.matrix_csv()
    assert csv.splitlines()[0].lstrip(",").split(",") == a.group_names


def test_metrics_report_validation():
    with pytest.raises(ValueError, match="fraction"):
        MetricsReport(fisher=0.1, inception=(1.0, 0.0), controllability=1.5,
                      distance_matrix=np.zeros((1, 1)), group_names=["a"])
    with pytest.raises(ValueError, match="symmetric"):
        MetricsReport(fisher=0.1, inception=(1.0, 0.0), controllability=0.5,
                      distance_matrix=np.array([[0.0, 1.0], [2.0, 0.0]]),
                      group_names=["a", "b"])
