"""Evaluation suite for a trained encoder/policy pair: latent concentration,
rollout diversity, controllability against a window classifier, latent
class-distance structure, and latent-interpolation rollouts.

Pure numeric kernels (operating on precomputed codes or posteriors) are
separated from the wrappers that run the encoder or policy, so each kernel
can be checked against a brute-force oracle.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .models import Encoder
from .motion import (
    DT,
    TRANSITION_FRAMES,
    WINDOW_FRAMES,
    MotionClip,
    MotionDataset,
    mid_window_features,
    sample_reset_states,
    transition_features,
    window_at,
)
from .nn import AdamState, Mlp, MlpSpec, adam_step, sample_sphere_uniform
from .sim import OBS_DIM, SimConfig, observe_batch, step_batch

logger = logging.getLogger("calm.metrics")

WINDOW_DIM = TRANSITION_FRAMES * OBS_DIM
FEATURE_DIM = WINDOW_FRAMES * OBS_DIM
FISHER_STRIDE = 10


class MetricPreconditionError(RuntimeError):
    """A metric's validity precondition failed; no score is emitted."""


# ---------------------------------------------------------------------------
# Sliding-window feature extraction.

def clip_sliding_features(clip: MotionClip, stride: int = FISHER_STRIDE) -> np.ndarray:
    """Encoder features for full windows at frame offsets 0, stride, 2*stride, ...

    Returns (n_windows, FEATURE_DIM); empty when the clip is shorter than
    one window.
    """
    n = clip.n_frames
    starts = range(0, n - WINDOW_FRAMES + 1, stride)
    feats = np.empty((len(starts), FEATURE_DIM))
    for k, s in enumerate(starts):
        feats[k] = observe_batch(clip.frames[s:s + WINDOW_FRAMES]).reshape(FEATURE_DIM)
    return feats


def dataset_window_codes(enc: Encoder, ds: MotionDataset,
                         stride: int = FISHER_STRIDE):
    """Encode sliding windows of every clip; returns (codes, clip_labels,
    style_labels) with one row per window."""
    feats, clip_labels, style_labels = [], [], []
    for ci, clip in enumerate(ds.clips):
        f = clip_sliding_features(clip, stride)
        if len(f) < 2:
            logger.warning("clip %s yields %d sliding windows; skipped",
                           clip.id, len(f))
            continue
        feats.append(f)
        clip_labels.extend([ci] * len(f))
        style_labels.extend([clip.style_label] * len(f))
    if not feats:
        raise ValueError("no clip produced at least two sliding windows")
    codes, _ = enc.encode(np.concatenate(feats, axis=0))
    return (np.asarray(codes, dtype=np.float64),
            np.asarray(clip_labels), np.asarray(style_labels))


# ---------------------------------------------------------------------------
# Fisher concentration.

def fisher_from_codes(codes: np.ndarray, groups: np.ndarray) -> float:
    """Mean over groups of (mean intra-group distance) / (mean distance from
    the group's codes to every code), counting ordered pairs including
    self-pairs in both normalizations. A group whose denominator vanishes
    (total collapse) contributes 1: no separation.
    """
    codes = np.asarray(codes, dtype=np.float64)
    n = len(codes)
    d2 = np.sum(codes ** 2, axis=1)
    sq = np.maximum(d2[:, None] + d2[None, :] - 2.0 * codes @ codes.T, 0.0)
    dist = np.sqrt(sq)
    coeffs = []
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        m = len(idx)
        intra = float(np.sum(dist[np.ix_(idx, idx)])) / (m * m)
        to_all = float(np.sum(dist[idx])) / (m * n)
        coeffs.append(1.0 if to_all < 1e-12 else intra / to_all)
    return float(np.mean(coeffs))


def fisher_concentration(enc: Encoder, ds: MotionDataset,
                         stride: int = FISHER_STRIDE) -> float:
    codes, clip_labels, _ = dataset_window_codes(enc, ds, stride)
    return fisher_from_codes(codes, clip_labels)


# ---------------------------------------------------------------------------
# Window classifier (stand-in for human raters).

class WindowClassifier:
    """Softmax MLP over transition windows -> style classes."""

    def __init__(self, styles: list[str], hidden=(128, 64), seed: int = 0):
        if len(styles) < 2:
            raise ValueError("classifier needs at least two styles")
        self.styles = list(styles)
        self.mlp = Mlp(MlpSpec(widths=(WINDOW_DIM, *hidden, len(styles)),
                               activation="relu", seed=seed))
        self.held_out_accuracy: float | None = None

    def predict_proba(self, windows: np.ndarray) -> np.ndarray:
        logits, _ = self.mlp.forward(np.atleast_2d(windows))
        logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, windows: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(windows), axis=1)

    def accuracy(self, windows: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(windows) == labels))


def classifier_windows(ds: MotionDataset, stride: int = 2):
    """All transition windows of every clip with style-index labels."""
    styles = ds.styles()
    index = {s: i for i, s in enumerate(styles)}
    wins, labels = [], []
    for clip in ds.clips:
        n = clip.n_frames
        for s in range(0, n - TRANSITION_FRAMES + 1, stride):
            wins.append(transition_features(clip.frames, s))
            labels.append(index[clip.style_label])
    return np.asarray(wins), np.asarray(labels), styles


def train_window_classifier(ds: MotionDataset, hidden=(128, 64),
                            stride: int = 2, holdout_every: int = 5,
                            steps: int = 400, lr: float = 1e-3,
                            seed: int = 0) -> WindowClassifier:
    """Full-batch cross-entropy training with a deterministic interleaved
    holdout split; the held-out accuracy is recorded on the classifier."""
    wins, labels, styles = classifier_windows(ds, stride)
    hold = np.arange(len(wins)) % holdout_every == 0
    clf = WindowClassifier(styles, hidden=hidden, seed=seed)
    x, y = wins[~hold], labels[~hold]
    onehot = np.zeros((len(y), len(styles)))
    onehot[np.arange(len(y)), y] = 1.0
    adam = AdamState.init(clf.mlp.n_params, lr, "window-clf")
    for _ in range(steps):
        logits, cache = clf.mlp.forward(x)
        logits = np.asarray(logits, dtype=np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        p = e / e.sum(axis=1, keepdims=True)
        dlogits = (p - onehot) / len(y)
        _, dtheta = clf.mlp.backward(cache, dlogits.astype(clf.mlp.dtype))
        clf.mlp.theta = adam_step(adam, clf.mlp.theta, dtheta)
    clf.held_out_accuracy = clf.accuracy(wins[hold], labels[hold])
    return clf


def _require_trustworthy(clf: WindowClassifier, floor: float = 0.9) -> None:
    acc = clf.held_out_accuracy
    if acc is None or acc < floor:
        raise MetricPreconditionError(
            f"window classifier held-out accuracy {acc} below {floor}; "
            "score would be meaningless")


# ---------------------------------------------------------------------------
# Inception score.

def inception_score(posteriors: np.ndarray, n_splits: int = 10) -> tuple[float, float]:
    """exp(mean KL(p(y|x) || p(y))) per split; returns (mean, std) over splits."""
    p = np.atleast_2d(np.asarray(posteriors, dtype=np.float64))
    if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("posterior rows must be probability vectors")
    scores = []
    for chunk in np.array_split(p, n_splits):
        if len(chunk) == 0:
            continue
        marginal = chunk.mean(axis=0, keepdims=True)
        kl = np.sum(chunk * (np.log(chunk + 1e-12) - np.log(marginal + 1e-12)), axis=1)
        scores.append(float(np.exp(np.mean(kl))))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# Policy rollouts on batches of latents.

def rollout_observations(policy, z: np.ndarray, states0: np.ndarray,
                         n_steps: int, sim_cfg: SimConfig | None = None) -> np.ndarray:
    """Deterministic (mean-action) rollouts for a batch of latents.

    Returns per-step observations, shape (batch, n_steps, OBS_DIM)."""
    sim_cfg = sim_cfg or SimConfig()
    states = np.array(states0, dtype=np.float64)
    z = np.atleast_2d(z)
    out = np.empty((len(states), n_steps, OBS_DIM))
    for t in range(n_steps):
        obs = observe_batch(states)
        mu, _ = policy.mean(obs, z)
        states = step_batch(states, np.asarray(mu, dtype=np.float64), sim_cfg)
        out[:, t] = observe_batch(states)
    return out


def rollout_posteriors(clf: WindowClassifier, obs: np.ndarray,
                       skip: int = 30, stride: int = 5) -> np.ndarray:
    """Mean classifier posterior over each rollout's transition windows.

    `skip` drops the initial transient; returns (batch, C)."""
    B, T, _ = obs.shape
    starts = list(range(skip, T - TRANSITION_FRAMES + 1, stride))
    if not starts:
        raise ValueError(f"rollout of {T} steps leaves no windows after skip={skip}")
    wins = np.stack([obs[:, s:s + TRANSITION_FRAMES].reshape(B, WINDOW_DIM)
                     for s in starts], axis=1)
    probs = clf.predict_proba(wins.reshape(B * len(starts), WINDOW_DIM))
    return probs.reshape(B, len(starts), -1).mean(axis=1)


def controllability(enc: Encoder, policy, clf: WindowClassifier,
                    ds: MotionDataset, n_refs: int = 40, n_gens: int = 3,
                    rollout_steps: int = 150,
                    sim_cfg: SimConfig | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Fraction of conditioned generations whose rollout windows classify as
    the reference clip's style. Each generation starts from a random
    reference frame; actions are the policy mean."""
    if n_refs <= 0 or n_gens <= 0:
        raise ValueError("controllability needs n_refs > 0 and n_gens > 0")
    _require_trustworthy(clf)
    rng = rng or np.random.default_rng(0)
    refs = []
    labels = []
    index = {s: i for i, s in enumerate(clf.styles)}
    from .motion import sample_submotion, submotion_features
    for _ in range(n_refs):
        sub = sample_submotion(ds, rng)
        refs.append(submotion_features(sub))
        style = next(c.style_label for c in ds.clips if c.id == sub.source_id)
        labels.append(index[style])
    z, _ = enc.encode(np.asarray(refs))
    z = np.repeat(np.asarray(z, dtype=np.float64), n_gens, axis=0)
    labels = np.repeat(np.asarray(labels), n_gens)
    states0 = sample_reset_states(ds, rng, len(z))
    obs = rollout_observations(policy, z, states0, rollout_steps, sim_cfg)
    posts = rollout_posteriors(clf, obs)
    return float(np.mean(np.argmax(posts, axis=1) == labels))


def random_latent_inception(enc_dim: int, policy, clf: WindowClassifier,
                            ds: MotionDataset, n_rollouts: int = 120,
                            rollout_steps: int = 150,
                            sim_cfg: SimConfig | None = None,
                            rng: np.random.Generator | None = None,
                            n_splits: int = 10) -> tuple[float, float]:
    """Inception score of rollouts driven by uniformly random latents."""
    _require_trustworthy(clf)
    rng = rng or np.random.default_rng(0)
    z = sample_sphere_uniform(enc_dim, rng, n_rollouts)
    states0 = sample_reset_states(ds, rng, n_rollouts)
    obs = rollout_observations(policy, z, states0, rollout_steps, sim_cfg)
    posts = rollout_posteriors(clf, obs)
    return inception_score(posts, n_splits=n_splits)


# ---------------------------------------------------------------------------
# Class-distance matrix.

def distance_matrix_from_codes(codes: np.ndarray, groups: np.ndarray):
    """(i, j) = mean code distance between group i and group j windows;
    diagonal entries are intra-group means over distinct pairs. Returns
    (matrix, group_names)."""
    codes = np.asarray(codes, dtype=np.float64)
    names = list(dict.fromkeys(groups))
    order = {g: i for i, g in enumerate(names)}
    C = len(names)
    d2 = np.sum(codes ** 2, axis=1)
    dist = np.sqrt(np.maximum(d2[:, None] + d2[None, :] - 2.0 * codes @ codes.T, 0.0))
    out = np.zeros((C, C))
    idx = [np.flatnonzero(np.asarray([order[g] for g in groups]) == i) for i in range(C)]
    for i in range(C):
        for j in range(i, C):
            block = dist[np.ix_(idx[i], idx[j])]
            if i == j:
                m = len(idx[i])
                out[i, j] = 0.0 if m < 2 else float(np.sum(block)) / (m * (m - 1))
            else:
                out[i, j] = float(np.mean(block))
                out[j, i] = out[i, j]
    return out, names


def class_distance_matrix(enc: Encoder, ds: MotionDataset,
                          grouping: dict[str, str] | None = None,
                          stride: int = FISHER_STRIDE):
    """Group windows by style (or an explicit clip-id -> group mapping)."""
    codes, clip_labels, style_labels = dataset_window_codes(enc, ds, stride)
    if grouping is None:
        groups = style_labels
    else:
        missing = [c.id for c in ds.clips if c.id not in grouping]
        if missing:
            raise ValueError(f"grouping misses clips: {missing}")
        id_of = {ci: clip.id for ci, clip in enumerate(ds.clips)}
        groups = np.asarray([grouping[id_of[ci]] for ci in clip_labels])
    return distance_matrix_from_codes(codes, groups)


# ---------------------------------------------------------------------------
# Latent interpolation rollouts.

def slerp(za: np.ndarray, zb: np.ndarray, u: float) -> np.ndarray:
    """Spherical interpolation between unit vectors; u in [0, 1]."""
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    dot = float(np.clip(np.dot(za, zb), -1.0, 1.0))
    omega = np.arccos(dot)
    if np.sin(omega) < 1e-9:
        return za.copy()
    out = (np.sin((1.0 - u) * omega) * za + np.sin(u * omega) * zb) / np.sin(omega)
    # near-antipodal endpoints amplify rounding by 1/sin(omega); re-pin to the sphere
    return out / np.linalg.norm(out)


@dataclass
class RolloutTrace:
    times: np.ndarray
    states: np.ndarray   # (n, 16)
    latents: np.ndarray  # (n, d)
    meta: dict = field(default_factory=dict)


def interpolate_rollout(enc: Encoder, policy, clip_a: MotionClip,
                        clip_b: MotionClip, duration: float,
                        sim_cfg: SimConfig | None = None,
                        mode: str = "slerp") -> RolloutTrace:
    """Roll the policy while the latent glides from E(clip_a) to E(clip_b).

    `mode` 'slerp' follows the great circle; 'linear' interpolates in the
    embedding space and re-projects (for comparison). Antipodal endpoints
    get a 1e-6 perturbation (logged) to make the path direction definite.
    """
    if mode not in ("slerp", "linear"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    sim_cfg = sim_cfg or SimConfig()
    za, _ = enc.encode(mid_window_features(clip_a)[None])
    zb, _ = enc.encode(mid_window_features(clip_b)[None])
    za = np.asarray(za, dtype=np.float64)[0]
    zb = np.asarray(zb, dtype=np.float64)[0]
    if np.dot(za, zb) < -1.0 + 1e-9:
        logger.warning("antipodal interpolation endpoints; perturbing by 1e-6")
        bump = np.zeros_like(zb)
        bump[int(np.argmin(np.abs(zb)))] = 1e-6
        zb = zb + bump
        zb = zb / np.linalg.norm(zb)

    n = max(2, int(round(duration / DT)))
    state = clip_a.frames[0].copy()
    state[0:2] = 0.0
    state[15] = 0.0
    states = np.empty((n, 16))
    latents = np.empty((n, len(za)))
    cur = state[None]
    for t in range(n):
        u = t / (n - 1)
        if mode == "slerp":
            z = slerp(za, zb, u)
        else:
            v = (1.0 - u) * za + u * zb
            nv = np.linalg.norm(v)
            z = v / nv if nv > 1e-9 else za
        obs = observe_batch(cur)
        mu, _ = policy.mean(obs, z[None])
        cur = step_batch(cur, np.asarray(mu, dtype=np.float64), sim_cfg)
        states[t] = cur[0]
        latents[t] = z
    return RolloutTrace(times=np.arange(n) * DT, states=states, latents=latents,
                        meta={"mode": mode, "clip_a": clip_a.id, "clip_b": clip_b.id})


# ---------------------------------------------------------------------------
# Report.

@dataclass
class MetricsReport:
    fisher: float
    inception: tuple[float, float]
    controllability: float
    distance_matrix: np.ndarray
    group_names: list[str]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.controllability <= 1.0:
            raise ValueError("controllability must be a fraction")
        m = np.asarray(self.distance_matrix)
        if not np.allclose(m, m.T, atol=1e-12) or np.any(m < 0):
            raise ValueError("distance matrix must be symmetric, non-negative")

    def to_text(self) -> str:
        lines = [
            "metrics-report v1",
            f"fisher_concentration: {self.fisher:.6f}",
            f"inception_score: {self.inception[0]:.4f} +/- {self.inception[1]:.4f}",
            f"controllability: {self.controllability:.4f}",
            "distance_matrix_groups: " + ",".join(self.group_names),
        ]
        for k, v in sorted(self.metadata.items()):
            lines.append(f"meta.{k}: {v}")
        return "\n".join(lines) + "\n"

    def matrix_csv(self) -> str:
        rows = ["," + ",".join(self.group_names)]
        for name, row in zip(self.group_names, np.asarray(self.distance_matrix)):
            rows.append(name + "," + ",".join(f"{x:.9f}" for x in row))
        return "\n".join(rows) + "\n"


def evaluate_bundle(bundle, ds: MotionDataset, clf: WindowClassifier | None = None,
                    n_refs: int = 40, n_gens: int = 3, n_rollouts: int = 120,
                    rollout_steps: int = 150, seed: int = 0) -> MetricsReport:
    """Full metric pass over a trained bundle (see pretrain.load_bundle)."""
    rng = np.random.default_rng(seed)
    if clf is None:
        clf = train_window_classifier(ds)
    fisher = fisher_concentration(bundle.encoder, ds)
    inception = random_latent_inception(bundle.cfg.latent_dim, bundle.policy, clf,
                                        ds, n_rollouts=n_rollouts,
                                        rollout_steps=rollout_steps, rng=rng)
    ctrl = controllability(bundle.encoder, bundle.policy, clf, ds,
                           n_refs=n_refs, n_gens=n_gens,
                           rollout_steps=rollout_steps, rng=rng)
    matrix, names = class_distance_matrix(bundle.encoder, ds)
    meta = {
        "seed": seed,
        "checkpoint_fingerprint": bundle.fingerprint,
        "classifier_held_out_accuracy": round(clf.held_out_accuracy or 0.0, 4),
    }
    return MetricsReport(fisher=fisher, inception=inception, controllability=ctrl,
                         distance_matrix=matrix, group_names=names, metadata=meta)
