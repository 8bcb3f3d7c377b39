"""Reference motion: procedural gait clips, 2-second windowing, clip files.

Clips are generated, never recorded: each style is a parametric gait
(speed, posture, limb oscillation, optional thrust bursts) integrated at
30 Hz. Frames are stored as flat state rows (see sim.STATE_CHANNELS).
Style labels ride along for evaluation only; nothing in the training path
accepts them.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim import STATE_CHANNELS, STATE_DIM, OBS_DIM, observe_batch, wrap_angle

DT = 1.0 / 30.0
WINDOW_FRAMES = 60          # 2 s at 30 Hz
TRANSITION_FRAMES = 10      # discriminator window length

# fixed inter-limb phase offsets: diagonal pairs swing together
LIMB_PHASES = np.array([0.0, np.pi, np.pi / 2, 3 * np.pi / 2])

CLIP_MAGIC = b"CALM"
CLIP_VERSION = 1


@dataclass(frozen=True)
class GaitParams:
    speed: float = 0.0
    posture: float = 1.0
    limb_freq: float = 1.0
    limb_amp: float = 0.0
    turn_rate: float = 0.0
    burst: tuple[float, float, float] | None = None  # (gap s, duration s, amplitude rad), recurring
    noise_std: float = 0.0

    def __post_init__(self):
        problems = []
        if self.speed < 0:
            problems.append(f"speed={self.speed}")
        if self.limb_freq < 0:
            problems.append(f"limb_freq={self.limb_freq}")
        if not (0.2 <= self.posture <= 1.0):
            problems.append(f"posture={self.posture}")
        if self.noise_std < 0:
            problems.append(f"noise_std={self.noise_std}")
        if self.burst is not None and (len(self.burst) != 3 or self.burst[1] <= 0):
            problems.append(f"burst={self.burst}")
        if problems:
            raise ValueError("invalid GaitParams: " + ", ".join(problems))


@dataclass
class MotionClip:
    id: str
    style_label: str
    frames: np.ndarray  # (n, STATE_DIM) float64, rows follow STATE_CHANNELS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != STATE_DIM:
            raise ValueError(f"clip frames must be (n, {STATE_DIM}), got {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise ValueError("clip needs at least 2 frames")
        dts = np.diff(self.frames[:, 15])
        if not np.allclose(dts, DT, atol=1e-9):
            raise ValueError("frame times must increase by dt")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("clip contains non-finite values")
        h = self.frames[:, 2]
        if np.any(h <= -np.pi) or np.any(h > np.pi):
            raise ValueError("clip heading outside (-pi, pi]")
        p = self.frames[:, 6]
        if np.any(p < 0.2) or np.any(p > 1.0):
            raise ValueError("clip posture outside [0.2, 1.0]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration(self) -> float:
        # fence-post convention: a clip of n frames covers n*dt seconds,
        # so a 2 s window is exactly WINDOW_FRAMES rows
        return self.n_frames * DT


@dataclass
class SubMotion:
    source_id: str
    start: float
    frames: np.ndarray  # (WINDOW_FRAMES, STATE_DIM); trailing `padded` rows all-zero
    padded: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.shape != (WINDOW_FRAMES, STATE_DIM):
            raise ValueError(f"submotion must hold exactly {WINDOW_FRAMES} frames")
        if not (0 <= self.padded < WINDOW_FRAMES):
            raise ValueError(f"padded={self.padded} out of range")

    @property
    def real_frames(self) -> np.ndarray:
        return self.frames[: WINDOW_FRAMES - self.padded]


@dataclass
class MotionDataset:
    clips: list[MotionClip]
    rng_seed: int = 0

    def __post_init__(self):
        if not self.clips:
            raise ValueError("dataset must contain at least one clip")
        ids = [c.id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise ValueError("clip ids must be unique")

    def styles(self) -> list[str]:
        seen = []
        for c in self.clips:
            if c.style_label not in seen:
                seen.append(c.style_label)
        return seen


def generate_clip(params: GaitParams, duration: float, seed: int,
                  clip_id: str = "clip", style_label: str = "") -> MotionClip:
    """Integrate a gait into a clip of round(duration/dt) frames.

    Frame k holds the state after k+1 semi-implicit steps from the origin,
    so root_pos is the running integral of root_vel including the frame's
    own velocity; a noiseless constant-speed clip therefore ends exactly
    speed*duration from the origin.
    """
    if duration < 2 * DT:
        raise ValueError(f"duration {duration} shorter than two frames")
    n = int(round(duration / DT))
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64) * DT

    heading = wrap_angle(params.turn_rate * t)
    c, s = np.cos(heading), np.sin(heading)
    vel = np.stack([c * params.speed, s * params.speed], axis=1)
    pos = np.cumsum(vel, axis=0) * DT

    omega = 2 * np.pi * params.limb_freq
    phase = omega * t[:, None] + LIMB_PHASES[None, :]
    angles = params.limb_amp * np.sin(phase)
    vels = params.limb_amp * omega * np.cos(phase)

    if params.burst is not None:
        gap, dur, amp = params.burst
        period = gap + dur
        tau = np.mod(t, period) - gap
        active = (tau >= 0) & (tau < dur)
        u = np.where(active, tau / dur, 0.0)
        bump = amp * np.sin(np.pi * u) ** 2
        dbump = amp * 2 * np.sin(np.pi * u) * np.cos(np.pi * u) * np.pi / dur
        angles[:, 0] += np.where(active, bump, 0.0)
        vels[:, 0] += np.where(active, dbump, 0.0)

    if params.noise_std > 0:
        angles = angles + rng.normal(0.0, params.noise_std, size=(n, 4))

    frames = np.zeros((n, STATE_DIM), dtype=np.float64)
    frames[:, 0:2] = pos
    frames[:, 2] = heading
    frames[:, 3:5] = vel
    frames[:, 5] = params.turn_rate
    frames[:, 6] = params.posture
    frames[:, 7:11] = angles
    frames[:, 11:15] = vels
    frames[:, 15] = t
    return MotionClip(id=clip_id, style_label=style_label, frames=frames)


# style -> gait parameter table; a sinusoidal joint track A sin(wt) needs
# peak torque A * sqrt((stiffness - w^2)^2 + (limb_damping * w)^2), which
# every entry keeps under limb_torque_max 8 so a policy can actually
# reproduce it. The limb plant resonates at sqrt(stiffness) ~ 0.5 Hz;
# strike exploits that to swing hard (tip speed well past the toppling
# threshold) while staying cheap. Limb signatures (freq, amp) are spread
# deliberately: adversarial imitation tracks limb patterns far more
# sharply than root speed or posture, so styles that differ only in those
# soft channels blur together in generation.
STYLE_GAITS: dict[str, GaitParams] = {
    "walk": GaitParams(speed=1.0, posture=1.0, limb_freq=0.9, limb_amp=0.22, noise_std=0.01),
    "run": GaitParams(speed=2.3, posture=1.0, limb_freq=1.25, limb_amp=0.12, noise_std=0.01),
    "crouch_walk": GaitParams(speed=0.55, posture=0.35, limb_freq=0.35, limb_amp=0.55, noise_std=0.01),
    "idle": GaitParams(speed=0.0, posture=1.0, limb_freq=0.5, limb_amp=0.03, noise_std=0.005),
    "turn_left": GaitParams(speed=0.6, posture=1.0, limb_freq=0.8, limb_amp=0.18,
                            turn_rate=0.9, noise_std=0.01),
    "turn_right": GaitParams(speed=0.6, posture=1.0, limb_freq=0.8, limb_amp=0.18,
                             turn_rate=-0.9, noise_std=0.01),
    "strike": GaitParams(speed=0.0, posture=0.75, limb_freq=0.5, limb_amp=1.2, noise_std=0.01),
    "celebrate": GaitParams(speed=0.0, posture=1.0, limb_freq=0.55, limb_amp=0.6, noise_std=0.01),
}

_SUITE_DURATIONS = (4.0, 6.0, 5.0)

# locomotion styles ship straight + curved clip variants so the latent
# space spans steering, not just straight-line gaits; turn rates stay well
# inside the actuator envelope (steady-state max = turn_torque/ang_damping)
_TURN_VARIANTS: dict[str, tuple[float, ...]] = {
    "walk": (0.0, 1.2, -1.2),
    "run": (0.0, 1.0, -1.0),
    "crouch_walk": (0.0, 1.2, -1.2),
}


def default_style_suite(seed: int = 0, styles: list[str] | None = None,
                        clips_per_style: int = 3) -> MotionDataset:
    """Deterministic dataset: every requested style, `clips_per_style` clips each."""
    names = list(STYLE_GAITS) if styles is None else styles
    unknown = [s for s in names if s not in STYLE_GAITS]
    if unknown:
        raise ValueError(f"unknown styles: {', '.join(unknown)}")
    clips = []
    for si, style in enumerate(names):
        variants = _TURN_VARIANTS.get(style)
        for j in range(clips_per_style):
            params = STYLE_GAITS[style]
            if variants is not None:
                params = dataclasses.replace(params, turn_rate=variants[j % len(variants)])
            dur = _SUITE_DURATIONS[(si + j) % len(_SUITE_DURATIONS)]
            clip_seed = int(np.random.SeedSequence((seed, si, j)).generate_state(1)[0])
            clips.append(generate_clip(params, dur, clip_seed,
                                       clip_id=f"{style}_{j}", style_label=style))
    return MotionDataset(clips=clips, rng_seed=seed)


def window_at(clip: MotionClip, start: float) -> SubMotion:
    """Extract the 2 s window beginning `start` seconds into the clip.

    Fractional starts interpolate linearly between bracketing frames
    (shortest-path for heading). A start within 1e-9 frames of a grid
    point snaps to it, so on-grid windows reproduce raw rows bit-exactly.
    Clips shorter than 2 s give their full length plus zero padding.
    """
    n = clip.n_frames
    if n < WINDOW_FRAMES:
        frames = np.zeros((WINDOW_FRAMES, STATE_DIM), dtype=np.float64)
        frames[:n] = clip.frames
        return SubMotion(source_id=clip.id, start=0.0, frames=frames,
                         padded=WINDOW_FRAMES - n)

    if not (0.0 <= start <= clip.duration - 2.0 + 1e-9):
        raise ValueError(f"start {start} outside [0, {clip.duration - 2.0}]")
    pos = start / DT
    i0 = int(np.floor(pos))
    frac = pos - i0
    if frac < 1e-9:
        frac = 0.0
    elif frac > 1 - 1e-9:
        i0 += 1
        frac = 0.0
    i0 = min(i0, n - WINDOW_FRAMES)

    rows = np.arange(i0, i0 + WINDOW_FRAMES)
    if frac == 0.0:
        frames = clip.frames[rows].copy()
    else:
        a = clip.frames[rows]
        b = clip.frames[np.minimum(rows + 1, n - 1)]
        frames = a + frac * (b - a)
        # heading interpolates along the shortest arc, then re-wraps
        dh = wrap_angle(b[:, 2] - a[:, 2])
        frames[:, 2] = wrap_angle(a[:, 2] + frac * dh)
    return SubMotion(source_id=clip.id, start=i0 * DT + frac * DT, frames=frames, padded=0)


def sample_submotion(ds: MotionDataset, rng: np.random.Generator) -> SubMotion:
    """Uniform clip, then uniform continuous start; oblivious to any
    internal structure of the clip."""
    clip = ds.clips[rng.integers(len(ds.clips))]
    if clip.n_frames < WINDOW_FRAMES:
        return window_at(clip, 0.0)
    start = rng.uniform(0.0, clip.duration - 2.0)
    return window_at(clip, start)


def sample_pair(ds: MotionDataset, rng: np.random.Generator,
                mode: str) -> tuple[SubMotion, SubMotion]:
    """mode 'overlapping': two windows of one clip with intersecting spans.
    mode 'iid': two independent draws."""
    if mode == "iid":
        return sample_submotion(ds, rng), sample_submotion(ds, rng)
    if mode != "overlapping":
        raise ValueError(f"unknown pair mode {mode!r}")
    long_idx = [i for i, c in enumerate(ds.clips) if c.duration > 2.0]
    if not long_idx:
        raise ValueError("overlapping mode needs a clip longer than 2 s")
    clip = ds.clips[long_idx[rng.integers(len(long_idx))]]
    hi = clip.duration - 2.0
    s1 = rng.uniform(0.0, hi)
    lo2 = max(0.0, s1 - 2.0 + DT)
    hi2 = min(hi, s1 + 2.0 - DT)
    s2 = rng.uniform(lo2, hi2)
    return window_at(clip, s1), window_at(clip, s2)


def transition_features(frames: np.ndarray, i: int, H: int = TRANSITION_FRAMES) -> np.ndarray:
    """Concatenated frame-invariant observations of frames[i : i+H].

    The same function builds discriminator inputs from reference windows
    and from policy rollouts; shape (H * OBS_DIM,).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != STATE_DIM:
        raise ValueError(f"frames must be (n, {STATE_DIM})")
    if i < 0 or i + H > frames.shape[0]:
        raise ValueError(f"window [{i}, {i + H}) outside 0..{frames.shape[0]}")
    return observe_batch(frames[i:i + H]).reshape(H * OBS_DIM)


def submotion_features(sub: SubMotion) -> np.ndarray:
    """Encoder input: per-frame observations, flattened; padded rows stay
    exactly zero rather than passing the zero-state through observe."""
    real = WINDOW_FRAMES - sub.padded
    feats = np.zeros((WINDOW_FRAMES, OBS_DIM), dtype=np.float64)
    if real > 0:
        feats[:real] = observe_batch(sub.frames[:real])
    return feats.reshape(WINDOW_FRAMES * OBS_DIM)


def mid_window_features(clip: MotionClip) -> np.ndarray:
    """Features of the clip's centered 2 s window; the canonical
    representative slice used for style anchors and interpolation."""
    start = max(0.0, (clip.duration - WINDOW_FRAMES * DT) / 2.0)
    return submotion_features(window_at(clip, start))


def sample_reset_states(ds: MotionDataset, rng: np.random.Generator,
                        n: int) -> np.ndarray:
    """n start states drawn from random clip frames, root position and
    clock zeroed; the standard episode-reset distribution."""
    states = np.empty((n, STATE_DIM))
    for i in range(n):
        clip = ds.clips[rng.integers(len(ds.clips))]
        st = clip.frames[int(rng.integers(clip.n_frames))].copy()
        st[0:2] = 0.0
        st[15] = 0.0
        states[i] = st
    return states


# ---------------------------------------------------------------------------
# Clip container: versioned binary header + little-endian f32 frame data.

def write_clip(path: Path | str, clip: MotionClip) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CLIP_MAGIC)
        f.write(struct.pack("<I", CLIP_VERSION))
        f.write(struct.pack("<d", DT))
        f.write(struct.pack("<II", clip.n_frames, STATE_DIM))
        for name in STATE_CHANNELS:
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(clip.frames.astype("<f4").tobytes())


def read_clip_header(path: Path | str) -> dict:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CLIP_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CLIP_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (dt,) = struct.unpack("<d", f.read(8))
        n_frames, n_channels = struct.unpack("<II", f.read(8))
        channels = []
        for _ in range(n_channels):
            (ln,) = struct.unpack("<H", f.read(2))
            channels.append(f.read(ln).decode())
        offset = f.tell()
    return {"version": version, "dt": dt, "n_frames": n_frames,
            "channels": channels, "data_offset": offset}


def read_clip(path: Path | str, clip_id: str = "", style_label: str = "") -> MotionClip:
    header = read_clip_header(path)
    with open(path, "rb") as f:
        f.seek(header["data_offset"])
        data = np.frombuffer(f.read(), dtype="<f4")
    frames = data.reshape(header["n_frames"], len(header["channels"])).astype(np.float64)
    # f32 rounding can nudge heading a hair past pi; re-wrap before validation
    frames = frames.copy()
    frames[:, 2] = wrap_angle(frames[:, 2])
    frames[:, 6] = np.clip(frames[:, 6], 0.2, 1.0)
    frames[:, 15] = np.arange(frames.shape[0]) * DT
    return MotionClip(id=clip_id or Path(path).stem, style_label=style_label, frames=frames)


def inspect_clip(path: Path | str) -> dict:
    """Header plus per-channel min/max/mean, for `calm data inspect`."""
    header = read_clip_header(path)
    clip = read_clip(path)
    stats = {}
    for ci, name in enumerate(header["channels"]):
        col = clip.frames[:, ci]
        stats[name] = {"min": float(col.min()), "max": float(col.max()),
                       "mean": float(col.mean())}
    return {**{k: header[k] for k in ("version", "dt", "n_frames", "channels")},
            "duration": clip.duration, "channel_stats": stats}


def save_dataset(ds: MotionDataset, out_dir: Path | str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"version": CLIP_VERSION, "seed": ds.rng_seed, "clips": []}
    for clip in ds.clips:
        fname = f"{clip.id}.clip"
        write_clip(out / fname, clip)
        manifest["clips"].append({
            "id": clip.id, "style_label": clip.style_label, "file": fname,
            "frames": clip.n_frames, "duration": clip.duration,
        })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(in_dir: Path | str) -> MotionDataset:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "manifest.json").read_text())
    clips = [read_clip(in_dir / entry["file"], clip_id=entry["id"],
                       style_label=entry["style_label"])
             for entry in manifest["clips"]]
    return MotionDataset(clips=clips, rng_seed=manifest["seed"])
