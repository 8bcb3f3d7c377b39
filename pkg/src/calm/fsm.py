"""Skill composition without learning: a declarative state machine drives
the trained stack at inference time.

Each FSM state either feeds a style's anchor latent straight to the
low-level policy (DirectLatent) or asks the high-level controller to move
toward a bound target in a commanded style (DirectedMotion). Transitions
are guarded by distance/timer/target predicates, evaluated every
simulator tick in document order with the first match firing; at most one
transition fires per tick, so `always` chains resolve across consecutive
ticks. No parameters change anywhere in here.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hlc import HL_RATIO, HighLevelBundle, style_anchor_table, to_char_frame
from .motion import DT, MotionDataset, sample_reset_states
from .pretrain import PolicyBundle, theta_fingerprint
from .sim import (
    SimConfig,
    StrikeTarget,
    observe_batch,
    step_batch,
    strike_target_step,
)

logger = logging.getLogger("calm.fsm")

FSM_VERSION = 1
TARGET_DOWN_THRESHOLD = 0.1

PREDICATE_KINDS = ("distance_lt", "distance_gt", "timer_ge", "target_down",
                   "always", "never")


# ---------------------------------------------------------------------------
# Spec types.

@dataclass(frozen=True)
class Predicate:
    kind: str
    parameter: float = 0.0
    target: str | None = None

    def __post_init__(self):
        if self.kind not in PREDICATE_KINDS:
            raise ValueError(f"unknown predicate kind {self.kind!r}")
        if self.parameter < 0:
            raise ValueError(f"predicate parameter {self.parameter} negative")


@dataclass(frozen=True)
class DirectLatent:
    motion: str


@dataclass(frozen=True)
class DirectedMotion:
    motion: str
    target: str


@dataclass(frozen=True)
class FsmState:
    name: str
    action: DirectLatent | DirectedMotion
    # (predicate, next state name); next is None only for terminal `never`
    transitions: tuple[tuple[Predicate, str | None], ...]


@dataclass(frozen=True)
class FsmSpec:
    initial: str
    states: tuple[FsmState, ...]
    targets: dict[str, str] = field(default_factory=dict)  # name -> point|strike
    name: str = ""
    version: int = FSM_VERSION

    def state(self, name: str) -> FsmState:
        for s in self.states:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def motions(self) -> set[str]:
        return {s.action.motion for s in self.states}


class FsmParseError(ValueError):
    """Carries every problem found in a document, each tagged with its line."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = list(errors)
        lines = "; ".join(f"line {ln}: {msg}" for ln, msg in self.errors)
        super().__init__(f"invalid fsm document: {lines}")


# ---------------------------------------------------------------------------
# Parser.

def _parse_when(rest: str, ln: int, errors: list) -> tuple[Predicate, str | None] | None:
    arrow = rest.split("->")
    head = arrow[0].split()
    if not head:
        errors.append((ln, "empty predicate"))
        return None
    kind = head[0]
    if kind not in PREDICATE_KINDS:
        errors.append((ln, f"unknown predicate {kind!r}"))
        return None
    target = None
    param = 0.0
    args = head[1:]
    try:
        if kind in ("distance_lt", "distance_gt"):
            if len(args) == 1:
                param = float(args[0])
            elif len(args) == 2:
                target, param = args[0], float(args[1])
            else:
                errors.append((ln, f"{kind} takes [target] meters"))
                return None
        elif kind == "timer_ge":
            if len(args) != 1:
                errors.append((ln, "timer_ge takes seconds"))
                return None
            param = float(args[0])
        elif kind == "target_down":
            if len(args) > 1:
                errors.append((ln, "target_down takes at most a target name"))
                return None
            target = args[0] if args else None
        elif args:
            errors.append((ln, f"{kind} takes no arguments"))
            return None
    except ValueError:
        errors.append((ln, f"bad number in {kind!r}"))
        return None
    if param < 0:
        errors.append((ln, f"{kind} parameter must be >= 0"))
        return None

    if kind == "never":
        if len(arrow) > 1:
            errors.append((ln, "never is terminal and takes no next state"))
            return None
        return Predicate(kind), None
    if len(arrow) != 2 or not arrow[1].split():
        errors.append((ln, f"{kind} needs '-> <state>'"))
        return None
    nxt = arrow[1].split()
    if len(nxt) != 1:
        errors.append((ln, "next state must be a single name"))
        return None
    return Predicate(kind, param, target), nxt[0]


def parse_fsm(text: str, known_motions: set[str] | None = None) -> FsmSpec:
    """Parse and validate a versioned FSM document.

    Collects every error (with its line number) before raising, so a bad
    document reports all problems at once. `known_motions`, when given,
    validates motion ids against the dataset.
    """
    errors: list[tuple[int, str]] = []
    name = ""
    initial: str | None = None
    initial_ln = 0
    targets: dict[str, str] = {}
    states: list[dict] = []
    cur: dict | None = None
    saw_header = False

    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        indented = line[0] in " \t"
        body = line.strip()

        if not saw_header:
            if body == f"fsm v{FSM_VERSION}":
                saw_header = True
                continue
            errors.append((ln, f"document must start with 'fsm v{FSM_VERSION}'"))
            saw_header = True  # keep parsing for more errors

        if indented:
            if cur is None:
                errors.append((ln, "indented line outside a state block"))
                continue
            if body.startswith("motion:"):
                cur["motion"] = (body[len("motion:"):].strip(), ln)
            elif body.startswith("directed:"):
                cur["directed"] = (body[len("directed:"):].strip(), ln)
            elif body.startswith("when "):
                parsed = _parse_when(body[len("when "):], ln, errors)
                if parsed is not None:
                    cur["when"].append(parsed)
            else:
                errors.append((ln, f"unknown state field {body.split(':')[0]!r}"))
            continue

        cur = None
        if body.startswith("name:"):
            name = body[len("name:"):].strip()
        elif body.startswith("initial:"):
            if initial is not None:
                errors.append((ln, "duplicate initial declaration"))
            initial = body[len("initial:"):].strip()
            initial_ln = ln
        elif body.startswith("target "):
            parts = body.split()
            if len(parts) == 2:
                tname, kind = parts[1], "point"
            elif len(parts) == 3 and parts[2] in ("point", "strike"):
                tname, kind = parts[1], parts[2]
            else:
                errors.append((ln, "target takes <name> [point|strike]"))
                continue
            if tname in targets:
                errors.append((ln, f"duplicate target {tname!r}"))
            targets[tname] = kind
        elif body.startswith("state ") and body.endswith(":"):
            sname = body[len("state "):-1].strip()
            if any(s["name"] == sname for s in states):
                errors.append((ln, f"duplicate state {sname!r}"))
            cur = {"name": sname, "line": ln, "motion": None, "directed": None,
                   "when": []}
            states.append(cur)
        else:
            errors.append((ln, f"unrecognized line {body!r}"))

    # semantic validation
    state_names = {s["name"] for s in states}
    if initial is None:
        errors.append((0, "no initial state"))
    elif initial not in state_names:
        errors.append((initial_ln, f"initial state {initial!r} does not exist"))

    built: list[FsmState] = []
    for s in states:
        ln = s["line"]
        if s["motion"] is None:
            errors.append((ln, f"state {s['name']!r} has no motion"))
            motion = ""
        else:
            motion, mln = s["motion"]
            if known_motions is not None and motion not in known_motions:
                errors.append((mln, f"unknown motion {motion!r}"))
        if s["directed"] is not None:
            tgt, dln = s["directed"]
            if tgt not in targets:
                errors.append((dln, f"directed target {tgt!r} not declared"))
            action: DirectLatent | DirectedMotion = DirectedMotion(motion, tgt)
        else:
            action = DirectLatent(motion)
        if not s["when"]:
            errors.append((ln, f"state {s['name']!r} has no transitions "
                               "(use 'when never' for a terminal state)"))
        transitions = []
        for pred, nxt in s["when"]:
            if nxt is not None and nxt not in state_names:
                errors.append((ln, f"state {s['name']!r} references unknown "
                                   f"state {nxt!r}"))
            resolved = pred
            if pred.kind in ("distance_lt", "distance_gt", "target_down"):
                tname = pred.target
                if tname is None and s["directed"] is not None:
                    tname = s["directed"][0]
                if tname is None and len(targets) == 1:
                    tname = next(iter(targets))
                if tname is None:
                    errors.append((ln, f"{pred.kind} in state {s['name']!r} "
                                       "cannot resolve a target"))
                elif tname not in targets:
                    errors.append((ln, f"predicate target {tname!r} not declared"))
                elif pred.kind == "target_down" and targets.get(tname) != "strike":
                    errors.append((ln, f"target_down needs a strike target, "
                                       f"{tname!r} is a point"))
                resolved = Predicate(pred.kind, pred.parameter, tname)
            transitions.append((resolved, nxt))
        built.append(FsmState(s["name"], action, tuple(transitions)))

    if errors:
        raise FsmParseError(sorted(errors))
    return FsmSpec(initial=initial, states=tuple(built), targets=targets,
                   name=name)


# ---------------------------------------------------------------------------
# Runtime.

@dataclass
class DirectorState:
    state: FsmState
    entry_tick: int
    z: np.ndarray
    mode: str  # "HighLevel" | "LowLevelDirect"
    latent_id: str


def eval_predicate(pred: Predicate, director: DirectorState, tick: int,
                   state_arr: np.ndarray, targets: dict) -> bool:
    """Pure transition guard; time comes from the tick counter."""
    if pred.kind == "always":
        return True
    if pred.kind == "never":
        return False
    if pred.kind == "timer_ge":
        return (tick - director.entry_tick) * DT >= pred.parameter
    tgt = targets[pred.target]
    if pred.kind == "target_down":
        return tgt.up < TARGET_DOWN_THRESHOLD
    dist = float(np.linalg.norm(state_arr[0:2] - tgt.pos))
    if pred.kind == "distance_lt":
        return dist < pred.parameter
    return dist > pred.parameter


@dataclass
class PointTarget:
    pos: np.ndarray

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(2)


@dataclass
class EpisodeTrace:
    spec_name: str
    records: list[dict] = field(default_factory=list)
    transitions: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    obs: np.ndarray | None = None  # (T, 16) when requested

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w") as f:
            f.write(json.dumps({"v": FSM_VERSION, "spec": self.spec_name,
                                "meta": self.meta}) + "\n")
            for rec in self.records:
                f.write(json.dumps(rec) + "\n")
        return path

    @property
    def visited_states(self) -> list[str]:
        out = []
        for rec in self.records:
            if not out or out[-1] != rec["state"]:
                out.append(rec["state"])
        return out


def _latent_hash(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z).tobytes()).hexdigest()[:8]


def bind_targets(spec: FsmSpec, bindings: dict) -> dict:
    """Instantiate declared targets from position bindings.

    Every target referenced by any state must be bound; the error names
    the states that need the missing target.
    """
    out = {}
    for name, kind in spec.targets.items():
        if name not in bindings:
            needing = [s.name for s in spec.states
                       if (isinstance(s.action, DirectedMotion)
                           and s.action.target == name)
                       or any(p.target == name for p, _ in s.transitions)]
            if needing:
                raise ValueError(f"target {name!r} is unbound but required by "
                                 f"state(s): {', '.join(needing)}")
            continue
        bound = bindings[name]
        if isinstance(bound, (PointTarget, StrikeTarget)):
            out[name] = bound
            continue
        pos = np.asarray(bound, dtype=np.float64).reshape(2)
        out[name] = (StrikeTarget(pos=pos) if kind == "strike"
                     else PointTarget(pos=pos))
    return out


class FsmDriver:
    """Incremental FSM executor: validates the spec against the stack, owns
    the director state, anchor latents, and target dynamics. The caller owns
    simulator stepping: call `pre_step` to get the latent for this tick,
    step the simulator, then `post_step` to advance target dynamics."""

    def __init__(self, spec: FsmSpec, bundle: PolicyBundle,
                 hl: HighLevelBundle | None, ds: MotionDataset,
                 bindings: dict):
        known = {c.style_label for c in ds.clips}
        missing = spec.motions - known
        if missing:
            raise ValueError(f"spec references motions absent from the "
                             f"dataset: {', '.join(sorted(missing))}")
        directed = sorted({s.action.motion for s in spec.states
                           if isinstance(s.action, DirectedMotion)})
        if directed:
            if hl is None:
                raise ValueError("spec has DirectedMotion states but no "
                                 "high-level controller was given")
            if hl.cfg.mode != "heading":
                raise ValueError("high-level controller must be heading mode")
            hl.verify_frozen(bundle)
            outside = [m for m in directed if m not in hl.cfg.styles]
            if outside:
                raise ValueError(
                    f"DirectedMotion style(s) outside the trained set "
                    f"{tuple(hl.cfg.styles)}: {', '.join(outside)}")

        direct_motions = sorted({s.action.motion for s in spec.states
                                 if isinstance(s.action, DirectLatent)})
        anchors, _ = (style_anchor_table(bundle.encoder, ds,
                                         tuple(direct_motions))
                      if direct_motions else (np.zeros((0, 1)), []))
        self.spec = spec
        self.hl = hl
        self.direct_anchor = {m: anchors[i]
                              for i, m in enumerate(direct_motions)}
        self.targets = bind_targets(spec, bindings)
        self.tick = 0
        self.director = self._enter(spec.state(spec.initial), 0)

    def _enter(self, state: FsmState, tick: int) -> DirectorState:
        if isinstance(state.action, DirectLatent):
            z = self.direct_anchor[state.action.motion]
            return DirectorState(state, tick, z, "LowLevelDirect",
                                 state.action.motion)
        z = np.zeros(self.hl.policy.action_dim)  # filled by the first command
        return DirectorState(state, tick, z, "HighLevel", "hl:--------")

    def _hl_command(self, state_arr: np.ndarray) -> None:
        director = self.director
        action = director.state.action
        tgt = self.targets[action.target]
        rel = tgt.pos - state_arr[0:2]
        dist = np.linalg.norm(rel)
        dstar = rel / dist if dist > 1e-9 else np.array([1.0, 0.0])
        one_hot = np.zeros(len(self.hl.cfg.styles))
        one_hot[self.hl.cfg.styles.index(action.motion)] = 1.0
        obs_hl = np.concatenate([
            observe_batch(state_arr),
            to_char_frame(state_arr[None], dstar[None])[0],
            one_hot,
        ])
        director.z = self.hl.command(obs_hl[None])[0]
        director.latent_id = "hl:" + _latent_hash(director.z)

    def pre_step(self, state_arr: np.ndarray) -> dict | None:
        """Fire at most one transition, refresh the latent command.

        Returns the transition record when one fired, else None; the latent
        for this tick is `self.director.z` afterwards."""
        fired = None
        director = self.director
        for pred, nxt in director.state.transitions:
            if eval_predicate(pred, director, self.tick, state_arr,
                              self.targets):
                if nxt is not None:
                    fired = {"tick": self.tick, "from": director.state.name,
                             "to": nxt, "predicate": pred.kind}
                    director = self._enter(self.spec.state(nxt), self.tick)
                    self.director = director
                break
        if director.mode == "HighLevel" and \
                (self.tick - director.entry_tick) % HL_RATIO == 0:
            self._hl_command(state_arr)
        return fired

    def post_step(self, state_arr: np.ndarray) -> list[str]:
        """Advance target dynamics after the simulator tick; returns events."""
        events = []
        for tname, tgt in self.targets.items():
            if isinstance(tgt, StrikeTarget):
                new_tgt, root_hit = strike_target_step(tgt, state_arr)
                self.targets[tname] = new_tgt
                if root_hit:
                    events.append(f"root_contact:{tname}")
        self.tick += 1
        return events

    def targets_snapshot(self, digits: int | None = 6) -> dict:
        def num(x):
            return round(float(x), digits) if digits is not None else float(x)
        return {k: {"pos": [num(x) for x in v.pos],
                    **({"up": float(v.up)}
                       if isinstance(v, StrikeTarget) else {})}
                for k, v in self.targets.items()}


def run_fsm(spec: FsmSpec, bundle: PolicyBundle, hl: HighLevelBundle | None,
            ds: MotionDataset, bindings: dict, n_ticks: int, seed: int = 0,
            sim_cfg: SimConfig | None = None, record_obs: bool = False,
            start_state: np.ndarray | None = None) -> EpisodeTrace:
    """Run one episode under the FSM; pure inference.

    DirectedMotion states require `hl` (heading mode) and their motion must
    be in its style set; DirectLatent states feed the style's anchor code
    straight to the low-level policy. Network parameters are fingerprinted
    before and after and must not change.
    """
    sim_cfg = sim_cfg or SimConfig()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 31)))
    fp_args = lambda: (bundle.encoder.theta, bundle.policy.theta,
                       *(() if hl is None else (hl.policy.theta,)))
    fp_before = theta_fingerprint(*fp_args())
    driver = FsmDriver(spec, bundle, hl, ds, bindings)
    if start_state is None:
        state_arr = sample_reset_states(ds, rng, 1)[0]
    else:
        state_arr = np.array(start_state, dtype=np.float64)

    trace = EpisodeTrace(spec_name=spec.name or "fsm", meta={
        "seed": seed, "n_ticks": n_ticks,
        "fingerprint_before": fp_before,
        "bindings": {k: [float(x) for x in v.pos]
                     for k, v in driver.targets.items()},
    })
    obs_track = np.empty((n_ticks, 16)) if record_obs else None

    for tick in range(n_ticks):
        fired = driver.pre_step(state_arr)
        if fired is not None:
            trace.transitions.append(fired)

        obs = observe_batch(state_arr)
        if record_obs:
            obs_track[tick] = obs
        a, _ = bundle.policy.mean(obs[None], driver.director.z[None])
        state_arr = step_batch(state_arr[None],
                               np.asarray(a, dtype=np.float64), sim_cfg)[0]
        events = driver.post_step(state_arr)

        trace.records.append({
            "t": round(tick * DT, 6),
            "state": driver.director.state.name,
            "mode": driver.director.mode,
            "root": [round(float(x), 6) for x in state_arr[0:2]],
            "heading": round(float(state_arr[2]), 6),
            "speed": round(float(np.linalg.norm(state_arr[3:5])), 6),
            "latent": driver.director.latent_id,
            "targets": driver.targets_snapshot(),
            **({"events": events} if events else {}),
        })

    fp_after = theta_fingerprint(*fp_args())
    if fp_after != fp_before:
        raise AssertionError("network parameters changed during fsm inference")
    trace.meta["fingerprint_after"] = fp_after
    trace.meta["final_targets"] = driver.targets_snapshot(digits=None)
    if record_obs:
        trace.obs = obs_track
    return trace


# ---------------------------------------------------------------------------
# Stock documents.

def location_fsm_text(locomotion: str = "run", approach: str = "walk",
                      ending: str = "idle", far: float = 2.5,
                      near: float = 0.55) -> str:
    """Sprint to a flag, slow for the final approach, settle into `ending`.

    The two-stage approach exists because the ending style carries almost
    no braking authority: momentum at the handoff becomes glide distance,
    so the handoff happens at low speed.
    """
    return f"""fsm v1
name: location
initial: sprint
target flag

state sprint:
  motion: {locomotion}
  directed: flag
  when distance_lt {far} -> approach

state approach:
  motion: {approach}
  directed: flag
  when distance_lt {near} -> settle

state settle:
  motion: {ending}
  when never
"""


def strike_fsm_text(locomotion: str = "walk", strike: str = "strike",
                    ending: str = "celebrate", near: float = 0.85) -> str:
    """Walk to a standing target, knock it down, celebrate."""
    return f"""fsm v1
name: strike
initial: approach
target dummy strike

state approach:
  motion: {locomotion}
  directed: dummy
  when distance_lt {near} -> attack

state attack:
  motion: {strike}
  when target_down -> celebrate

state celebrate:
  motion: {ending}
  when never
"""


def teaser_fsm_text() -> str:
    """Crouch-walk to the target, kick when within range, celebrate."""
    return """fsm v1
name: teaser
initial: stalk
target dummy strike

state stalk:
  motion: crouch_walk
  directed: dummy
  when distance_lt 1.0 -> kick

state kick:
  motion: strike
  when target_down -> celebrate
  when timer_ge 4.0 -> celebrate

state celebrate:
  motion: celebrate
  when never
"""


STOCK_FSM_TEXTS = {
    "location": location_fsm_text,
    "strike": strike_fsm_text,
    "teaser": teaser_fsm_text,
}


# ---------------------------------------------------------------------------
# Suite evaluation.

def evaluate_fsm_suite(bundle: PolicyBundle, hl: HighLevelBundle,
                       ds: MotionDataset, clf=None, n_episodes: int = 25,
                       n_ticks: int = 360, seed: int = 0,
                       sim_cfg: SimConfig | None = None,
                       reach_threshold: float = 0.5) -> dict:
    """Location and Strike episodes with randomized target placement.

    Location reports the fraction of episodes ending within
    `reach_threshold` of the flag plus (given a classifier) how often the
    final 2 s window classifies as the ending style. Strike reports the
    fraction with the target down at the horizon.
    """
    from .metrics import rollout_posteriors
    rng = np.random.default_rng(np.random.SeedSequence((seed, 37)))
    known = {c.style_label for c in ds.clips}
    loc_spec = parse_fsm(location_fsm_text(), known)
    strike_spec = parse_fsm(strike_fsm_text(), known)
    ending = loc_spec.state("settle").action.motion

    loc_hits, end_hits, final_dists = [], [], []
    for ep in range(n_episodes):
        ang = rng.uniform(-np.pi, np.pi)
        rad = rng.uniform(3.0, 5.0)
        flag = np.array([rad * np.cos(ang), rad * np.sin(ang)])
        trace = run_fsm(loc_spec, bundle, hl, ds, {"flag": flag}, n_ticks,
                        seed=seed * 10_000 + ep, sim_cfg=sim_cfg,
                        record_obs=clf is not None)
        final_root = np.array(trace.records[-1]["root"])
        dist = float(np.linalg.norm(final_root - flag))
        final_dists.append(dist)
        loc_hits.append(dist < reach_threshold)
        if clf is not None:
            posts = rollout_posteriors(clf, trace.obs[None][:, -60:],
                                       skip=0, stride=5)
            end_hits.append(bool(np.argmax(posts[0])
                                 == clf.styles.index(ending)))

    down_hits = []
    for ep in range(n_episodes):
        ang = rng.uniform(-np.pi, np.pi)
        rad = rng.uniform(2.0, 3.5)
        dummy = np.array([rad * np.cos(ang), rad * np.sin(ang)])
        trace = run_fsm(strike_spec, bundle, hl, ds, {"dummy": dummy}, n_ticks,
                        seed=seed * 10_000 + 5_000 + ep, sim_cfg=sim_cfg)
        down_hits.append(trace.meta["final_targets"]["dummy"]["up"]
                         < TARGET_DOWN_THRESHOLD)

    return {
        "location": {
            "reach_rate": float(np.mean(loc_hits)),
            "mean_final_distance": float(np.mean(final_dists)),
            "ending_accuracy": float(np.mean(end_hits)) if end_hits else None,
            "n_episodes": n_episodes,
        },
        "strike": {
            "down_rate": float(np.mean(down_hits)),
            "n_episodes": n_episodes,
        },
    }
