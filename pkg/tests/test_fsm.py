"""FSM composition: document parsing with exhaustive error reporting,
predicate semantics, runtime transition mechanics, command-hold contracts,
frozen-parameter enforcement, and trace replay determinism."""

import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from calm.fsm import (
    DirectedMotion,
    DirectLatent,
    DirectorState,
    FsmParseError,
    FsmState,
    PointTarget,
    Predicate,
    bind_targets,
    eval_predicate,
    evaluate_fsm_suite,
    location_fsm_text,
    parse_fsm,
    run_fsm,
    strike_fsm_text,
    teaser_fsm_text,
)
from calm.hlc import HighLevelBundle, HlcConfig, style_anchor_table
from calm.motion import DT, default_style_suite
from calm.ppo import MlpGaussianPolicy
from calm.pretrain import PolicyBundle, PretrainConfig, build_models
from calm.sim import OBS_DIM, StrikeTarget

ALL_MOTIONS = {"walk", "run", "crouch_walk", "idle", "strike", "celebrate"}


@pytest.fixture(scope="module")
def ds():
    return default_style_suite(0, styles=["walk", "run"])


@pytest.fixture(scope="module")
def ds5():
    return default_style_suite(0, styles=["walk", "run", "idle", "strike",
                                          "celebrate"])


@pytest.fixture(scope="module")
def bundle():
    cfg = PretrainConfig(latent_dim=4, n_envs=8, rollout_len=8, enc_hidden=(32,),
                         policy_hidden=(32,), disc_hidden=(32,), value_hidden=(32,),
                         head_widths=(8,), minibatch=32)
    return PolicyBundle(cfg, *build_models(cfg))


def make_hl(bundle, ds, styles):
    cfg = HlcConfig(mode="heading", styles=styles, policy_hidden=(32,),
                    value_hidden=(32,))
    policy = MlpGaussianPolicy(OBS_DIM + 2 + len(styles), bundle.cfg.latent_dim,
                               (32,), init_log_std=np.log(0.3), learn_std=False,
                               seed=7, dtype="float64")
    anchors, _ = style_anchor_table(bundle.encoder, ds, styles)
    return HighLevelBundle(cfg, policy, anchors, bundle.fingerprint)


@pytest.fixture(scope="module")
def hl(bundle, ds):
    return make_hl(bundle, ds, ("walk", "run"))


def tiny_bundle():
    cfg = PretrainConfig(latent_dim=4, n_envs=8, rollout_len=8, enc_hidden=(32,),
                         policy_hidden=(32,), disc_hidden=(32,), value_hidden=(32,),
                         head_widths=(8,), minibatch=32, seed=3)
    return PolicyBundle(cfg, *build_models(cfg))


# ---------------------------------------------------------------------------
# Parsing: the stock documents.

def test_location_document_round_trip():
    spec = parse_fsm(location_fsm_text(), ALL_MOTIONS)
    assert spec.name == "location"
    assert spec.initial == "sprint"
    assert [s.name for s in spec.states] == ["sprint", "approach", "settle"]
    assert spec.targets == {"flag": "point"}
    sprint = spec.state("sprint")
    assert sprint.action == DirectedMotion("run", "flag")
    pred, nxt = sprint.transitions[0]
    assert (pred.kind, pred.target, nxt) == ("distance_lt", "flag", "approach")
    assert pred.parameter == 2.5
    settle = spec.state("settle")
    assert settle.action == DirectLatent("idle")
    assert settle.transitions == ((Predicate("never"), None),)


def test_strike_document_targets_and_predicates():
    spec = parse_fsm(strike_fsm_text(), ALL_MOTIONS)
    assert spec.targets == {"dummy": "strike"}
    pred, nxt = spec.state("attack").transitions[0]
    # bare target_down resolves to the sole declared target
    assert (pred.kind, pred.target, nxt) == ("target_down", "dummy", "celebrate")


def test_teaser_document_parses():
    spec = parse_fsm(teaser_fsm_text(), ALL_MOTIONS)
    assert spec.motions == {"crouch_walk", "strike", "celebrate"}
    kinds = [p.kind for p, _ in spec.state("kick").transitions]
    assert kinds == ["target_down", "timer_ge"]


# ---------------------------------------------------------------------------
# Parsing: error reporting.

def err_lines(excinfo):
    return excinfo.value.errors


def test_empty_document_reports_no_initial():
    with pytest.raises(FsmParseError, match="no initial state"):
        parse_fsm("")


def test_missing_header_rejected():
    doc = "initial: a\nstate a:\n  motion: walk\n  when never\n"
    with pytest.raises(FsmParseError, match="fsm v1") as ei:
        parse_fsm(doc)
    assert err_lines(ei)[0][0] == 1


def test_unknown_motion_named_with_line():
    doc = "fsm v1\ninitial: a\nstate a:\n  motion: fly\n  when never\n"
    with pytest.raises(FsmParseError, match="'fly'") as ei:
        parse_fsm(doc, ALL_MOTIONS)
    assert any(ln == 4 for ln, _ in err_lines(ei))


def test_dangling_next_state():
    doc = ("fsm v1\ninitial: a\nstate a:\n  motion: walk\n"
           "  when timer_ge 1.0 -> ghost\n")
    with pytest.raises(FsmParseError, match="unknown state 'ghost'"):
        parse_fsm(doc, ALL_MOTIONS)


def test_duplicate_state_and_target():
    doc = ("fsm v1\ninitial: a\ntarget t\ntarget t\n"
           "state a:\n  motion: walk\n  when never\n"
           "state a:\n  motion: run\n  when never\n")
    with pytest.raises(FsmParseError) as ei:
        parse_fsm(doc, ALL_MOTIONS)
    msgs = [m for _, m in err_lines(ei)]
    assert any("duplicate target 't'" in m for m in msgs)
    assert any("duplicate state 'a'" in m for m in msgs)


def test_all_errors_collected_at_once():
    doc = ("fsm v1\n"
           "initial: ghost\n"            # line 2: missing state
           "state a:\n"
           "  motion: fly\n"             # line 4: unknown motion
           "  when warp 1 -> a\n"        # line 5: unknown predicate
           "state b:\n"
           "  motion: walk\n")           # state b: no transitions
    with pytest.raises(FsmParseError) as ei:
        parse_fsm(doc, ALL_MOTIONS)
    errs = err_lines(ei)
    assert len(errs) >= 4
    assert errs == sorted(errs)
    lines = [ln for ln, _ in errs]
    assert 2 in lines and 4 in lines and 5 in lines


def test_state_without_transitions():
    doc = "fsm v1\ninitial: a\nstate a:\n  motion: walk\n"
    with pytest.raises(FsmParseError, match="when never"):
        parse_fsm(doc, ALL_MOTIONS)


def test_negative_parameter_rejected():
    doc = ("fsm v1\ninitial: a\nstate a:\n  motion: walk\n"
           "  when timer_ge -2.0 -> a\n  when never\n")
    with pytest.raises(FsmParseError, match=">= 0"):
        parse_fsm(doc, ALL_MOTIONS)


def test_bad_number_rejected():
    doc = ("fsm v1\ninitial: a\ntarget t\nstate a:\n  motion: walk\n"
           "  when distance_lt t soon -> a\n  when never\n")
    with pytest.raises(FsmParseError, match="bad number"):
        parse_fsm(doc, ALL_MOTIONS)


def test_target_down_on_point_target_rejected():
    doc = ("fsm v1\ninitial: a\ntarget flag\nstate a:\n  motion: walk\n"
           "  when target_down flag -> a\n  when never\n")
    with pytest.raises(FsmParseError, match="strike target"):
        parse_fsm(doc, ALL_MOTIONS)


TWO_TARGET_DOC = ("fsm v1\ninitial: a\ntarget flag\ntarget base\n"
                  "state a:\n  motion: walk\n"
                  "  when distance_lt base 2.0 -> b\n  when never\n"
                  "state b:\n  motion: walk\n  when never\n")


def test_distance_with_explicit_target():
    spec = parse_fsm(TWO_TARGET_DOC, ALL_MOTIONS)
    pred, _ = spec.state("a").transitions[0]
    assert pred.target == "base"


def test_unresolvable_distance_target():
    doc = ("fsm v1\ninitial: a\ntarget flag\ntarget base\n"
           "state a:\n  motion: walk\n  when distance_lt 2.0 -> a\n"
           "  when never\n")
    with pytest.raises(FsmParseError, match="cannot resolve a target"):
        parse_fsm(doc, ALL_MOTIONS)


def test_never_with_next_rejected():
    doc = "fsm v1\ninitial: a\nstate a:\n  motion: walk\n  when never -> a\n"
    with pytest.raises(FsmParseError, match="terminal"):
        parse_fsm(doc, ALL_MOTIONS)


def test_always_with_args_rejected():
    doc = ("fsm v1\ninitial: a\nstate a:\n  motion: walk\n"
           "  when always 3.0 -> a\n")
    with pytest.raises(FsmParseError, match="no arguments"):
        parse_fsm(doc, ALL_MOTIONS)


def test_unknown_predicate_kind():
    doc = "fsm v1\ninitial: a\nstate a:\n  motion: walk\n  when sonar 1 -> a\n"
    with pytest.raises(FsmParseError, match="unknown predicate 'sonar'"):
        parse_fsm(doc, ALL_MOTIONS)


def test_indented_line_outside_block():
    doc = "fsm v1\n  motion: walk\ninitial: a\nstate a:\n  motion: walk\n  when never\n"
    with pytest.raises(FsmParseError, match="outside a state block"):
        parse_fsm(doc)


def test_unrecognized_line():
    doc = "fsm v1\nbogus here\ninitial: a\nstate a:\n  motion: walk\n  when never\n"
    with pytest.raises(FsmParseError, match="unrecognized line"):
        parse_fsm(doc)


def test_duplicate_initial_rejected():
    doc = ("fsm v1\ninitial: a\ninitial: a\nstate a:\n  motion: walk\n"
           "  when never\n")
    with pytest.raises(FsmParseError, match="duplicate initial"):
        parse_fsm(doc)


def test_comments_and_blanks_ignored():
    doc = ("# a comment\n\nfsm v1\nname: demo  # trailing\n\ninitial: a\n"
           "state a:\n  motion: walk  # stay\n  when never\n")
    spec = parse_fsm(doc, ALL_MOTIONS)
    assert spec.name == "demo"
    assert spec.state("a").action == DirectLatent("walk")


def test_directed_target_must_be_declared():
    doc = ("fsm v1\ninitial: a\nstate a:\n  motion: walk\n  directed: flag\n"
           "  when never\n")
    with pytest.raises(FsmParseError, match="'flag' not declared"):
        parse_fsm(doc, ALL_MOTIONS)


def test_predicate_type_validation():
    with pytest.raises(ValueError, match="unknown predicate kind"):
        Predicate("sonar")
    with pytest.raises(ValueError, match="negative"):
        Predicate("timer_ge", -1.0)


@given(st.floats(min_value=0, max_value=1e6, allow_nan=False,
                 allow_infinity=False))
def test_parameter_survives_document(p):
    doc = (f"fsm v1\ninitial: a\ntarget t\nstate a:\n  motion: walk\n"
           f"  when distance_lt t {p!r} -> a\n  when never\n")
    spec = parse_fsm(doc)
    assert spec.state("a").transitions[0][0].parameter == p


# ---------------------------------------------------------------------------
# Predicate semantics.

def _director(entry_tick=0):
    state = FsmState("s", DirectLatent("walk"), ())
    return DirectorState(state, entry_tick, np.zeros(4), "LowLevelDirect", "walk")


def test_timer_threshold():
    d = _director(entry_tick=10)
    arr = np.zeros(16)
    pred = Predicate("timer_ge", 0.99)
    assert not eval_predicate(pred, d, 39, arr, {})   # 29 ticks = 0.967 s
    assert eval_predicate(pred, d, 40, arr, {})       # 30 ticks = 1.0 s


def test_distance_predicates_strict():
    d = _director()
    arr = np.zeros(16)
    targets = {"t": PointTarget((3.0, 4.0))}
    assert not eval_predicate(Predicate("distance_lt", 5.0, "t"), d, 0, arr, targets)
    assert eval_predicate(Predicate("distance_lt", 5.01, "t"), d, 0, arr, targets)
    assert eval_predicate(Predicate("distance_gt", 4.99, "t"), d, 0, arr, targets)
    assert not eval_predicate(Predicate("distance_gt", 5.0, "t"), d, 0, arr, targets)


def test_target_down_threshold():
    d = _director()
    arr = np.zeros(16)
    up = {"t": StrikeTarget(pos=(1.0, 0.0), up=1.0)}
    down = {"t": StrikeTarget(pos=(1.0, 0.0), up=0.05)}
    assert not eval_predicate(Predicate("target_down", target="t"), d, 0, arr, up)
    assert eval_predicate(Predicate("target_down", target="t"), d, 0, arr, down)


def test_always_and_never():
    d = _director()
    arr = np.zeros(16)
    assert eval_predicate(Predicate("always"), d, 0, arr, {})
    assert not eval_predicate(Predicate("never"), d, 0, arr, {})


# ---------------------------------------------------------------------------
# Target binding.

def test_unbound_target_names_states():
    spec = parse_fsm(location_fsm_text(), ALL_MOTIONS)
    with pytest.raises(ValueError) as ei:
        bind_targets(spec, {})
    assert "flag" in str(ei.value)
    assert "sprint" in str(ei.value)


def test_unreferenced_target_may_stay_unbound():
    spec = parse_fsm(TWO_TARGET_DOC, ALL_MOTIONS)
    targets = bind_targets(spec, {"base": (0.0, 1.0)})
    assert "flag" not in targets
    assert isinstance(targets["base"], PointTarget)


def test_binding_kinds_and_passthrough():
    spec = parse_fsm(strike_fsm_text(), ALL_MOTIONS)
    t1 = bind_targets(spec, {"dummy": (1.0, 2.0)})["dummy"]
    assert isinstance(t1, StrikeTarget) and t1.up == 1.0
    pre = StrikeTarget(pos=(1.0, 2.0), up=0.3)
    t2 = bind_targets(spec, {"dummy": pre})["dummy"]
    assert t2 is pre


# ---------------------------------------------------------------------------
# Runtime.

SOLO_WALK = ("fsm v1\nname: solo\ninitial: go\nstate go:\n  motion: walk\n"
             "  when never\n")


def test_direct_latent_episode(bundle, ds):
    spec = parse_fsm(SOLO_WALK, ALL_MOTIONS)
    trace = run_fsm(spec, bundle, None, ds, {}, n_ticks=20, seed=1)
    assert len(trace.records) == 20
    assert all(r["state"] == "go" for r in trace.records)
    assert all(r["latent"] == "walk" for r in trace.records)
    assert all(r["mode"] == "LowLevelDirect" for r in trace.records)
    assert trace.meta["fingerprint_before"] == trace.meta["fingerprint_after"]
    assert trace.visited_states == ["go"]
    assert np.isfinite([r["speed"] for r in trace.records]).all()


def test_trace_deterministic(bundle, ds):
    spec = parse_fsm(SOLO_WALK, ALL_MOTIONS)
    a = run_fsm(spec, bundle, None, ds, {}, n_ticks=15, seed=5)
    b = run_fsm(spec, bundle, None, ds, {}, n_ticks=15, seed=5)
    assert json.dumps(a.records) == json.dumps(b.records)


def test_timer_transition_fires_at_tick(bundle, ds):
    doc = ("fsm v1\ninitial: a\nstate a:\n  motion: walk\n"
           "  when timer_ge 0.09 -> b\nstate b:\n  motion: run\n  when never\n")
    spec = parse_fsm(doc, ALL_MOTIONS)
    trace = run_fsm(spec, bundle, None, ds, {}, n_ticks=6, seed=0)
    assert trace.transitions == [
        {"tick": 3, "from": "a", "to": "b", "predicate": "timer_ge"}]
    assert [r["state"] for r in trace.records] == ["a"] * 3 + ["b"] * 3


def test_always_chain_steps_one_per_tick(bundle, ds):
    doc = ("fsm v1\ninitial: a\n"
           "state a:\n  motion: walk\n  when always -> b\n"
           "state b:\n  motion: walk\n  when always -> c\n"
           "state c:\n  motion: run\n  when never\n")
    spec = parse_fsm(doc, ALL_MOTIONS)
    trace = run_fsm(spec, bundle, None, ds, {}, n_ticks=4, seed=0)
    assert [r["state"] for r in trace.records] == ["b", "c", "c", "c"]
    assert [(t["tick"], t["from"], t["to"]) for t in trace.transitions] == [
        (0, "a", "b"), (1, "b", "c")]


def test_immediate_terminal_degenerate(bundle, ds):
    doc = ("fsm v1\ninitial: a\nstate a:\n  motion: walk\n  when always -> end\n"
           "state end:\n  motion: run\n  when never\n")
    spec = parse_fsm(doc, ALL_MOTIONS)
    trace = run_fsm(spec, bundle, None, ds, {}, n_ticks=3, seed=0)
    assert trace.records[0]["state"] == "end"
    assert trace.visited_states == ["end"]


DIRECTED_WALK = ("fsm v1\ninitial: go\ntarget flag\nstate go:\n  motion: walk\n"
                 "  directed: flag\n  when never\n")


def test_directed_requires_hl(bundle, ds):
    spec = parse_fsm(DIRECTED_WALK, ALL_MOTIONS)
    with pytest.raises(ValueError, match="high-level"):
        run_fsm(spec, bundle, None, ds, {"flag": (3.0, 0.0)}, n_ticks=5)


def test_directed_style_outside_trained_set(bundle, ds):
    hl_walk_only = make_hl(bundle, ds, ("walk",))
    doc = DIRECTED_WALK.replace("motion: walk", "motion: run")
    spec = parse_fsm(doc, ALL_MOTIONS)
    with pytest.raises(ValueError, match="outside the trained set.*run"):
        run_fsm(spec, bundle, hl_walk_only, ds, {"flag": (3.0, 0.0)}, n_ticks=5)


def test_unknown_motion_against_dataset(bundle, ds):
    doc = SOLO_WALK.replace("motion: walk", "motion: celebrate")
    spec = parse_fsm(doc)    # no motion check at parse time
    with pytest.raises(ValueError, match="absent from the dataset: celebrate"):
        run_fsm(spec, bundle, None, ds, {}, n_ticks=5)


def test_unbound_target_aborts_with_state_name(bundle, ds, hl):
    spec = parse_fsm(DIRECTED_WALK, ALL_MOTIONS)
    with pytest.raises(ValueError, match="go"):
        run_fsm(spec, bundle, hl, ds, {}, n_ticks=5)


def test_hl_command_held_between_decisions(bundle, ds, hl):
    spec = parse_fsm(DIRECTED_WALK, ALL_MOTIONS)
    trace = run_fsm(spec, bundle, hl, ds, {"flag": (4.0, 1.0)}, n_ticks=12,
                    seed=2)
    ids = [r["latent"] for r in trace.records]
    assert all(i.startswith("hl:") for i in ids)
    assert len(set(ids[0:5])) == 1
    assert len(set(ids[5:10])) == 1
    assert all(r["mode"] == "HighLevel" for r in trace.records)


def test_entry_resets_decision_clock(bundle, ds, hl):
    doc = ("fsm v1\ninitial: a\ntarget flag\n"
           "state a:\n  motion: walk\n  when timer_ge 0.05 -> b\n"
           "state b:\n  motion: walk\n  directed: flag\n  when never\n")
    spec = parse_fsm(doc, ALL_MOTIONS)
    trace = run_fsm(spec, bundle, hl, ds, {"flag": (4.0, 0.0)}, n_ticks=12,
                    seed=2)
    ids = [r["latent"] for r in trace.records]
    # transition lands at tick 2; command issued on entry, held for 5 ticks
    assert trace.transitions[0]["tick"] == 2
    assert ids[0] == ids[1] == "walk"
    assert ids[2].startswith("hl:")
    assert len(set(ids[2:7])) == 1
    assert len(set(ids[7:12])) == 1


def test_strike_document_with_pretoppled_target(bundle, ds5, hl):
    spec = parse_fsm(strike_fsm_text(), ALL_MOTIONS)
    dummy = StrikeTarget(pos=(0.4, 0.0), up=0.0)
    trace = run_fsm(spec, bundle, hl, ds5, {"dummy": dummy}, n_ticks=6, seed=0,
                    start_state=np.zeros(16))
    assert trace.visited_states == ["attack", "celebrate"]
    assert [t["predicate"] for t in trace.transitions] == [
        "distance_lt", "target_down"]


def test_trace_jsonl_round_trip(bundle, ds, tmp_path):
    spec = parse_fsm(SOLO_WALK, ALL_MOTIONS)
    trace = run_fsm(spec, bundle, None, ds, {}, n_ticks=8, seed=3)
    path = trace.write_jsonl(tmp_path / "trace.jsonl")
    lines = path.read_text().splitlines()
    assert len(lines) == 9
    header = json.loads(lines[0])
    assert header["v"] == 1 and header["spec"] == "solo"
    assert "fingerprint_before" in header["meta"]
    rec = json.loads(lines[4])
    assert set(rec) >= {"t", "state", "mode", "root", "heading", "speed",
                        "latent", "targets"}


def test_record_obs_shape(bundle, ds):
    spec = parse_fsm(SOLO_WALK, ALL_MOTIONS)
    trace = run_fsm(spec, bundle, None, ds, {}, n_ticks=10, seed=1,
                    record_obs=True)
    assert trace.obs.shape == (10, 16)
    assert np.isfinite(trace.obs).all()


def test_replay_reproduces_transitions(bundle, ds5, hl):
    """Predicates re-evaluated over the recorded trace must reproduce the
    exact transition sequence."""
    spec = parse_fsm(strike_fsm_text(), ALL_MOTIONS)
    dummy = StrikeTarget(pos=(0.4, 0.0), up=0.0)
    trace = run_fsm(spec, bundle, hl, ds5, {"dummy": dummy}, n_ticks=8, seed=0,
                    start_state=np.zeros(16))

    def targets_at(k):
        if k == 0:
            return {"dummy": SimpleNamespace(pos=np.array([0.4, 0.0]), up=0.0)}
        snap = trace.records[k - 1]["targets"]["dummy"]
        return {"dummy": SimpleNamespace(pos=np.array(snap["pos"]),
                                         up=snap["up"])}

    def root_at(k):
        if k == 0:
            return np.zeros(16)
        arr = np.zeros(16)
        arr[0:2] = trace.records[k - 1]["root"]
        return arr

    cur, entry, fired = spec.state(spec.initial), 0, []
    for k in range(len(trace.records)):
        d = DirectorState(cur, entry, np.zeros(4), "x", "")
        for pred, nxt in cur.transitions:
            if eval_predicate(pred, d, k, root_at(k), targets_at(k)):
                if nxt is not None:
                    fired.append((k, cur.name, nxt, pred.kind))
                    cur, entry = spec.state(nxt), k
                break
    assert fired == [(t["tick"], t["from"], t["to"], t["predicate"])
                     for t in trace.transitions]


def test_parameter_tamper_detected(ds):
    lb = tiny_bundle()
    spec = parse_fsm(SOLO_WALK, ALL_MOTIONS)
    orig = lb.policy.mean
    calls = []

    def leaky(obs, z):
        if not calls:
            lb.encoder.mlp.theta[0] += 1.0
            calls.append(1)
        return orig(obs, z)

    lb.policy.mean = leaky
    with pytest.raises(AssertionError, match="changed during fsm inference"):
        run_fsm(spec, lb, None, ds, {}, n_ticks=4)


def test_evaluate_fsm_suite_smoke(bundle, ds5, hl):
    report = evaluate_fsm_suite(bundle, hl, ds5, clf=None, n_episodes=2,
                                n_ticks=40, seed=0)
    loc, strike = report["location"], report["strike"]
    assert 0.0 <= loc["reach_rate"] <= 1.0
    assert loc["mean_final_distance"] > 0.0
    assert loc["ending_accuracy"] is None
    assert loc["n_episodes"] == 2
    assert 0.0 <= strike["down_rate"] <= 1.0
