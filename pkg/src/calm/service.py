"""Interactive director service: a websocket session hosting the simulator
plus frozen checkpoints, streaming character frames at the tick rate and
accepting live steering commands.

Commands either route through the high-level policy (style/direction,
applied at the next high-level boundary) or bypass it entirely (a style's
anchor latent straight to the low-level policy, applied at the next tick).
A stock FSM can be launched into the session; any steering command takes
the character back. One isolated session per connection; checkpoints are
shared read-only. Commands land in last-write-wins mailboxes, one per
control channel, matching game-controller semantics.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from pydantic import BaseModel, ValidationError
from typing import Literal

from .fsm import FsmDriver, parse_fsm, STOCK_FSM_TEXTS
from .hlc import HL_RATIO, HighLevelBundle, load_hl_bundle, style_anchor_table, \
    to_char_frame
from .motion import DT, MotionDataset, default_style_suite, load_dataset, \
    sample_reset_states
from .pretrain import PolicyBundle, load_bundle
from .sim import SimConfig, effector_positions, observe_batch, step_batch

logger = logging.getLogger("calm.service")

PROTOCOL_VERSION = 1


def configure_logging() -> None:
    """CALM_LOG sets the root calm logger level (default INFO)."""
    level = os.environ.get("CALM_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(name)s %(message)s")


@dataclass
class SessionConfig:
    pretrain: str
    hl: str | None = None
    data: str | None = None          # dataset dir; None -> stock suite
    tick_rate: float = 30.0
    host: str = "127.0.0.1"
    port: int = 8765
    max_sessions: int = 8
    fast: bool = False               # decouple from wall clock (tests)

    def __post_init__(self):
        if self.tick_rate <= 0:
            raise ValueError(f"tick_rate must be > 0, got {self.tick_rate}")


# ---------------------------------------------------------------------------
# Wire protocol.

class SetStyle(BaseModel):
    motion: str


class SetDirection(BaseModel):
    dx: float
    dy: float


class DirectLatentCmd(BaseModel):
    motion: str


class RunFsmCmd(BaseModel):
    name: str


class ResetCmd(BaseModel):
    seed: int | None = None


class EmptyCmd(BaseModel):
    pass


_PAYLOADS: dict[str, type[BaseModel]] = {
    "set_style": SetStyle,
    "set_direction": SetDirection,
    "direct_latent": DirectLatentCmd,
    "run_fsm": RunFsmCmd,
    "reset": ResetCmd,
    "pause": EmptyCmd,
    "resume": EmptyCmd,
}


def parse_command(text: str) -> tuple[str, BaseModel] | dict:
    """Returns (type, payload) or an error frame dict."""
    def err(code, detail):
        return {"v": PROTOCOL_VERSION, "type": "error", "code": code,
                "detail": detail}
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        return err("bad_json", str(e))
    if not isinstance(raw, dict):
        return err("bad_json", "message must be a JSON object")
    if raw.get("v") != PROTOCOL_VERSION:
        return err("bad_version",
                   f"protocol v{PROTOCOL_VERSION} required, got {raw.get('v')!r}")
    kind = raw.get("type")
    model = _PAYLOADS.get(kind)
    if model is None:
        return err("unknown_type", f"unknown command type {kind!r}")
    try:
        payload = model.model_validate(
            {k: v for k, v in raw.items() if k not in ("v", "type")})
    except ValidationError as e:
        return err("bad_payload", str(e))
    return kind, payload


# ---------------------------------------------------------------------------
# Loaded checkpoints, shared read-only across sessions.

class ServiceStack:
    def __init__(self, bundle: PolicyBundle, hl: HighLevelBundle | None,
                 ds: MotionDataset, sim_cfg: SimConfig | None = None):
        if hl is not None:
            hl.verify_frozen(bundle)
        self.bundle = bundle
        self.hl = hl
        self.ds = ds
        self.sim_cfg = sim_cfg or SimConfig()
        self.styles = list(dict.fromkeys(c.style_label for c in ds.clips))
        anchors, _ = style_anchor_table(bundle.encoder, ds, tuple(self.styles))
        self.anchors = {s: anchors[i] for i, s in enumerate(self.styles)}
        self.active_sessions = 0

    @classmethod
    def load(cls, cfg: SessionConfig) -> "ServiceStack":
        bundle = load_bundle(cfg.pretrain)
        hl = load_hl_bundle(cfg.hl) if cfg.hl else None
        ds = load_dataset(cfg.data) if cfg.data else default_style_suite(0)
        return cls(bundle, hl, ds)

    def info(self) -> dict:
        return {
            "v": PROTOCOL_VERSION,
            "styles": self.styles,
            "hl_styles": list(self.hl.cfg.styles) if self.hl else [],
            "fsms": sorted(STOCK_FSM_TEXTS),
            "tick_dt": DT,
            "checkpoint_fingerprint": self.bundle.fingerprint,
        }


# ---------------------------------------------------------------------------
# One session = one connection.

@dataclass
class _Mailboxes:
    """Last-write-wins, one slot per control channel."""
    style: str | None = None
    direction: np.ndarray | None = None
    mode: tuple | None = None        # ("direct"|"fsm"|"reset", payload)


class DirectorSession:
    def __init__(self, stack: ServiceStack, session_id: str, seed: int):
        self.stack = stack
        self.session_id = session_id
        self.tick = 0                # session clock; never rewinds
        self.paused = False
        self.box = _Mailboxes()
        self._reset(seed)

    # -- command intake (validates at receipt) ------------------------------
    def handle(self, kind: str, payload: BaseModel) -> dict:
        err = lambda code, detail: {"v": PROTOCOL_VERSION, "type": "error",
                                    "code": code, "detail": detail}
        if kind == "set_style":
            if self.stack.hl is None:
                return err("no_highlevel", "no high-level checkpoint loaded")
            if payload.motion not in self.stack.hl.cfg.styles:
                return err("unknown_motion",
                           f"style {payload.motion!r} not in the high-level "
                           f"set {tuple(self.stack.hl.cfg.styles)}")
            self.box.style = payload.motion
        elif kind == "set_direction":
            if self.stack.hl is None:
                return err("no_highlevel", "no high-level checkpoint loaded")
            d = np.array([payload.dx, payload.dy], dtype=np.float64)
            n = np.linalg.norm(d)
            if n < 1e-9:
                return err("bad_payload", "direction must be nonzero")
            self.box.direction = d / n
        elif kind == "direct_latent":
            if payload.motion not in self.stack.anchors:
                return err("unknown_motion",
                           f"motion {payload.motion!r} not in the dataset "
                           f"styles {tuple(self.stack.styles)}")
            self.box.mode = ("direct", payload.motion)
        elif kind == "run_fsm":
            maker = STOCK_FSM_TEXTS.get(payload.name)
            if maker is None:
                return err("unknown_fsm",
                           f"unknown fsm {payload.name!r}; have "
                           f"{sorted(STOCK_FSM_TEXTS)}")
            try:
                driver = self._build_fsm(payload.name, maker)
            except ValueError as e:
                return err("bad_fsm", str(e))
            self.box.mode = ("fsm", (payload.name, driver))
        elif kind == "reset":
            self.box.mode = ("reset", payload.seed)
        elif kind == "pause":
            self.paused = True
        elif kind == "resume":
            self.paused = False
        return {"v": PROTOCOL_VERSION, "type": "ack", "command": kind}

    def _build_fsm(self, name: str, maker) -> FsmDriver:
        spec = parse_fsm(maker(), set(self.stack.styles))
        bindings = {}
        for tname in spec.targets:
            ang = self.rng.uniform(-np.pi, np.pi)
            rad = self.rng.uniform(2.5, 4.5)
            bindings[tname] = self.state[0:2] + \
                rad * np.array([np.cos(ang), np.sin(ang)])
        return FsmDriver(spec, self.stack.bundle, self.stack.hl,
                         self.stack.ds, bindings)

    # -- state machine ------------------------------------------------------
    def _reset(self, seed: int | None) -> None:
        if seed is not None:
            self.rng = np.random.default_rng(np.random.SeedSequence((seed, 41)))
        self.state = sample_reset_states(self.stack.ds, self.rng, 1)[0]
        self.fsm: FsmDriver | None = None
        self.fsm_name: str | None = None
        if self.stack.hl is not None:
            self.mode = "HighLevel"
            self.style = self.stack.hl.cfg.styles[0]
        else:
            self.mode = "LowLevelDirect"
            self.style = self.stack.styles[0]
        self.direction = np.array([1.0, 0.0])
        self.z = self.stack.anchors[self.style]
        self.motion = self.style
        self.hl_phase = 0

    def _leave_fsm(self) -> None:
        self.fsm = None
        self.fsm_name = None

    def _apply_mailboxes(self) -> None:
        if self.box.mode is not None:
            what, payload = self.box.mode
            self.box.mode = None
            if what == "reset":
                self._reset(payload)
                # a reset discards queued steering too
                self.box.style = None
                self.box.direction = None
            elif what == "direct":
                self._leave_fsm()
                self.mode = "LowLevelDirect"
                self.motion = payload
                self.z = self.stack.anchors[payload]
            else:
                self.fsm_name, self.fsm = payload
                self.mode = "Fsm"
        # routed commands wait for the next high-level boundary
        boundary = self.mode != "HighLevel" or self.hl_phase == 0
        if boundary and (self.box.style is not None
                         or self.box.direction is not None):
            if self.box.style is not None:
                self.style = self.box.style
                self.box.style = None
            if self.box.direction is not None:
                self.direction = self.box.direction
                self.box.direction = None
            self._leave_fsm()
            self.mode = "HighLevel"
            self.hl_phase = 0

    def _hl_command(self) -> None:
        hl = self.stack.hl
        one_hot = np.zeros(len(hl.cfg.styles))
        one_hot[hl.cfg.styles.index(self.style)] = 1.0
        obs_hl = np.concatenate([
            observe_batch(self.state),
            to_char_frame(self.state[None], self.direction[None])[0],
            one_hot,
        ])
        self.z = hl.command(obs_hl[None])[0]
        self.motion = self.style

    def step(self) -> dict:
        """One simulator tick; returns the outgoing frame."""
        self._apply_mailboxes()
        if self.mode == "HighLevel":
            if self.hl_phase == 0:
                self._hl_command()
            self.hl_phase = (self.hl_phase + 1) % HL_RATIO
        elif self.mode == "Fsm":
            self.fsm.pre_step(self.state)
            self.z = self.fsm.director.z
            self.motion = self.fsm.director.state.action.motion

        obs = observe_batch(self.state)
        a, _ = self.stack.bundle.policy.mean(obs[None], self.z[None])
        self.state = step_batch(self.state[None],
                                np.asarray(a, dtype=np.float64),
                                self.stack.sim_cfg)[0]
        if self.mode == "Fsm":
            self.fsm.post_step(self.state)
        frame = self._frame()
        self.tick += 1
        return frame

    def _frame(self) -> dict:
        s = self.state
        tips = effector_positions(s)
        return {
            "v": PROTOCOL_VERSION,
            "type": "frame",
            "session": self.session_id,
            "t": round(self.tick * DT, 6),
            "root_pos": [float(s[0]), float(s[1])],
            "heading": float(s[2]),
            "root_vel": [float(s[3]), float(s[4])],
            "posture": float(s[6]),
            "limb_angles": [float(x) for x in s[7:11]],
            "effector_pos": [[float(x) for x in tip] for tip in tips],
            "mode": self.mode,
            "motion": self.motion,
            "direction": [float(x) for x in self.direction],
            "fsm_state": (self.fsm.director.state.name if self.fsm else None),
            "fsm_name": self.fsm_name,
            "targets": (self.fsm.targets_snapshot() if self.fsm else None),
        }


# ---------------------------------------------------------------------------
# FastAPI app.

def build_app(stack: ServiceStack, cfg: SessionConfig) -> FastAPI:
    app = FastAPI(title="calm director")
    period = 1.0 / cfg.tick_rate
    counter = {"n": 0}

    @app.get("/info")
    def info():
        return stack.info()

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        if stack.active_sessions >= cfg.max_sessions:
            await ws.send_json({"v": PROTOCOL_VERSION, "type": "error",
                                "code": "too_many_sessions",
                                "detail": f"limit {cfg.max_sessions}"})
            await ws.close()
            return
        stack.active_sessions += 1
        counter["n"] += 1
        sid = f"s{counter['n']}"
        try:
            seed = int(ws.query_params.get("seed", counter["n"]))
        except ValueError:
            seed = counter["n"]
        session = DirectorSession(stack, sid, seed)
        logger.info("session %s connected (seed %d)", sid, seed)

        async def receiver():
            while True:
                text = await ws.receive_text()
                parsed = parse_command(text)
                reply = (parsed if isinstance(parsed, dict)
                         else session.handle(*parsed))
                await ws.send_json(reply)

        async def ticker():
            loop = asyncio.get_running_loop()
            while True:
                t0 = loop.time()
                if not session.paused:
                    await ws.send_json(session.step())
                if cfg.fast:
                    await asyncio.sleep(0)
                else:
                    await asyncio.sleep(max(0.0, period - (loop.time() - t0)))

        tasks = [asyncio.create_task(receiver()),
                 asyncio.create_task(ticker())]
        try:
            done, _ = await asyncio.wait(
                tasks, return_when=asyncio.FIRST_COMPLETED)
            for task in done:
                exc = task.exception()
                # RuntimeError covers sends that lose the race with a close
                if exc is not None and not isinstance(
                        exc, (WebSocketDisconnect, RuntimeError)):
                    raise exc
        finally:
            # no awaits before the decrement: teardown may arrive as a
            # cancellation, which aborts this block at its first await
            stack.active_sessions -= 1
            logger.info("session %s closed", sid)
            for task in tasks:
                task.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)

    return app


def serve(cfg: SessionConfig) -> None:
    """Load checkpoints (refusing to start on failure) and run the server."""
    configure_logging()
    stack = ServiceStack.load(cfg)
    import uvicorn
    uvicorn.run(build_app(stack, cfg), host=cfg.host, port=cfg.port,
                log_level="warning")
