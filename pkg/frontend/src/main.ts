// Wires the pieces together. Single event loop: socket callbacks mutate the
// ViewModel, requestAnimationFrame reads it, flushes at most one steering
// command, and paints.

import { DirectionInput, STYLE_PALETTE, actionCommand, fsmCommand, resetCommand, styleCommand } from "./input.js";
import { Connection } from "./net.js";
import { Command } from "./protocol.js";
import { paint } from "./paint.js";
import { render } from "./render.js";
import {
  interpolate,
  newViewModel,
  onAck,
  onError,
  onFrame,
  onStatus,
  stepCamera,
} from "./viewmodel.js";

const FRAME_DT_MS = 1000 / 30;

function serverUrl(): string {
  const q = new URLSearchParams(location.search).get("server");
  if (q) return q;
  const proto = location.protocol === "https:" ? "wss" : "ws";
  return `${proto}://${location.host}/ws`;
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function start(): void {
  const canvas = el<HTMLCanvasElement>("scene");
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("no 2d context");
  const banner = el<HTMLDivElement>("banner");
  const errorBox = el<HTMLDivElement>("error");
  const styleRow = el<HTMLDivElement>("styles");
  const vm = newViewModel();
  const input = new DirectionInput();

  const conn = new Connection(serverUrl(), {
    onMsg: (msg) => {
      if (msg.type === "frame") onFrame(vm, msg, performance.now());
      else if (msg.type === "ack") onAck(vm, msg);
      else onError(vm, msg);
    },
    onStatus: (s) => onStatus(vm, s),
  });

  const send = (cmd: Command): void => {
    if (conn.send(cmd)) vm.pending = cmd.type;
  };

  for (const style of STYLE_PALETTE) {
    const b = document.createElement("button");
    b.textContent = style.replace("_", " ");
    b.onclick = () => {
      vm.selectedStyle = style;
      send(styleCommand(style));
    };
    styleRow.appendChild(b);
  }
  for (const action of ["kick", "celebrate", "strike"]) {
    const b = document.createElement("button");
    b.textContent = action;
    b.className = "action";
    b.onclick = () => send(actionCommand(action));
    styleRow.appendChild(b);
  }
  el<HTMLButtonElement>("fsm-go").onclick = () => {
    const name = el<HTMLSelectElement>("fsm-pick").value;
    send(fsmCommand(name));
  };

  let paused = false;
  const pauseBtn = el<HTMLButtonElement>("pause");
  pauseBtn.onclick = () => {
    paused = !paused;
    pauseBtn.textContent = paused ? "resume" : "pause";
    send({ v: 1, type: paused ? "pause" : "resume" });
  };

  window.addEventListener("keydown", (ev) => {
    if (ev.repeat) return;
    if (ev.code === "KeyR") {
      send(resetCommand());
      return;
    }
    if (input.keyDown(ev.code)) ev.preventDefault();
  });
  window.addEventListener("keyup", (ev) => {
    if (input.keyUp(ev.code)) ev.preventDefault();
  });

  const resize = (): void => {
    canvas.width = window.innerWidth;
    canvas.height = window.innerHeight;
  };
  window.addEventListener("resize", resize);
  resize();

  conn.connect();

  const STATUS_TEXT: Record<string, string> = {
    connecting: "connecting…",
    connected: "",
    retrying: "connection lost - retrying…",
    incompatible: "server speaks a different protocol version - update this page",
  };

  const loop = (): void => {
    const cmd = input.flush();   // at most one SetDirection per frame
    if (cmd) send(cmd);

    stepCamera(vm);
    let shown = vm.frame;
    if (vm.frame && vm.prevFrame) {
      const u = (performance.now() - vm.frameAt) / FRAME_DT_MS;
      shown = interpolate(vm.prevFrame, vm.frame, u);
    }
    paint(ctx, render(shown, vm, {
      width: canvas.width, height: canvas.height, scale: 60,
    }));

    banner.textContent = STATUS_TEXT[vm.status] ?? vm.status;
    banner.style.display = vm.status === "connected" ? "none" : "block";
    errorBox.textContent = vm.lastError ?? "";
    errorBox.style.display = vm.lastError ? "block" : "none";
    requestAnimationFrame(loop);
  };
  requestAnimationFrame(loop);
}

start();
