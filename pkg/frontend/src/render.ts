// Pure scene construction: (frame, vm, viewport) -> draw ops. The painter
// replays the ops on a canvas context; tests snapshot them directly.

import { Frame } from "./protocol.js";
import { ViewModel } from "./viewmodel.js";

export interface Viewport {
  width: number;
  height: number;
  scale: number;   // pixels per world meter
}

export type DrawOp =
  | { op: "clear"; color: string }
  | { op: "line"; a: [number, number]; b: [number, number]; stroke: string; width: number }
  | { op: "path"; pts: [number, number][]; stroke: string; width: number }
  | { op: "poly"; pts: [number, number][]; fill: string }
  | { op: "circle"; c: [number, number]; r: number; fill?: string; stroke?: string; width?: number }
  | { op: "text"; at: [number, number]; text: string; color: string; size: number; align: "left" | "center" | "right" };

const COLORS = {
  bg: "#10141a",
  grid: "#1c2430",
  trail: "#2e6f6a",
  body: "#e8b34b",
  wedge: "#f3e9d2",
  limb: "#c8873a",
  effector: "#f3e9d2",
  target: "#5a8fd6",
  targetDown: "#41546e",
  label: "#d7dde6",
  hud: "#8fa1b3",
} as const;

const BODY_RADIUS = 0.32;          // world meters at posture 1
const GRID_STEP = 1.0;

type ToScreen = (p: [number, number]) => [number, number];

function makeToScreen(vm: ViewModel, vp: Viewport): ToScreen {
  const [cx, cy] = vm.camera;
  // +y world is up on screen, matching the W key meaning "away from you"
  return ([x, y]) => [
    (x - cx) * vp.scale + vp.width / 2,
    vp.height / 2 - (y - cy) * vp.scale,
  ];
}

function round2(p: [number, number]): [number, number] {
  return [Math.round(p[0] * 100) / 100, Math.round(p[1] * 100) / 100];
}

function gridOps(vm: ViewModel, vp: Viewport, to: ToScreen): DrawOp[] {
  const ops: DrawOp[] = [];
  const halfW = vp.width / 2 / vp.scale;
  const halfH = vp.height / 2 / vp.scale;
  const [cx, cy] = vm.camera;
  for (let x = Math.ceil(cx - halfW); x <= Math.floor(cx + halfW); x += GRID_STEP) {
    ops.push({ op: "line", a: round2(to([x, cy - halfH])), b: round2(to([x, cy + halfH])),
               stroke: COLORS.grid, width: 1 });
  }
  for (let y = Math.ceil(cy - halfH); y <= Math.floor(cy + halfH); y += GRID_STEP) {
    ops.push({ op: "line", a: round2(to([cx - halfW, y])), b: round2(to([cx + halfW, y])),
               stroke: COLORS.grid, width: 1 });
  }
  return ops;
}

function characterOps(f: Frame, vp: Viewport, to: ToScreen): DrawOp[] {
  const ops: DrawOp[] = [];
  const c = to(f.root_pos);
  const r = BODY_RADIUS * f.posture * vp.scale;   // glyph scale ~ posture
  const hx = Math.cos(f.heading);
  const hy = Math.sin(f.heading);

  // four limb phase strokes around the body, swinging with their joint angle
  const bases = [0.7, -0.7, 2.45, -2.45];
  f.limb_angles.forEach((angle, i) => {
    const base = bases[i] ?? 0;
    const a = f.heading + base + angle * 0.7;
    const inner: [number, number] = [
      f.root_pos[0] + Math.cos(a) * (BODY_RADIUS * f.posture),
      f.root_pos[1] + Math.sin(a) * (BODY_RADIUS * f.posture),
    ];
    const outer: [number, number] = [
      f.root_pos[0] + Math.cos(a) * (BODY_RADIUS * f.posture + 0.3),
      f.root_pos[1] + Math.sin(a) * (BODY_RADIUS * f.posture + 0.3),
    ];
    ops.push({ op: "line", a: round2(to(inner)), b: round2(to(outer)),
               stroke: COLORS.limb, width: 3 });
  });

  // effector tips as dots joined to the root
  for (const tip of f.effector_pos) {
    ops.push({ op: "line", a: round2(c), b: round2(to(tip)),
               stroke: COLORS.limb, width: 2 });
    ops.push({ op: "circle", c: round2(to(tip)), r: 3, fill: COLORS.effector });
  }

  ops.push({ op: "circle", c: round2(c), r: Math.round(r * 100) / 100,
             fill: COLORS.body });

  // heading wedge: apex one radius past the rim, base chord behind it
  const apex: [number, number] = [
    f.root_pos[0] + hx * BODY_RADIUS * f.posture * 2.0,
    f.root_pos[1] + hy * BODY_RADIUS * f.posture * 2.0,
  ];
  const left: [number, number] = [
    f.root_pos[0] + (-hy) * BODY_RADIUS * f.posture * 0.6,
    f.root_pos[1] + hx * BODY_RADIUS * f.posture * 0.6,
  ];
  const right: [number, number] = [
    f.root_pos[0] + hy * BODY_RADIUS * f.posture * 0.6,
    f.root_pos[1] + (-hx) * BODY_RADIUS * f.posture * 0.6,
  ];
  ops.push({ op: "poly", pts: [round2(to(apex)), round2(to(left)), round2(to(right))],
             fill: COLORS.wedge });

  if (f.fsm_state) {
    ops.push({ op: "text", at: round2(to([f.root_pos[0], f.root_pos[1] + 0.9])),
               text: `${f.fsm_name ?? "fsm"}:${f.fsm_state}`,
               color: COLORS.label, size: 13, align: "center" });
  }
  return ops;
}

function targetOps(f: Frame, to: ToScreen): DrawOp[] {
  if (!f.targets) return [];
  const ops: DrawOp[] = [];
  for (const [name, t] of Object.entries(f.targets)) {
    const c = round2(to(t.pos));
    if (t.up !== undefined) {
      // strike dummy: fill drains as it goes down
      const upness = Math.max(0, Math.min(1, t.up));
      ops.push({ op: "circle", c, r: 8, fill: upness > 0.5 ? COLORS.target : COLORS.targetDown,
                 stroke: COLORS.target, width: 2 });
    } else {
      ops.push({ op: "circle", c, r: 6, fill: COLORS.target });
      ops.push({ op: "line", a: c, b: [c[0], c[1] - 14], stroke: COLORS.target, width: 2 });
    }
    ops.push({ op: "text", at: [c[0], c[1] + 18], text: name,
               color: COLORS.hud, size: 11, align: "center" });
  }
  return ops;
}

export function render(frame: Frame | null, vm: ViewModel, vp: Viewport): DrawOp[] {
  const ops: DrawOp[] = [{ op: "clear", color: COLORS.bg }];
  const to = makeToScreen(vm, vp);
  ops.push(...gridOps(vm, vp, to));
  if (vm.trail.length > 1) {
    ops.push({ op: "path", pts: vm.trail.map((p) => round2(to(p))),
               stroke: COLORS.trail, width: 2 });
  }
  if (frame) {
    ops.push(...targetOps(frame, to));
    ops.push(...characterOps(frame, vp, to));
    ops.push({ op: "text", at: [10, 20],
               text: `${frame.mode}  ${frame.motion}  t=${frame.t.toFixed(2)}`,
               color: COLORS.hud, size: 12, align: "left" });
  }
  return ops;
}
