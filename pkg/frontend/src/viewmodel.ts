// All client state in one bag. Network callbacks mutate it; the render loop
// only reads it. Nothing here touches the DOM or the socket.

import { AckMsg, ErrorMsg, Frame } from "./protocol.js";

export type ConnectionStatus = "connecting" | "connected" | "retrying" | "incompatible";

export const TRAIL_LIMIT = 300;
const CAMERA_GAIN = 0.12;

export interface ViewModel {
  frame: Frame | null;
  prevFrame: Frame | null;
  frameAt: number;            // performance.now() when `frame` landed
  trail: [number, number][];
  status: ConnectionStatus;
  selectedStyle: string | null;
  pending: string | null;     // command type sent but not yet acked
  lastError: string | null;
  camera: [number, number];
}

export function newViewModel(): ViewModel {
  return {
    frame: null,
    prevFrame: null,
    frameAt: 0,
    trail: [],
    status: "connecting",
    selectedStyle: null,
    pending: null,
    lastError: null,
    camera: [0, 0],
  };
}

export function onFrame(vm: ViewModel, frame: Frame, now: number): void {
  vm.prevFrame = vm.frame;
  vm.frame = frame;
  vm.frameAt = now;
  vm.trail.push([frame.root_pos[0], frame.root_pos[1]]);
  if (vm.trail.length > TRAIL_LIMIT) {
    vm.trail.splice(0, vm.trail.length - TRAIL_LIMIT);
  }
}

export function onAck(vm: ViewModel, ack: AckMsg): void {
  if (vm.pending === ack.command) vm.pending = null;
  if (ack.command === "reset") {
    vm.trail.length = 0;
    vm.prevFrame = null;
  }
}

export function onError(vm: ViewModel, err: ErrorMsg): void {
  vm.lastError = err.detail ? `${err.code}: ${err.detail}` : err.code;
  vm.pending = null;
}

export function onStatus(vm: ViewModel, status: ConnectionStatus): void {
  vm.status = status;
  if (status !== "connected") {
    vm.pending = null;
    vm.prevFrame = null;   // do not interpolate across a gap
  }
}

/** One smoothing step of the follow camera toward the character. */
export function stepCamera(vm: ViewModel): void {
  if (!vm.frame) return;
  vm.camera[0] += (vm.frame.root_pos[0] - vm.camera[0]) * CAMERA_GAIN;
  vm.camera[1] += (vm.frame.root_pos[1] - vm.camera[1]) * CAMERA_GAIN;
}

function lerp(a: number, b: number, u: number): number {
  return a + (b - a) * u;
}

function lerpAngle(a: number, b: number, u: number): number {
  let d = b - a;
  while (d > Math.PI) d -= 2 * Math.PI;
  while (d < -Math.PI) d += 2 * Math.PI;
  return a + d * u;
}

/** Display-rate view of the 30 Hz stream: linear blend of the last two
 *  frames at fraction `u` in [0, 1]; discrete fields come from the newer. */
export function interpolate(prev: Frame | null, cur: Frame, u: number): Frame {
  if (!prev || u >= 1) return cur;
  const w = Math.max(0, Math.min(1, u));
  return {
    ...cur,
    root_pos: [lerp(prev.root_pos[0], cur.root_pos[0], w),
               lerp(prev.root_pos[1], cur.root_pos[1], w)],
    heading: lerpAngle(prev.heading, cur.heading, w),
    root_vel: [lerp(prev.root_vel[0], cur.root_vel[0], w),
               lerp(prev.root_vel[1], cur.root_vel[1], w)],
    posture: lerp(prev.posture, cur.posture, w),
    limb_angles: cur.limb_angles.map((x, i) => lerp(prev.limb_angles[i] ?? x, x, w)),
    effector_pos: cur.effector_pos.map((tip, i) => {
      const p = prev.effector_pos[i] ?? tip;
      return [lerp(p[0], tip[0], w), lerp(p[1], tip[1], w)] as [number, number];
    }),
  };
}
