// Wire protocol: typed commands out, typed frames/errors/acks in. Every
// outgoing message funnels through serializeCommand, which validates first;
// nothing else in the client is allowed to call JSON.stringify on a command.

export const PROTOCOL_VERSION = 1;

export type Command =
  | { v: 1; type: "set_style"; motion: string }
  | { v: 1; type: "set_direction"; dx: number; dy: number }
  | { v: 1; type: "direct_latent"; motion: string }
  | { v: 1; type: "run_fsm"; name: string }
  | { v: 1; type: "reset"; seed?: number }
  | { v: 1; type: "pause" }
  | { v: 1; type: "resume" };

export interface TargetState {
  pos: [number, number];
  up?: number;
}

export interface Frame {
  v: number;
  type: "frame";
  session: string;
  t: number;
  root_pos: [number, number];
  heading: number;
  root_vel: [number, number];
  posture: number;
  limb_angles: number[];
  effector_pos: [number, number][];
  mode: string;
  motion: string;
  direction: [number, number];
  fsm_state: string | null;
  fsm_name: string | null;
  targets: Record<string, TargetState> | null;
}

export interface ErrorMsg {
  v: number;
  type: "error";
  code: string;
  detail?: string;
}

export interface AckMsg {
  v: number;
  type: "ack";
  command: string;
}

export type ServerMsg = Frame | ErrorMsg | AckMsg;

export class ProtocolError extends Error {}
export class VersionMismatchError extends ProtocolError {
  constructor(public readonly got: unknown) {
    super(`server speaks protocol ${String(got)}, client speaks ${PROTOCOL_VERSION}`);
  }
}

const COMMAND_TYPES = new Set([
  "set_style", "set_direction", "direct_latent", "run_fsm",
  "reset", "pause", "resume",
]);

function finite(x: unknown): x is number {
  return typeof x === "number" && Number.isFinite(x);
}

/** Problems with an outgoing command; empty array means valid. */
export function validateCommand(cmd: unknown): string[] {
  if (typeof cmd !== "object" || cmd === null || Array.isArray(cmd)) {
    return ["command must be an object"];
  }
  const c = cmd as Record<string, unknown>;
  const out: string[] = [];
  if (c.v !== PROTOCOL_VERSION) out.push(`v must be ${PROTOCOL_VERSION}`);
  if (typeof c.type !== "string" || !COMMAND_TYPES.has(c.type)) {
    out.push(`unknown command type ${JSON.stringify(c.type)}`);
    return out;
  }
  switch (c.type) {
    case "set_style":
    case "direct_latent":
      if (typeof c.motion !== "string" || c.motion.length === 0) {
        out.push("motion must be a non-empty string");
      }
      break;
    case "set_direction": {
      if (!finite(c.dx) || !finite(c.dy)) {
        out.push("dx and dy must be finite numbers");
      } else if (c.dx === 0 && c.dy === 0) {
        out.push("direction must be non-zero");
      }
      break;
    }
    case "run_fsm":
      if (typeof c.name !== "string" || c.name.length === 0) {
        out.push("name must be a non-empty string");
      }
      break;
    case "reset":
      if (c.seed !== undefined && c.seed !== null && !Number.isInteger(c.seed)) {
        out.push("seed must be an integer when given");
      }
      break;
    case "pause":
    case "resume":
      break;
  }
  return out;
}

/** Validates, then encodes. Throws ProtocolError on any invalid command. */
export function serializeCommand(cmd: Command): string {
  const problems = validateCommand(cmd);
  if (problems.length > 0) {
    throw new ProtocolError(`refusing to send invalid command: ${problems.join("; ")}`);
  }
  return JSON.stringify(cmd);
}

function isVec2(x: unknown): x is [number, number] {
  return Array.isArray(x) && x.length === 2 && finite(x[0]) && finite(x[1]);
}

/** Decodes one server message, throwing VersionMismatchError for a frame
 *  from a different protocol generation and ProtocolError for anything that
 *  does not match the schema. */
export function parseServerMsg(text: string): ServerMsg {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch {
    throw new ProtocolError("not JSON");
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new ProtocolError("message must be an object");
  }
  const m = raw as Record<string, unknown>;
  if (m.v !== PROTOCOL_VERSION) throw new VersionMismatchError(m.v);
  switch (m.type) {
    case "frame": {
      const ok = typeof m.session === "string" && finite(m.t)
        && isVec2(m.root_pos) && finite(m.heading) && isVec2(m.root_vel)
        && finite(m.posture)
        && Array.isArray(m.limb_angles) && m.limb_angles.every(finite)
        && Array.isArray(m.effector_pos) && m.effector_pos.every(isVec2)
        && typeof m.mode === "string" && typeof m.motion === "string"
        && isVec2(m.direction);
      if (!ok) throw new ProtocolError("malformed frame");
      return m as unknown as Frame;
    }
    case "error": {
      if (typeof m.code !== "string") throw new ProtocolError("malformed error");
      return m as unknown as ErrorMsg;
    }
    case "ack": {
      if (typeof m.command !== "string") throw new ProtocolError("malformed ack");
      return m as unknown as AckMsg;
    }
    default:
      throw new ProtocolError(`unknown server message type ${JSON.stringify(m.type)}`);
  }
}
