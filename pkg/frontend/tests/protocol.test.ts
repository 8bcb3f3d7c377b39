import { describe, expect, it } from "vitest";

import {
  Command,
  ProtocolError,
  VersionMismatchError,
  parseServerMsg,
  serializeCommand,
  validateCommand,
} from "../src/protocol.js";

const VALID: Command[] = [
  { v: 1, type: "set_style", motion: "walk" },
  { v: 1, type: "set_direction", dx: 0.6, dy: -0.8 },
  { v: 1, type: "direct_latent", motion: "strike" },
  { v: 1, type: "run_fsm", name: "location" },
  { v: 1, type: "reset" },
  { v: 1, type: "reset", seed: 7 },
  { v: 1, type: "pause" },
  { v: 1, type: "resume" },
];

describe("outgoing validation", () => {
  it.each(VALID.map((c) => [c.type, c] as const))("accepts %s", (_t, cmd) => {
    expect(validateCommand(cmd)).toEqual([]);
    expect(JSON.parse(serializeCommand(cmd))).toEqual(cmd);
  });

  it("rejects zero direction", () => {
    expect(validateCommand({ v: 1, type: "set_direction", dx: 0, dy: 0 }))
      .toHaveLength(1);
  });

  it("rejects non-finite direction", () => {
    expect(validateCommand({ v: 1, type: "set_direction", dx: NaN, dy: 1 }))
      .toHaveLength(1);
  });

  it("rejects unknown type", () => {
    expect(validateCommand({ v: 1, type: "warp" })).toHaveLength(1);
  });

  it("rejects wrong version", () => {
    expect(validateCommand({ v: 2, type: "pause" })).toHaveLength(1);
  });

  it("rejects empty motion", () => {
    expect(validateCommand({ v: 1, type: "set_style", motion: "" }))
      .toHaveLength(1);
  });

  it("rejects fractional reset seed", () => {
    expect(validateCommand({ v: 1, type: "reset", seed: 1.5 }))
      .toHaveLength(1);
  });

  it("serializeCommand throws instead of sending garbage", () => {
    const bad = { v: 1, type: "set_direction", dx: 0, dy: 0 } as Command;
    expect(() => serializeCommand(bad)).toThrow(ProtocolError);
  });
});

const FRAME = {
  v: 1, type: "frame", session: "s0", t: 0.3,
  root_pos: [1.5, -0.2], heading: 0.1, root_vel: [0.9, 0.0], posture: 0.8,
  limb_angles: [0.1, -0.1, 0.2, -0.2],
  effector_pos: [[1.7, 0.1], [1.3, -0.4]],
  mode: "HighLevel", motion: "run", direction: [1, 0],
  fsm_state: null, fsm_name: null, targets: null,
};

describe("incoming parsing", () => {
  it("round-trips a frame", () => {
    const msg = parseServerMsg(JSON.stringify(FRAME));
    expect(msg.type).toBe("frame");
    expect(msg).toEqual(FRAME);
  });

  it("round-trips error and ack", () => {
    expect(parseServerMsg('{"v":1,"type":"error","code":"bad_payload","detail":"x"}'))
      .toEqual({ v: 1, type: "error", code: "bad_payload", detail: "x" });
    expect(parseServerMsg('{"v":1,"type":"ack","command":"set_style"}'))
      .toEqual({ v: 1, type: "ack", command: "set_style" });
  });

  it("flags a different protocol generation distinctly", () => {
    expect(() => parseServerMsg('{"v":2,"type":"frame"}'))
      .toThrow(VersionMismatchError);
  });

  it("rejects garbage and schema violations", () => {
    expect(() => parseServerMsg("{nope")).toThrow(ProtocolError);
    expect(() => parseServerMsg('"just a string"')).toThrow(ProtocolError);
    expect(() => parseServerMsg('{"v":1,"type":"mystery"}')).toThrow(ProtocolError);
    const broken = { ...FRAME, root_pos: [1] };
    expect(() => parseServerMsg(JSON.stringify(broken))).toThrow(ProtocolError);
  });
});
