// Keyboard steering. Key state accumulates on key events; the render loop
// calls flush() exactly once per animation frame, so at most one
// SetDirection ever goes out per frame no matter how fast keys bounce.

import { Command } from "./protocol.js";

const KEY_VECS: Record<string, [number, number]> = {
  KeyW: [0, 1], ArrowUp: [0, 1],
  KeyS: [0, -1], ArrowDown: [0, -1],
  KeyA: [-1, 0], ArrowLeft: [-1, 0],
  KeyD: [1, 0], ArrowRight: [1, 0],
};

export class DirectionInput {
  private held = new Set<string>();
  private dirty = false;

  /** Returns true when the key is a steering key (caller preventDefaults). */
  keyDown(code: string): boolean {
    if (!(code in KEY_VECS)) return false;
    if (!this.held.has(code)) {
      this.held.add(code);
      this.dirty = true;
    }
    return true;
  }

  keyUp(code: string): boolean {
    if (!(code in KEY_VECS)) return false;
    if (this.held.delete(code)) this.dirty = true;
    return true;
  }

  /** Normalized world-frame direction of the held keys, or null when no
   *  steering is active or opposite keys cancel out. */
  current(): [number, number] | null {
    let x = 0, y = 0;
    for (const code of this.held) {
      const v = KEY_VECS[code]!;
      x += v[0];
      y += v[1];
    }
    const n = Math.hypot(x, y);
    if (n === 0) return null;
    return [x / n, y / n];
  }

  /** At most one command per call; null when nothing changed since the last
   *  flush or the net direction is degenerate. */
  flush(): Command | null {
    if (!this.dirty) return null;
    this.dirty = false;
    const d = this.current();
    if (!d) return null;
    return { v: 1, type: "set_direction", dx: d[0], dy: d[1] };
  }
}

// One-shot bindings: palette and action buttons to commands. The kick
// button fires the strike motion; there is no separate kick clip.
export const STYLE_PALETTE = ["run", "walk", "crouch_walk"] as const;
export const ACTION_BINDINGS: Record<string, string> = {
  kick: "strike",
  celebrate: "celebrate",
  strike: "strike",
};

export function styleCommand(style: string): Command {
  return { v: 1, type: "set_style", motion: style };
}

export function actionCommand(button: string): Command {
  const motion = ACTION_BINDINGS[button];
  if (!motion) throw new Error(`unknown action button ${button}`);
  return { v: 1, type: "direct_latent", motion };
}

export function resetCommand(): Command {
  return { v: 1, type: "reset" };
}

export function fsmCommand(name: string): Command {
  return { v: 1, type: "run_fsm", name };
}
