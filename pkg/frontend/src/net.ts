// WebSocket wrapper: reconnect with capped exponential backoff, version
// gate, and a single send path that refuses invalid commands.

import {
  Command,
  ServerMsg,
  VersionMismatchError,
  parseServerMsg,
  serializeCommand,
} from "./protocol.js";
import { ConnectionStatus } from "./viewmodel.js";

export const BACKOFF_MS = [500, 1000, 2000, 4000, 8000];

export function nextBackoff(attempt: number): number {
  return BACKOFF_MS[Math.min(attempt, BACKOFF_MS.length - 1)]!;
}

export interface NetEvents {
  onMsg(msg: ServerMsg): void;
  onStatus(status: ConnectionStatus): void;
}

export class Connection {
  private ws: WebSocket | null = null;
  private attempt = 0;
  private stopped = false;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(private url: string, private events: NetEvents) {}

  connect(): void {
    if (this.stopped) return;
    this.events.onStatus(this.attempt === 0 ? "connecting" : "retrying");
    const ws = new WebSocket(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.attempt = 0;
      this.events.onStatus("connected");
    };
    ws.onmessage = (ev) => {
      let msg: ServerMsg;
      try {
        msg = parseServerMsg(String(ev.data));
      } catch (e) {
        if (e instanceof VersionMismatchError) {
          // a different protocol generation: stop retrying, tell the user
          this.stopped = true;
          this.events.onStatus("incompatible");
          ws.close();
        }
        return;   // anything else unparseable is dropped, session continues
      }
      this.events.onMsg(msg);
    };
    ws.onclose = () => {
      if (this.stopped) return;
      this.events.onStatus("retrying");
      this.timer = setTimeout(() => this.connect(), nextBackoff(this.attempt++));
    };
    ws.onerror = () => { /* onclose always follows */ };
  }

  /** Validates and sends; returns false when not connected (command dropped). */
  send(cmd: Command): boolean {
    if (!this.ws || this.ws.readyState !== WebSocket.OPEN) return false;
    this.ws.send(serializeCommand(cmd));
    return true;
  }

  close(): void {
    this.stopped = true;
    if (this.timer) clearTimeout(this.timer);
    this.ws?.close();
  }
}
