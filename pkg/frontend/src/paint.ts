// Replays draw ops on a 2D context. Dumb on purpose: everything visual is
// decided in render.ts where tests can see it.

import { DrawOp } from "./render.js";

export function paint(ctx: CanvasRenderingContext2D, ops: DrawOp[]): void {
  for (const o of ops) {
    switch (o.op) {
      case "clear":
        ctx.fillStyle = o.color;
        ctx.fillRect(0, 0, ctx.canvas.width, ctx.canvas.height);
        break;
      case "line":
        ctx.strokeStyle = o.stroke;
        ctx.lineWidth = o.width;
        ctx.beginPath();
        ctx.moveTo(o.a[0], o.a[1]);
        ctx.lineTo(o.b[0], o.b[1]);
        ctx.stroke();
        break;
      case "path": {
        ctx.strokeStyle = o.stroke;
        ctx.lineWidth = o.width;
        ctx.beginPath();
        const first = o.pts[0];
        if (!first) break;
        ctx.moveTo(first[0], first[1]);
        for (const p of o.pts.slice(1)) ctx.lineTo(p[0], p[1]);
        ctx.stroke();
        break;
      }
      case "poly": {
        ctx.fillStyle = o.fill;
        ctx.beginPath();
        const first = o.pts[0];
        if (!first) break;
        ctx.moveTo(first[0], first[1]);
        for (const p of o.pts.slice(1)) ctx.lineTo(p[0], p[1]);
        ctx.closePath();
        ctx.fill();
        break;
      }
      case "circle":
        ctx.beginPath();
        ctx.arc(o.c[0], o.c[1], o.r, 0, 2 * Math.PI);
        if (o.fill) {
          ctx.fillStyle = o.fill;
          ctx.fill();
        }
        if (o.stroke) {
          ctx.strokeStyle = o.stroke;
          ctx.lineWidth = o.width ?? 1;
          ctx.stroke();
        }
        break;
      case "text":
        ctx.fillStyle = o.color;
        ctx.font = `${o.size}px system-ui, sans-serif`;
        ctx.textAlign = o.align;
        ctx.fillText(o.text, o.at[0], o.at[1]);
        break;
    }
  }
}
