// Canvas drawing: camera frame upscaling and the 2-D projected map.

import { FramePayload, StateMsg, TreeDoc, decodeFrame } from "./protocol.js";

export function drawFrame(canvas: HTMLCanvasElement, frame: FramePayload): void {
  const px = decodeFrame(frame);
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const img = new ImageData(frame.w, frame.h);
  for (let i = 0; i < px.length; i++) {
    img.data[4 * i] = px[i];
    img.data[4 * i + 1] = px[i];
    img.data[4 * i + 2] = px[i];
    img.data[4 * i + 3] = 255;
  }
  const off = typeof OffscreenCanvas !== "undefined"
    ? new OffscreenCanvas(frame.w, frame.h)
    : Object.assign(document.createElement("canvas"), { width: frame.w, height: frame.h });
  const octx = (off as HTMLCanvasElement).getContext("2d");
  if (!octx) return;
  octx.putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off as HTMLCanvasElement, 0, 0, canvas.width, canvas.height);
}

export interface MapTransform {
  project(p: number[]): [number, number];
}

export function mapTransform(tree: TreeDoc, width: number, height: number,
                             margin = 12): MapTransform {
  const o = tree.projection.origin;
  const u = tree.projection.u;
  const v = tree.projection.v;
  const proj2 = (p: number[]): [number, number] => {
    const dx = p[0] - o[0], dy = p[1] - o[1], dz = p[2] - o[2];
    return [dx * u[0] + dy * u[1] + dz * u[2],
            dx * v[0] + dy * v[1] + dz * v[2]];
  };
  let minU = Infinity, maxU = -Infinity, minV = Infinity, maxV = -Infinity;
  for (const seg of tree.segments) {
    for (const p of seg.points) {
      const [a, b] = proj2(p);
      minU = Math.min(minU, a); maxU = Math.max(maxU, a);
      minV = Math.min(minV, b); maxV = Math.max(maxV, b);
    }
  }
  const scale = Math.min((width - 2 * margin) / Math.max(maxU - minU, 1e-6),
                         (height - 2 * margin) / Math.max(maxV - minV, 1e-6));
  return {
    project(p: number[]): [number, number] {
      const [a, b] = proj2(p);
      return [margin + (a - minU) * scale, height - margin - (b - minV) * scale];
    },
  };
}

export function drawMap(canvas: HTMLCanvasElement, tree: TreeDoc,
                        state: StateMsg | null): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const tf = mapTransform(tree, canvas.width, canvas.height);
  ctx.clearRect(0, 0, canvas.width, canvas.height);

  ctx.strokeStyle = "#4d6a8f";
  ctx.lineWidth = 1.5;
  for (const seg of tree.segments) {
    ctx.beginPath();
    seg.points.forEach((p, i) => {
      const [x, y] = tf.project(p);
      if (i === 0) ctx.moveTo(x, y); else ctx.lineTo(x, y);
    });
    ctx.stroke();
  }

  const [tx, ty] = tf.project(tree.target);
  ctx.strokeStyle = "#e0b020";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  ctx.arc(tx, ty, 5, 0, 2 * Math.PI);
  ctx.stroke();

  if (state) {
    ctx.strokeStyle = "#58d68d";
    ctx.lineWidth = 2.5;
    ctx.beginPath();
    const bb = state.backbone;
    for (let i = 0; i + 2 < bb.length; i += 3) {
      const [x, y] = tf.project([bb[i], bb[i + 1], bb[i + 2]]);
      if (i === 0) ctx.moveTo(x, y); else ctx.lineTo(x, y);
    }
    ctx.stroke();
    const n = bb.length;
    const [hx, hy] = tf.project([bb[n - 3], bb[n - 2], bb[n - 1]]);
    ctx.fillStyle = "#58d68d";
    ctx.beginPath();
    ctx.arc(hx, hy, 3, 0, 2 * Math.PI);
    ctx.fill();
  }
}
