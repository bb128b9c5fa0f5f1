// Rendering: schematic top-down "microscope" view, the B-scan panel with a
// micrometer scale bar, and scrolling strip charts. Pure math lives in
// exported helpers so tests can check geometry without a real canvas.

import type { BscanFrame, ScenarioSpec, StateFrame } from "./protocol.js";
import type { EventMark, RingBuffer } from "./state.js";

// Minimal slice of CanvasRenderingContext2D used here; tests stub it.
export interface Draw2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  stroke(): void;
  fill(): void;
  fillText(text: string, x: number, y: number): void;
  putImageData?(data: ImageData, x: number, y: number): void;
}

export function scaleBarPx(pitchUm: number, barUm = 100): number {
  return barUm / pitchUm;
}

// Structurally ImageData-compatible; jsdom has no ImageData constructor, so
// the native object is only built right at the canvas boundary.
export interface GrayscaleImage {
  width: number;
  height: number;
  data: Uint8ClampedArray;
}

// Grayscale bytes to RGBA pixels.
export function bscanToImage(frame: BscanFrame): GrayscaleImage {
  const raw = atob(frame.pixels_b64);
  const rgba = new Uint8ClampedArray(frame.w * frame.h * 4);
  for (let i = 0; i < frame.w * frame.h; i++) {
    const g = raw.charCodeAt(i);
    rgba[4 * i] = g;
    rgba[4 * i + 1] = g;
    rgba[4 * i + 2] = g;
    rgba[4 * i + 3] = 255;
  }
  return { width: frame.w, height: frame.h, data: rgba };
}

function asNativeImageData(img: GrayscaleImage): ImageData {
  const Ctor = (globalThis as { ImageData?: typeof ImageData }).ImageData;
  if (Ctor) {
    return new Ctor(img.data as unknown as Uint8ClampedArray<ArrayBuffer>,
                    img.width, img.height);
  }
  return img as unknown as ImageData;
}

export interface TopdownProjection {
  toPx(xMm: number, yMm: number): [number, number];
  mmToPx: number;
}

export function topdownProjection(scenario: ScenarioSpec, w: number,
                                  h: number): TopdownProjection {
  const mmToPx = Math.min(w, h) / (2.2 * scenario.globe_radius_mm);
  const cx = w / 2;
  const cy = h / 2;
  return {
    mmToPx,
    toPx: (xMm, yMm) => [cx + xMm * mmToPx, cy - yMm * mmToPx],
  };
}

// Depth cue: the tool shadow sits beside the tip by an offset proportional
// to the tip's height above the retina and converges onto it at contact.
export function shadowOffsetMm(scenario: ScenarioSpec,
                               tip: [number, number, number]): number {
  const r = scenario.globe_radius_mm;
  const lateral2 = tip[0] * tip[0] + tip[1] * tip[1];
  const retinaZ = -Math.sqrt(Math.max(r * r - lateral2, 0));
  const gap = tip[2] - retinaZ;
  return Math.max(gap, 0) * 0.5;
}

export function renderTopdown(ctx: Draw2D, w: number, h: number,
                              scenario: ScenarioSpec | null,
                              state: StateFrame | null): void {
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#10100e";
  ctx.fillRect(0, 0, w, h);
  if (scenario === null) {
    ctx.fillStyle = "#777";
    ctx.fillText("no session", 12, 20);
    return;
  }
  const proj = topdownProjection(scenario, w, h);
  // retina disc
  const [cx, cy] = proj.toPx(0, 0);
  ctx.fillStyle = "#4c2a1d";
  ctx.beginPath();
  ctx.arc(cx, cy, scenario.globe_radius_mm * proj.mmToPx, 0, 2 * Math.PI);
  ctx.fill();
  // vessel centerline
  ctx.strokeStyle = "#a03030";
  ctx.lineWidth = Math.max(2, scenario.vessel.lumen_radius_um / 1000 * 2 * proj.mmToPx);
  ctx.beginPath();
  scenario.vessel.centerline_mm.forEach((p, i) => {
    const [x, y] = proj.toPx(p[0], p[1]);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
  // sclerotomy marker
  const scl = scenario.sclerotomy_points_mm[0];
  const [sx, sy] = proj.toPx(scl[0], scl[1]);
  ctx.strokeStyle = "#888";
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.arc(sx, sy, 4, 0, 2 * Math.PI);
  ctx.stroke();
  if (state === null) {
    ctx.fillStyle = "#777";
    ctx.fillText("waiting for state frames", 12, 20);
    return;
  }
  // tool shadow first, then the needle tip over it
  const off = shadowOffsetMm(scenario, state.tip);
  const [shx, shy] = proj.toPx(state.tip[0] + off, state.tip[1]);
  ctx.fillStyle = "rgba(0,0,0,0.55)";
  ctx.beginPath();
  ctx.arc(shx, shy, 3, 0, 2 * Math.PI);
  ctx.fill();
  const [tx, ty] = proj.toPx(state.tip[0], state.tip[1]);
  ctx.strokeStyle = "#d8d8c8";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(sx, sy);
  ctx.lineTo(tx, ty);
  ctx.stroke();
  ctx.fillStyle = "#f4f4e8";
  ctx.beginPath();
  ctx.arc(tx, ty, 2.5, 0, 2 * Math.PI);
  ctx.fill();
}

export function renderBscanPanel(ctx: Draw2D, w: number, h: number,
                                 scan: BscanFrame | null): void {
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#000";
  ctx.fillRect(0, 0, w, h);
  if (scan === null) {
    ctx.fillStyle = "#777";
    ctx.fillText("no scan yet: press B-scan", 12, 20);
    return;
  }
  ctx.putImageData?.(asNativeImageData(bscanToImage(scan)), 0, 0);
  // 100 um scale bar at native pixel pitch
  const bar = scaleBarPx(scan.pitch_um);
  ctx.strokeStyle = "#fff";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.moveTo(10, scan.h - 10);
  ctx.lineTo(10 + bar, scan.h - 10);
  ctx.stroke();
  ctx.fillStyle = "#fff";
  ctx.fillText("100 µm", 10, scan.h - 16);
  ctx.fillText(`t=${scan.t.toFixed(2)}s`, scan.w - 70, 14);
}

export function renderStrip(ctx: Draw2D, w: number, h: number,
                            buffer: RingBuffer, events: EventMark[],
                            label: string, color: string,
                            yMax?: number): void {
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#181818";
  ctx.fillRect(0, 0, w, h);
  ctx.fillStyle = "#aaa";
  ctx.fillText(label, 6, 12);
  if (buffer.length < 2) return;
  const t0 = buffer.t[0];
  const t1 = buffer.t[buffer.length - 1];
  const span = Math.max(t1 - t0, 1e-9);
  const top = yMax ?? Math.max(...buffer.v, 1e-9) * 1.1;
  ctx.strokeStyle = color;
  ctx.lineWidth = 1;
  ctx.beginPath();
  for (let i = 0; i < buffer.length; i++) {
    const x = ((buffer.t[i] - t0) / span) * w;
    const y = h - (buffer.v[i] / top) * (h - 16);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  }
  ctx.stroke();
  // event tick marks inside the visible window
  ctx.strokeStyle = "#e0c040";
  for (const mark of events) {
    if (mark.t < t0 || mark.t > t1) continue;
    const x = ((mark.t - t0) / span) * w;
    ctx.beginPath();
    ctx.moveTo(x, 0);
    ctx.lineTo(x, h);
    ctx.stroke();
  }
}
