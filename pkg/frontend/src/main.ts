// Browser entry point: wires the key capture, action buttons, and the three
// render surfaces to one session. The render loop runs on animation frames
// and reads the latest-frame slots, decoupled from message arrival.

import {
  availableActions,
  beginInfusion,
  confirmContact,
  declareVerification,
  nudgePlane,
  requestBscan,
} from "./actions.js";
import { ConsoleClient, createSession, websocketUrl } from "./client.js";
import { KeyCapture } from "./keyboard.js";
import { renderBscanPanel, renderStrip, renderTopdown } from "./views.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function ctx2d(canvas: HTMLCanvasElement) {
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas 2d unavailable");
  return ctx;
}

const client = new ConsoleClient();
const capture = new KeyCapture((m) => client.send(m));

async function start(): Promise<void> {
  const base = (el<HTMLInputElement>("server-url").value || "http://127.0.0.1:8765")
    .replace(/\/$/, "");
  const seed = parseInt(el<HTMLInputElement>("seed").value || "0", 10);
  const created = await createSession(base, seed);
  const socket = new WebSocket(websocketUrl(base, created.ws_path));
  client.connect(socket as unknown as import("./client.js").SocketLike, created);
  el<HTMLSpanElement>("session-id").textContent = created.id.slice(0, 8);
}

function wire(): void {
  el<HTMLButtonElement>("connect").addEventListener("click", () => {
    start().catch((err) => {
      client.state.toast = String(err);
    });
  });
  el<HTMLButtonElement>("btn-contact").addEventListener("click", () =>
    client.send(confirmContact()));
  el<HTMLButtonElement>("btn-verify-pass").addEventListener("click", () =>
    client.send(declareVerification(true)));
  el<HTMLButtonElement>("btn-verify-fail").addEventListener("click", () =>
    client.send(declareVerification(false)));
  el<HTMLButtonElement>("btn-infuse").addEventListener("click", () =>
    client.send(beginInfusion()));
  el<HTMLButtonElement>("btn-bscan").addEventListener("click", () =>
    client.send(requestBscan(false)));
  el<HTMLButtonElement>("btn-bscan-auto").addEventListener("click", () =>
    client.send(requestBscan(true)));
  const nudge = (mm: number) => {
    const plane = client.state.lastBscan?.plane;
    if (plane) client.send(requestBscan(false, nudgePlane(plane, mm)));
    else client.send(requestBscan(false));
  };
  el<HTMLButtonElement>("btn-nudge-minus").addEventListener("click", () => nudge(-0.05));
  el<HTMLButtonElement>("btn-nudge-plus").addEventListener("click", () => nudge(0.05));

  capture.attach(window);

  const topdown = el<HTMLCanvasElement>("topdown");
  const bscan = el<HTMLCanvasElement>("bscan");
  const strips = ["strip-velocity", "strip-force", "strip-deviation"].map(
    (id) => el<HTMLCanvasElement>(id));

  const banner = el<HTMLDivElement>("banner");
  const toast = el<HTMLDivElement>("toast");

  function frame(): void {
    const s = client.state;
    renderTopdown(ctx2d(topdown), topdown.width, topdown.height, s.scenario, s.lastState);
    renderBscanPanel(ctx2d(bscan), bscan.width, bscan.height, s.lastBscan);
    renderStrip(ctx2d(strips[0]), strips[0].width, strips[0].height,
                s.velocity, s.events, "tip speed (mm/s)", "#6fb3ff");
    renderStrip(ctx2d(strips[1]), strips[1].width, strips[1].height,
                s.force, s.events, "handle force (mN)", "#ff8f6f");
    renderStrip(ctx2d(strips[2]), strips[2].width, strips[2].height,
                s.deviation, s.events, "RCM deviation (µm)", "#8fe08f", 60);
    const step = s.step;
    banner.textContent =
      `${s.connection} | step: ${step} | attempt: ${s.attempt}` +
      (s.lastState ? ` | t=${s.lastState.t.toFixed(2)}s` : "");
    const avail = availableActions(step);
    el<HTMLButtonElement>("btn-contact").disabled = !avail.confirmContact;
    el<HTMLButtonElement>("btn-verify-pass").disabled = !avail.declareVerification;
    el<HTMLButtonElement>("btn-verify-fail").disabled = !avail.declareVerification;
    el<HTMLButtonElement>("btn-infuse").disabled = !avail.beginInfusion;
    el<HTMLButtonElement>("btn-bscan").disabled = !avail.requestBscan;
    el<HTMLButtonElement>("btn-bscan-auto").disabled = !avail.requestBscan;
    toast.textContent = s.toast ?? "";
    requestAnimationFrame(frame);
  }
  requestAnimationFrame(frame);
}

wire();
