// Console state: latest-frame slots plus strip-chart ring buffers. Every
// rendered quantity originates from server frames; the console never
// simulates anything locally.

import type {
  BscanFrame,
  ErrorFrame,
  EventFrame,
  ScenarioSpec,
  ServerFrame,
  StateFrame,
  WorkflowStep,
} from "./protocol.js";

export class RingBuffer {
  readonly t: number[] = [];
  readonly v: number[] = [];

  constructor(readonly capacity: number) {}

  push(t: number, value: number): void {
    this.t.push(t);
    this.v.push(value);
    if (this.t.length > this.capacity) {
      this.t.shift();
      this.v.shift();
    }
  }

  get length(): number {
    return this.t.length;
  }
}

export interface EventMark {
  kind: string;
  t: number;
}

export type ConnectionStatus = "idle" | "connecting" | "open" | "closed";

const norm3 = (v: [number, number, number]) =>
  Math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);

export class ConsoleState {
  connection: ConnectionStatus = "idle";
  scenario: ScenarioSpec | null = null;
  lastState: StateFrame | null = null;
  lastBscan: BscanFrame | null = null;
  step: WorkflowStep = "preparation";
  attempt = 1;
  events: EventMark[] = [];
  toast: string | null = null;
  staleFramesDropped = 0;

  readonly velocity = new RingBuffer(600);
  readonly force = new RingBuffer(600);
  readonly deviation = new RingBuffer(600);

  apply(frame: ServerFrame): void {
    switch (frame.type) {
      case "state":
        this.applyState(frame);
        break;
      case "bscan":
        // latest-frame slot; an older scan never replaces a newer one
        if (this.lastBscan === null || frame.t >= this.lastBscan.t) {
          this.lastBscan = frame;
        }
        break;
      case "event":
        this.applyEvent(frame);
        break;
      case "error":
        this.applyError(frame);
        break;
    }
  }

  private applyState(frame: StateFrame): void {
    if (this.lastState !== null && frame.t <= this.lastState.t) {
      this.staleFramesDropped += 1;
      return; // rendered timestamps stay monotone
    }
    this.lastState = frame;
    this.step = frame.step;
    this.attempt = frame.attempt;
    this.velocity.push(frame.t, norm3(frame.tip_velocity));
    this.force.push(frame.t, norm3(frame.force));
    this.deviation.push(frame.t, frame.rcm_deviation_um);
  }

  private applyEvent(frame: EventFrame): void {
    this.events.push({ kind: frame.kind, t: frame.t });
    if (frame.kind === "verification_failed") {
      this.toast = "verification failed: repeat puncture";
    } else if (frame.kind === "infusion_failed") {
      this.toast = "infusion failed";
    }
  }

  private applyError(frame: ErrorFrame): void {
    if (frame.code === "key_gated") {
      this.toast = `gated: ${frame.message}`;
    } else {
      this.toast = `${frame.code}: ${frame.message}`;
    }
  }
}
