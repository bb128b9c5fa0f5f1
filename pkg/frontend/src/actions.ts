// Operator action buttons: what each one sends and when it is enabled.
// Enabled states mirror the workflow gating, so a button can never emit a
// message the server would refuse in that step.

import type { ClientMessage, PlaneSpec, WorkflowStep } from "./protocol.js";

export interface ActionAvailability {
  confirmContact: boolean;
  declareVerification: boolean;
  beginInfusion: boolean;
  requestBscan: boolean;
}

const LIVE_STEPS: WorkflowStep[] = [
  "navigation",
  "puncture",
  "verify_retract",
  "infusion",
  "retraction",
];

export function availableActions(step: WorkflowStep): ActionAvailability {
  return {
    confirmContact: step === "navigation",
    declareVerification: step === "verify_retract",
    beginInfusion: step === "infusion",
    requestBscan: LIVE_STEPS.includes(step),
  };
}

export function confirmContact(): ClientMessage {
  return { type: "confirm_contact" };
}

export function declareVerification(passed: boolean): ClientMessage {
  return { type: "declare_verification", passed };
}

export function beginInfusion(): ClientMessage {
  return { type: "begin_infusion" };
}

export function requestBscan(auto: boolean, plane?: PlaneSpec): ClientMessage {
  if (auto) return { type: "request_bscan", auto: true };
  if (plane) return { type: "request_bscan", plane };
  return { type: "request_bscan" };
}

// Manual plane control: nudge the scan position along the plane normal
// (i.e., along the vessel run), the adjustment the bench workflow needs
// after a puncture moves the tip off the scanned cross-section.
export function nudgePlane(plane: PlaneSpec, offsetMm: number): PlaneSpec {
  const [lx, ly, lz] = plane.lateral;
  const [dx, dy, dz] = plane.depth;
  const n: [number, number, number] = [
    ly * dz - lz * dy,
    lz * dx - lx * dz,
    lx * dy - ly * dx,
  ];
  return {
    ...plane,
    origin: [
      plane.origin[0] + offsetMm * n[0],
      plane.origin[1] + offsetMm * n[1],
      plane.origin[2] + offsetMm * n[2],
    ],
  };
}
