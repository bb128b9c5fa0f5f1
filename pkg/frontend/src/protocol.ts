// Wire types for the session protocol (see docs/protocol.md in the repo).

export type RobotKey = "Left" | "Right" | "Up" | "Down" | "D" | "U" | "P" | "R";

export type WorkflowStep =
  | "preparation"
  | "navigation"
  | "puncture"
  | "verify_retract"
  | "infusion"
  | "retraction"
  | "done"
  | "failed";

export interface StateFrame {
  type: "state";
  t: number;
  joints: number[];
  tip: [number, number, number];
  tip_velocity: [number, number, number];
  force: [number, number, number];
  rcm_deviation_um: number;
  step: WorkflowStep;
  attempt: number;
}

export interface PlaneSpec {
  origin: [number, number, number];
  lateral: [number, number, number];
  depth: [number, number, number];
  width_mm: number;
  depth_mm: number;
}

export interface BscanFrame {
  type: "bscan";
  t: number;
  w: number;
  h: number;
  pitch_um: number;
  pixels_b64: string;
  plane: PlaneSpec;
}

export interface EventFrame {
  type: "event";
  kind: string;
  t: number;
}

export interface ErrorFrame {
  type: "error";
  code: string;
  message: string;
}

export type ServerFrame = StateFrame | BscanFrame | EventFrame | ErrorFrame;

export interface KeyMessage {
  type: "key";
  key: RobotKey;
  action: "down" | "up";
}

export interface RequestBscanMessage {
  type: "request_bscan";
  auto?: boolean;
  plane?: PlaneSpec;
}

export interface ConfirmContactMessage {
  type: "confirm_contact";
}

export interface DeclareVerificationMessage {
  type: "declare_verification";
  passed: boolean;
}

export interface BeginInfusionMessage {
  type: "begin_infusion";
}

export type ClientMessage =
  | KeyMessage
  | RequestBscanMessage
  | ConfirmContactMessage
  | DeclareVerificationMessage
  | BeginInfusionMessage;

export interface VesselSpec {
  centerline_mm: number[][];
  lumen_radius_um: number;
  wall_thickness_um: number;
  max_wall_deflection_um: number;
}

export interface ScenarioSpec {
  globe_radius_mm: number;
  vessel: VesselSpec;
  sclerotomy_points_mm: number[][];
  puncture_speed_threshold_mm_s: number;
  blood_present: boolean;
  failure_injection: string;
  tremor_enabled: boolean;
  tremor_amplitude_um: number;
}

export interface SessionCreated {
  id: string;
  ws_path: string;
  step: WorkflowStep;
  scenario: ScenarioSpec;
}
