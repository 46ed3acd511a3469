// Wire types for ws://host:port/teleop. Mirrors
// ../schema/teleop_protocol.schema.json — keep the two in sync.

export const ACTIONS = [
  "s_FORWARD", "s_BACKWARD", "s_LEFT", "s_RIGHT", "s_IN", "s_OUT",
  "e_FORWARD", "e_BACKWARD", "e_LEFT", "e_RIGHT", "e_IN", "e_OUT",
] as const;

export type ActionName = (typeof ACTIONS)[number];

export type ClientMsg =
  | { id: number; type: "action"; name: ActionName }
  | { id: number; type: "reset"; seed?: number }
  | { id: number; type: "record_start"; name?: string }
  | { id: number; type: "record_stop" };

export interface FramePayload {
  b64: string;
  w: number;
  h: number;
}

export interface RewardPayload {
  r_d: number;
  r_a: number;
  r_b: number;
  r_g: number;
  total: number;
}

export interface StateMsg {
  id: number;
  ack: number | null;
  type: "state";
  version?: number;
  step: number;
  episode?: number;
  frame: FramePayload;
  backbone: number[];
  reward: RewardPayload;
  done: boolean;
  reason: string | null;
  recording?: boolean;
  subgoal?: number;
  contact?: { max_force: number; mean_force: number };
}

export interface ErrorMsg {
  id?: number;
  ack?: number | null;
  type: "error";
  message: string;
}

export interface RecordingMsg {
  id: number;
  ack?: number | null;
  type: "recording";
  active: boolean;
  path?: string;
}

export type ServerMsg = StateMsg | ErrorMsg | RecordingMsg;

export interface TreeDoc {
  version: number;
  segments: { id: number; parent: number | null; points: number[][]; radii: number[] }[];
  projection: { origin: number[]; u: number[]; v: number[] };
  target: number[];
  actions: string[];
}

export function parseServerMsg(raw: string): ServerMsg | null {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof doc !== "object" || doc === null) return null;
  const t = (doc as { type?: unknown }).type;
  if (t === "state" || t === "error" || t === "recording") {
    return doc as ServerMsg;
  }
  return null;
}

export function decodeFrame(frame: FramePayload): Uint8ClampedArray {
  const raw = atob(frame.b64);
  if (raw.length !== frame.w * frame.h) {
    throw new Error(`frame payload has ${raw.length} bytes, expected ${frame.w * frame.h}`);
  }
  const px = new Uint8ClampedArray(frame.w * frame.h);
  for (let i = 0; i < raw.length; i++) px[i] = raw.charCodeAt(i);
  return px;
}
