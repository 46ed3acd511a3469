// DOM wiring: keyboard control, HUD readouts, recording toggle.
//
// Action keys are ignored while a prior action is unacknowledged, so at
// most one message is ever in flight (the bridge promises one reply per
// message). Tab switches between the sheath and the endoscope.

import { TeleopClient, SocketFactory } from "./client.js";
import { ActionName, StateMsg, TreeDoc } from "./protocol.js";
import { drawFrame, drawMap } from "./view.js";

export type Instrument = "sheath" | "endoscope";

export interface SessionState {
  status: string;
  step: number;
  episode: number;
  cumulativeReward: number;
  recording: boolean;
  instrument: Instrument;
  done: boolean;
  reason: string | null;
  lastState: StateMsg | null;
}

const KEY_VERBS: Record<string, string> = {
  w: "FORWARD",
  s: "BACKWARD",
  arrowleft: "LEFT",
  arrowright: "RIGHT",
  arrowup: "IN",
  arrowdown: "OUT",
};

export function actionForKey(key: string, instrument: Instrument): ActionName | null {
  const verb = KEY_VERBS[key.toLowerCase()];
  if (!verb) return null;
  const prefix = instrument === "sheath" ? "s_" : "e_";
  return (prefix + verb) as ActionName;
}

export interface AppElements {
  frameCanvas: HTMLCanvasElement;
  mapCanvas: HTMLCanvasElement;
  hud: HTMLElement;
  banner: HTMLElement;
  buttons?: HTMLElement | null;
}

export class TeleopApp {
  readonly client: TeleopClient;
  readonly state: SessionState = {
    status: "closed",
    step: 0,
    episode: 0,
    cumulativeReward: 0,
    recording: false,
    instrument: "sheath",
    done: false,
    reason: null,
    lastState: null,
  };
  ignoredWhileInFlight = 0;
  private tree: TreeDoc | null = null;
  private el: AppElements;

  constructor(url: string, el: AppElements, makeSocket?: SocketFactory) {
    this.el = el;
    this.client = new TeleopClient(url, {
      onState: (msg) => this.onState(msg),
      onError: (message) => this.showBanner(`error: ${message}`),
      onRecording: (active, path) => {
        this.state.recording = active;
        this.showBanner(active ? `recording -> ${path ?? ""}` : "recording stopped");
        this.renderHud();
      },
      onStatus: (status) => {
        this.state.status = status;
        if (status === "closed") this.showBanner("disconnected - reconnect to continue");
        if (status === "open") {
          this.showBanner("");
          this.client.sendReset();
        }
        this.renderHud();
      },
    }, makeSocket);
  }

  setTree(tree: TreeDoc): void {
    this.tree = tree;
    if (this.state.lastState) this.redraw(this.state.lastState);
  }

  start(): void {
    this.client.connect();
  }

  handleKey(key: string): void {
    if (key === "Tab") {
      this.state.instrument = this.state.instrument === "sheath" ? "endoscope" : "sheath";
      this.renderHud();
      return;
    }
    if (key.toLowerCase() === "r") {
      this.state.cumulativeReward = 0;
      this.client.sendReset();
      return;
    }
    if (key.toLowerCase() === "g") {
      if (this.state.recording) this.client.stopRecording();
      else this.client.startRecording();
      return;
    }
    const action = actionForKey(key, this.state.instrument);
    if (!action) return;
    if (this.client.inFlight) {
      this.ignoredWhileInFlight++;
      return; // keys are dead until the last action is acknowledged
    }
    if (this.state.done) {
      this.showBanner("episode over - press R to reset");
      return;
    }
    this.client.sendAction(action);
  }

  sendNamedAction(action: ActionName): void {
    if (this.client.inFlight || this.state.done) return;
    this.client.sendAction(action);
  }

  private onState(msg: StateMsg): void {
    const wasReset = msg.step === 0;
    if (wasReset) this.state.cumulativeReward = 0;
    this.state.step = msg.step;
    this.state.episode = msg.episode ?? this.state.episode;
    this.state.cumulativeReward += msg.reward.total;
    this.state.done = msg.done;
    this.state.reason = msg.reason;
    this.state.recording = msg.recording ?? this.state.recording;
    this.state.lastState = msg;
    this.redraw(msg);
    this.renderHud();
    if (msg.done) {
      this.showBanner(`episode finished: ${msg.reason} - press R to reset`);
    }
  }

  private redraw(msg: StateMsg): void {
    drawFrame(this.el.frameCanvas, msg.frame);
    if (this.tree) drawMap(this.el.mapCanvas, this.tree, msg);
  }

  private renderHud(): void {
    const s = this.state;
    const r = s.lastState?.reward;
    const c = s.lastState?.contact;
    this.el.hud.textContent = [
      `conn: ${s.status}`,
      `instrument: ${s.instrument}`,
      `step: ${s.step}`,
      `reward: ${s.cumulativeReward.toFixed(2)}`,
      r ? `r_d ${r.r_d.toFixed(2)}  r_a ${r.r_a.toFixed(3)}  r_b ${r.r_b}  r_g ${r.r_g}` : "",
      c ? `force max ${c.max_force.toFixed(3)}N mean ${c.mean_force.toFixed(3)}N` : "",
      s.recording ? "REC" : "",
      s.done ? `done: ${s.reason}` : "",
    ].filter(Boolean).join("  |  ");
  }

  private showBanner(text: string): void {
    this.el.banner.textContent = text;
    (this.el.banner as HTMLElement).style.display = text ? "block" : "none";
  }
}

export function bindKeyboard(app: TeleopApp, target: Document = document): void {
  target.addEventListener("keydown", (ev: Event) => {
    const e = ev as KeyboardEvent;
    const handled = e.key === "Tab" || e.key.toLowerCase() in KEY_VERBS ||
      ["r", "g"].includes(e.key.toLowerCase());
    if (handled) e.preventDefault();
    app.handleKey(e.key);
  });
}
