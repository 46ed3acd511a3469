// A scripted stand-in for the bridge: one state reply per client message,
// delivered asynchronously like a real socket.

import { ClientMsg } from "../src/protocol.js";

export class FakeSocket {
  readyState = 0;
  sent: string[] = [];
  onopen: ((ev?: unknown) => void) | null = null;
  onclose: ((ev?: unknown) => void) | null = null;
  onmessage: ((ev: { data: string }) => void) | null = null;
  onerror: ((ev?: unknown) => void) | null = null;
  autoRespond: boolean;
  step = 0;
  episode = -1;
  violations = 0;
  private inFlight = 0;

  constructor(autoRespond = true) {
    this.autoRespond = autoRespond;
    queueMicrotask(() => {
      this.readyState = 1;
      this.onopen?.();
    });
  }

  send(data: string): void {
    this.inFlight++;
    if (this.inFlight > 1) this.violations++;
    this.sent.push(data);
    if (this.autoRespond) {
      const msg = JSON.parse(data) as ClientMsg;
      queueMicrotask(() => this.respond(msg));
    }
  }

  respond(msg: ClientMsg): void {
    this.inFlight--;
    let reply: Record<string, unknown>;
    if (msg.type === "reset") {
      this.episode++;
      this.step = 0;
      reply = this.stateReply(msg.id);
    } else if (msg.type === "action") {
      this.step++;
      reply = this.stateReply(msg.id);
    } else {
      reply = { id: 9_000 + msg.id, ack: msg.id, type: "recording",
                active: msg.type === "record_start", path: "/tmp/rec.jsonl" };
    }
    this.onmessage?.({ data: JSON.stringify(reply) });
  }

  stateReply(ack: number): Record<string, unknown> {
    const w = 8, h = 8;
    const bytes = new Array(w * h).fill(0)
      .map((_, i) => String.fromCharCode((i * 7 + this.step) % 256)).join("");
    return {
      id: 1000 + this.step + this.episode * 10_000,
      ack,
      type: "state",
      step: this.step,
      episode: this.episode,
      frame: { b64: btoa(bytes), w, h },
      backbone: [0, 0, 0, 0, 0, 1, 0, 0, 2],
      reward: this.step === 0
        ? { r_d: 0, r_a: 0, r_b: 0, r_g: 0, total: 0 }
        : { r_d: -1.5, r_a: -0.1, r_b: 0, r_g: 0, total: -0.115 },
      done: false,
      reason: null,
      recording: false,
      subgoal: 0,
      contact: { max_force: 0, mean_force: 0 },
    };
  }

  close(): void {
    this.readyState = 3;
    this.onclose?.();
  }
}

export async function settle(rounds = 20): Promise<void> {
  for (let i = 0; i < rounds; i++) {
    await new Promise((r) => queueMicrotask(() => r(null)));
  }
}
