// Teleop client with a strict single-in-flight contract: while one message
// awaits its acknowledgement, further commands are queued locally (never
// written to the socket). Mirrors the bridge's one-reply-per-message rule.

import { ActionName, ClientMsg, ServerMsg, parseServerMsg } from "./protocol.js";

export type ConnectionStatus = "connecting" | "open" | "closed";

export interface ClientEvents {
  onState?: (msg: Extract<ServerMsg, { type: "state" }>) => void;
  onError?: (message: string) => void;
  onRecording?: (active: boolean, path?: string) => void;
  onStatus?: (status: ConnectionStatus) => void;
}

interface WebSocketLike {
  readyState: number;
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
}

export type SocketFactory = (url: string) => WebSocketLike;

export class TeleopClient {
  private ws: WebSocketLike | null = null;
  private nextId = 1;
  private pending: ClientMsg | null = null;
  private queue: ClientMsg[] = [];
  private events: ClientEvents;
  private makeSocket: SocketFactory;
  readonly url: string;
  status: ConnectionStatus = "closed";
  sentCount = 0;
  receivedCount = 0;

  constructor(url: string, events: ClientEvents = {},
              makeSocket?: SocketFactory) {
    this.url = url;
    this.events = events;
    this.makeSocket = makeSocket ?? ((u) => new WebSocket(u) as unknown as WebSocketLike);
  }

  connect(): void {
    this.status = "connecting";
    this.events.onStatus?.("connecting");
    const ws = this.makeSocket(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.status = "open";
      this.events.onStatus?.("open");
      this.flush();
    };
    ws.onclose = () => {
      this.status = "closed";
      this.pending = null;
      this.queue = [];
      this.events.onStatus?.("closed");
    };
    ws.onerror = () => {
      this.events.onError?.("socket error");
    };
    ws.onmessage = (ev) => this.handleRaw(ev.data);
  }

  disconnect(): void {
    this.ws?.close();
  }

  get inFlight(): boolean {
    return this.pending !== null;
  }

  get queueLength(): number {
    return this.queue.length;
  }

  sendAction(name: ActionName): void {
    this.enqueue({ id: this.nextId++, type: "action", name });
  }

  sendReset(seed?: number): void {
    // a reset supersedes anything the user has buffered
    this.queue = [];
    this.enqueue(seed === undefined
      ? { id: this.nextId++, type: "reset" }
      : { id: this.nextId++, type: "reset", seed });
  }

  startRecording(name?: string): void {
    this.enqueue({ id: this.nextId++, type: "record_start", name });
  }

  stopRecording(): void {
    this.enqueue({ id: this.nextId++, type: "record_stop" });
  }

  private enqueue(msg: ClientMsg): void {
    this.queue.push(msg);
    this.flush();
  }

  private flush(): void {
    if (this.pending !== null || this.status !== "open" || this.ws === null) return;
    const next = this.queue.shift();
    if (!next) return;
    this.pending = next;
    this.ws.send(JSON.stringify(next));
    this.sentCount++;
  }

  private handleRaw(raw: string): void {
    const msg = parseServerMsg(raw);
    this.receivedCount++;
    if (msg === null) {
      this.events.onError?.("unparseable server message");
      this.pending = null;
      this.flush();
      return;
    }
    if (this.pending !== null && "ack" in msg && msg.ack !== undefined &&
        msg.ack !== null && msg.ack !== this.pending.id) {
      // an unexpected ack still clears the slot so the session can continue
      this.events.onError?.(`ack ${msg.ack} does not match in-flight id ${this.pending.id}`);
    }
    this.pending = null;
    if (msg.type === "state") {
      this.events.onState?.(msg);
    } else if (msg.type === "error") {
      this.events.onError?.(msg.message);
    } else {
      this.events.onRecording?.(msg.active, msg.path);
    }
    this.flush();
  }
}
