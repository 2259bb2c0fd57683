// Session client: owns one connection, applies server messages to the
// state reducer, and runs the frame-injection ticker that turns held
// buttons into listen messages (one symbol per tick).

import {
  ClientMessage,
  Manifest,
  parseServerMessage,
  SIL,
} from "./protocol";
import {
  initialState,
  reduce,
  setConnection,
  UiState,
} from "./state";

export interface Transport {
  send(data: string): void;
  close(): void;
  onMessage(cb: (data: string) => void): void;
  onOpen(cb: () => void): void;
  onClose(cb: () => void): void;
  onError(cb: (err: string) => void): void;
}

export function webSocketTransport(url: string): Transport {
  const ws = new WebSocket(url);
  return {
    send: (data) => ws.send(data),
    close: () => ws.close(),
    onMessage: (cb) =>
      ws.addEventListener("message", (evt) => cb(String(evt.data))),
    onOpen: (cb) => ws.addEventListener("open", () => cb()),
    onClose: (cb) => ws.addEventListener("close", () => cb()),
    onError: (cb) => ws.addEventListener("error", () => cb("connection error")),
  };
}

export interface ClientOptions {
  tickMs: number;
  seed: number;
  // injected for tests; defaults to wall-clock interval
  setIntervalFn?: (fn: () => void, ms: number) => unknown;
  clearIntervalFn?: (handle: unknown) => void;
}

export class ConsoleClient {
  state: UiState = initialState();
  private transport: Transport | null = null;
  private listeners: Array<(s: UiState) => void> = [];
  private ticker: unknown = null;
  private holdSymbols: number[] = [];
  private holdTagPending = false;
  private noiseOn = false;
  private noisePhase = 0;
  private readonly opts: Required<ClientOptions>;

  constructor(opts: ClientOptions) {
    this.opts = {
      setIntervalFn: (fn, ms) => setInterval(fn, ms),
      clearIntervalFn: (h) => clearInterval(h as Parameters<typeof clearInterval>[0]),
      ...opts,
    };
  }

  subscribe(cb: (s: UiState) => void): void {
    this.listeners.push(cb);
  }

  private update(next: UiState): void {
    this.state = next;
    for (const cb of this.listeners) cb(this.state);
    if (this.state.done !== null || this.state.connection === "error") {
      this.stopTicker();
    }
  }

  connect(transport: Transport): void {
    this.transport = transport;
    this.update(setConnection(this.state, "connecting"));
    transport.onOpen(() => this.update(setConnection(this.state, "open")));
    transport.onClose(() => {
      if (this.state.connection !== "error") {
        this.update(setConnection(this.state, "closed"));
      }
    });
    transport.onError((err) =>
      this.update(setConnection(this.state, "error", err)),
    );
    transport.onMessage((raw) => {
      this.update(reduce(this.state, parseServerMessage(raw)));
    });
  }

  start(context: string): void {
    if (context.length === 0) {
      this.update(
        setConnection(this.state, this.state.connection, "context is empty"),
      );
      return;
    }
    this.send({
      type: "start",
      context,
      seed: this.opts.seed,
      mode: "realtime",
      tick_ms: this.opts.tickMs,
    });
    this.ticker = this.opts.setIntervalFn(() => this.tick(), this.opts.tickMs);
  }

  stop(): void {
    this.send({ type: "stop" });
  }

  // Hold-to-interrupt: queue the pre-rendered command; the ticker sends
  // one symbol per tick, tagging the first so done reports latency.
  holdCommand(manifest: Manifest, word: string, speaker: number): void {
    if (this.state.done !== null) return; // controls frozen after done
    const rendered = manifest.commands[word]?.[String(speaker)];
    if (!rendered) throw new Error(`no rendered command for ${word}/${speaker}`);
    this.holdSymbols = [...rendered];
    this.holdTagPending = true;
  }

  release(): void {
    this.holdSymbols = [];
    this.holdTagPending = false;
  }

  setNoise(on: boolean): void {
    this.noiseOn = on;
  }

  tick(): void {
    if (this.state.done !== null) return;
    if (this.holdSymbols.length > 0) {
      const symbol = this.holdSymbols.shift() as number;
      this.send({
        type: "listen",
        symbols: [symbol],
        ...(this.holdTagPending ? { tag: "command" as const } : {}),
      });
      this.holdTagPending = false;
      return;
    }
    if (this.noiseOn) {
      // cycle the steady-noise alphabet
      const noise = 1 + (this.noisePhase++ % 4);
      this.send({ type: "listen", symbols: [noise] });
      return;
    }
    this.send({ type: "listen", symbols: [SIL] });
  }

  private send(msg: ClientMessage): void {
    this.transport?.send(JSON.stringify(msg));
  }

  private stopTicker(): void {
    if (this.ticker !== null) {
      this.opts.clearIntervalFn(this.ticker);
      this.ticker = null;
    }
  }
}

export async function fetchManifest(baseUrl: string): Promise<Manifest> {
  const res = await fetch(`${baseUrl}/manifest`);
  if (!res.ok) throw new Error(`manifest fetch failed: ${res.status}`);
  return (await res.json()) as Manifest;
}
