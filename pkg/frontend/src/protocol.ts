// Wire protocol shared with the session server. One JSON object per
// message; client messages are start/listen/stop, server messages are
// ready/token/done/error.

export interface StartMessage {
  type: "start";
  context: string;
  seed: number;
  mode: "realtime" | "lockstep";
  tick_ms?: number;
}

export interface ListenMessage {
  type: "listen";
  symbols: number[];
  tag?: "command";
}

export interface StopMessage {
  type: "stop";
}

export type ClientMessage = StartMessage | ListenMessage | StopMessage;

export interface ReadyMessage {
  type: "ready";
  session_id: string;
  max_len: number;
  mu_frames: number;
}

export interface TokenMessage {
  type: "token";
  step: number;
  token: number;
  irq_p: number;
  irq_log10: number;
}

export interface DoneMessage {
  type: "done";
  reason: string;
  step: number;
  transcript: string;
  latency_frames?: number;
  dropped_frames: number;
}

export interface ErrorMessage {
  type: "error";
  code: string;
  message: string;
}

export type ServerMessage =
  | ReadyMessage
  | TokenMessage
  | DoneMessage
  | ErrorMessage;

export interface Manifest {
  scenario: string;
  mu_frames: number;
  detection_window: number;
  words: string[];
  speakers: number[];
  commands: Record<string, Record<string, number[]>>;
  listen: {
    sil: number;
    noise_steady: number[];
    noise_burst: number[];
    vocab_size: number;
  };
  tick_ms_options: number[];
}

export const SIL = 0;
export const EOS_TOKEN = 65;
export const IRQ_TOKEN = 66;

export function parseServerMessage(raw: string): ServerMessage {
  let obj: unknown;
  try {
    obj = JSON.parse(raw);
  } catch {
    throw new Error(`unparseable server message: ${raw.slice(0, 80)}`);
  }
  if (typeof obj !== "object" || obj === null || !("type" in obj)) {
    throw new Error("server message is not an object with a type");
  }
  const msg = obj as Record<string, unknown>;
  switch (msg.type) {
    case "ready":
    case "token":
    case "done":
    case "error":
      return msg as unknown as ServerMessage;
    default:
      throw new Error(`unknown server message type ${String(msg.type)}`);
  }
}

export type TokenClass = "audio" | "eos" | "irq" | "control";

export function tokenClass(token: number): TokenClass {
  if (token >= 0 && token < 64) return "audio";
  if (token === EOS_TOKEN) return "eos";
  if (token === IRQ_TOKEN) return "irq";
  return "control";
}
