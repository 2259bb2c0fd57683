// Pure session-view state: every rendered value originates from a
// server message applied through reduce(); the UI layer only formats.

import {
  DoneMessage,
  ReadyMessage,
  ServerMessage,
  TokenClass,
  tokenClass,
} from "./protocol";

export interface TapeCell {
  step: number;
  token: number;
  cls: TokenClass;
  irqP: number;
}

export type ConnectionState =
  | "idle"
  | "connecting"
  | "open"
  | "closed"
  | "error";

export interface UiState {
  connection: ConnectionState;
  errorText: string | null;
  ready: ReadyMessage | null;
  tape: TapeCell[];
  done: DoneMessage | null;
}

export function initialState(): UiState {
  return {
    connection: "idle",
    errorText: null,
    ready: null,
    tape: [],
    done: null,
  };
}

export function reduce(state: UiState, msg: ServerMessage): UiState {
  switch (msg.type) {
    case "ready":
      return { ...state, ready: msg };
    case "token": {
      if (state.done !== null) {
        // protocol violation: tokens never follow done
        return {
          ...state,
          connection: "error",
          errorText: `token after done at step ${msg.step}`,
        };
      }
      const expected = state.tape.length + 1;
      if (msg.step !== expected) {
        return {
          ...state,
          connection: "error",
          errorText: `step ${msg.step} out of order, expected ${expected}`,
        };
      }
      const cell: TapeCell = {
        step: msg.step,
        token: msg.token,
        cls: tokenClass(msg.token),
        irqP: msg.irq_p,
      };
      return { ...state, tape: [...state.tape, cell] };
    }
    case "done":
      return { ...state, done: msg };
    case "error":
      return {
        ...state,
        connection: "error",
        errorText: `${msg.code}: ${msg.message}`,
      };
  }
}

export function setConnection(
  state: UiState,
  connection: ConnectionState,
  errorText: string | null = null,
): UiState {
  return { ...state, connection, errorText };
}

// Sparkline values are derived 1:1 from the tape, so point count always
// equals tape length.
export function irqSeries(state: UiState): number[] {
  return state.tape.map((c) => c.irqP);
}

export function latencyFrames(state: UiState): number | null {
  if (state.done === null || state.done.latency_frames === undefined) {
    return null;
  }
  return state.done.latency_frames;
}

export function latencyWithinWindow(state: UiState): boolean | null {
  const latency = latencyFrames(state);
  if (latency === null || state.ready === null) return null;
  return latency <= 2 * state.ready.mu_frames;
}

export function controlsFrozen(state: UiState): boolean {
  return state.done !== null || state.connection === "error";
}
