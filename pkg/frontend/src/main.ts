// DOM wiring: binds the session client and state to the page controls.

import { ConsoleClient, fetchManifest, webSocketTransport } from "./client";
import { Manifest } from "./protocol";
import { sparklinePath, toLogPoints } from "./sparkline";
import { irqSeries, latencyFrames, latencyWithinWindow, UiState } from "./state";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

let client: ConsoleClient | null = null;
let manifest: Manifest | null = null;

function render(state: UiState): void {
  $("connection").textContent = state.connection;
  const banner = $("error-banner");
  banner.textContent = state.errorText ?? "";
  banner.style.display = state.errorText ? "block" : "none";

  const tape = $("tape");
  tape.innerHTML = "";
  for (const cell of state.tape) {
    const el = document.createElement("span");
    el.className = `cell cell-${cell.cls}`;
    el.title = `step ${cell.step}: P(IRQ)=${cell.irqP.toExponential(2)}`;
    el.textContent = cell.cls === "audio" ? String(cell.token) : cell.cls.toUpperCase();
    tape.appendChild(el);
  }

  const path = sparklinePath(toLogPoints(irqSeries(state)), 600, 80);
  $("sparkline-path").setAttribute("d", path);

  if (state.done) {
    $("transcript").textContent = state.done.transcript;
    $("stop-reason").textContent = `${state.done.reason} @ step ${state.done.step}`;
    const latency = latencyFrames(state);
    const readout = $("latency");
    if (latency !== null) {
      readout.textContent = `${latency} frames`;
      readout.className = latencyWithinWindow(state) ? "latency-ok" : "latency-late";
    } else {
      readout.textContent = "-";
      readout.className = "";
    }
  }
  const frozen = state.done !== null || state.connection === "error";
  for (const id of ["start", "interrupt", "noise", "stop"]) {
    ($(id) as HTMLButtonElement).disabled = frozen && id !== "start";
  }
}

async function boot(): Promise<void> {
  const serverInput = $("server") as HTMLInputElement;
  const base = serverInput.value.replace(/\/$/, "");
  try {
    manifest = await fetchManifest(base.replace("ws://", "http://"));
  } catch (e) {
    $("error-banner").textContent = `server unreachable: ${e}`;
    $("error-banner").style.display = "block";
    return;
  }
  const wordSel = $("word") as HTMLSelectElement;
  wordSel.innerHTML = "";
  for (const w of manifest.words) {
    const opt = document.createElement("option");
    opt.value = w;
    opt.textContent = w;
    wordSel.appendChild(opt);
  }
  const speakerSel = $("speaker") as HTMLSelectElement;
  speakerSel.innerHTML = "";
  for (const s of manifest.speakers) {
    const opt = document.createElement("option");
    opt.value = String(s);
    opt.textContent = `speaker ${s}`;
    speakerSel.appendChild(opt);
  }
  $("mu").textContent = String(manifest.mu_frames);
}

function startSession(): void {
  const base = ($("server") as HTMLInputElement).value.replace(/\/$/, "");
  const tickMs = Number(($("tick") as HTMLSelectElement).value);
  client = new ConsoleClient({ tickMs, seed: Date.now() % 100000 });
  client.subscribe(render);
  client.connect(
    webSocketTransport(`${base.replace("http://", "ws://")}/session`),
  );
  const context = ($("context") as HTMLInputElement).value;
  client.start(context);
}

window.addEventListener("load", () => {
  void boot();
  $("start").addEventListener("click", startSession);
  $("stop").addEventListener("click", () => client?.stop());
  const interrupt = $("interrupt");
  interrupt.addEventListener("mousedown", () => {
    if (client && manifest) {
      const word = ($("word") as HTMLSelectElement).value;
      const speaker = Number(($("speaker") as HTMLSelectElement).value);
      client.holdCommand(manifest, word, speaker);
    }
  });
  interrupt.addEventListener("mouseup", () => client?.release());
  interrupt.addEventListener("mouseleave", () => client?.release());
  const noise = $("noise") as HTMLInputElement;
  noise.addEventListener("change", () => client?.setNoise(noise.checked));
  $("retry").addEventListener("click", () => void boot());
});
