"""Duplex streaming session server.

A transport-agnostic protocol core drives live generations over JSON
messages; two transports expose it: newline-delimited JSON over TCP and
the same messages as text frames over a WebSocket (FastAPI app, which
also serves a health endpoint and a world manifest for clients).

Wire protocol. Client to server:
  start  {context, seed?, mode: "realtime"|"lockstep", tick_ms?,
          top_p?, temperature?, greedy?, vanilla?}
  listen {symbols: [int, ...], tag?: "command"}
  stop   {}
Server to client:
  ready  {session_id, max_len, mu_frames}
  token  {step, token, irq_p, irq_log10}
  done   {reason, step, transcript, latency_frames?, dropped_frames}
  error  {code, message}

Every session ends with exactly one done or error; token steps increase
by 1; lockstep emits exactly one token per listen message.
"""

from __future__ import annotations

import asyncio
import json
import math
import uuid
from collections import deque
from typing import Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import PlainTextResponse

from . import vocab
from .model import DuplexModel, LengthError
from .session import SamplerConfig, Session
from .world import World, WorldConfig

QUEUE_CAP = 64
DEFAULT_TICK_MS = 50


class ProtocolError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class ServerSession:
    """Sans-IO protocol core. handle() and tick() return the messages to
    send; the transport owns scheduling and serialization."""

    def __init__(self, model: DuplexModel, world: World):
        self.model = model
        self.world = world
        self.session: Optional[Session] = None
        self.mode: Optional[str] = None
        self.tick_ms = DEFAULT_TICK_MS
        self.done = False
        self.session_id = uuid.uuid4().hex[:12]
        self.queue: deque[int] = deque()
        self.dropped_frames = 0
        self.ignored_after_done = 0
        self.frames_received = 0
        self.last_tag_frame: Optional[int] = None

    def handle(self, msg: dict) -> list[dict]:
        if not isinstance(msg, dict) or "type" not in msg:
            raise ProtocolError("bad_message", "message must be an object with a type")
        kind = msg["type"]
        if kind == "start":
            return self._on_start(msg)
        if kind == "listen":
            return self._on_listen(msg)
        if kind == "stop":
            return self._on_stop()
        raise ProtocolError("unknown_type", f"unknown message type {kind!r}")

    def _on_start(self, msg: dict) -> list[dict]:
        if self.session is not None:
            raise ProtocolError("bad_message", "session already started")
        try:
            context = msg["context"]
            mode = msg.get("mode", "lockstep")
            if mode not in ("realtime", "lockstep"):
                raise ProtocolError("bad_message", f"unknown mode {mode!r}")
            sampler = SamplerConfig(
                top_p=msg.get("top_p", 0.99),
                temperature=msg.get("temperature", 1.0),
                seed=int(msg.get("seed", 0)),
                greedy=bool(msg.get("greedy", False)),
            )
            self.session = Session(
                self.model,
                context,
                sampler,
                realtime=(mode == "realtime"),
                vanilla=bool(msg.get("vanilla", False)),
            )
        except ProtocolError:
            raise
        except (KeyError, TypeError, ValueError, LengthError) as e:
            raise ProtocolError("bad_message", str(e))
        self.mode = mode
        self.tick_ms = int(msg.get("tick_ms", DEFAULT_TICK_MS))
        return [
            {
                "type": "ready",
                "session_id": self.session_id,
                "max_len": self.session.max_len,
                "mu_frames": self.world.config.mu_frames,
            }
        ]

    def _on_listen(self, msg: dict) -> list[dict]:
        if self.done:
            self.ignored_after_done += 1
            return []
        if self.session is None:
            raise ProtocolError("bad_message", "listen before start")
        symbols = msg.get("symbols")
        if not isinstance(symbols, list) or not all(
            isinstance(s, int) and 0 <= s < vocab.V_LISTEN for s in symbols
        ):
            raise ProtocolError("bad_message", "symbols must be listen-alphabet ints")
        if msg.get("tag") == "command":
            # effective stream index of the message's first symbol: frames
            # already consumed (including substituted silence) plus the queue
            self.last_tag_frame = self.session.frames_fed + len(self.queue)
        if self.mode == "lockstep":
            self.frames_received += len(symbols)
            self.session.feed_listen(symbols)
            return self._emit_step()
        for s in symbols:
            if len(self.queue) >= QUEUE_CAP:
                self.queue.popleft()
                self.dropped_frames += 1
            self.queue.append(s)
        self.frames_received += len(symbols)
        return []

    def _on_stop(self) -> list[dict]:
        if self.done:
            self.ignored_after_done += 1
            return []
        if self.session is None:
            raise ProtocolError("bad_message", "stop before start")
        step = self.session.steps
        self.done = True
        return [self._done_msg("client_stop", step)]

    def tick(self) -> list[dict]:
        """Realtime pacing: one generation step per tick; a queued frame
        is consumed if available, else the session substitutes silence."""
        if self.done or self.session is None:
            return []
        if self.queue:
            self.session.feed_listen([self.queue.popleft()])
        return self._emit_step()

    def _emit_step(self) -> list[dict]:
        sess = self.session
        token, irq_p = sess.step()
        out = [
            {
                "type": "token",
                "step": sess.steps,
                "token": token,
                "irq_p": irq_p,
                "irq_log10": math.log10(max(irq_p, 1e-12)),
            }
        ]
        if sess.stop is not None:
            self.done = True
            out.append(self._done_msg(sess.stop.reason, sess.stop.step))
        return out

    def _done_msg(self, reason: str, step: int) -> dict:
        transcript, _ = self.world.codebook.decode(
            [t for t in self.session.tokens if t < vocab.N_AUDIO]
        )
        msg = {
            "type": "done",
            "reason": reason,
            "step": step,
            "transcript": transcript,
            "dropped_frames": self.dropped_frames,
        }
        if reason == "irq" and self.last_tag_frame is not None:
            msg["latency_frames"] = step - self.last_tag_frame
        return msg


def build_manifest(world: World) -> dict:
    cfg = world.config
    speakers = sorted(set(cfg.train_speakers) | set(cfg.test_speakers))
    return {
        "scenario": cfg.scenario,
        "mu_frames": cfg.mu_frames,
        "detection_window": cfg.detection_window,
        "words": cfg.words,
        "speakers": speakers,
        "commands": {
            word: {str(sp): world.render_command(word, sp) for sp in speakers}
            for word in cfg.words
        },
        "listen": {
            "sil": vocab.SIL,
            "noise_steady": [1, 2, 3, 4],
            "noise_burst": [5, 6, 7, 8],
            "vocab_size": vocab.V_LISTEN,
        },
        "tick_ms_options": [25, 50, 100, 200],
    }


# -- websocket transport ------------------------------------------------------


def build_app(model: DuplexModel, world: World) -> FastAPI:
    app = FastAPI()
    manifest = build_manifest(world)

    @app.get("/healthz", response_class=PlainTextResponse)
    def healthz() -> str:
        return "ok"

    @app.get("/manifest")
    def get_manifest() -> dict:
        return manifest

    @app.websocket("/session")
    async def session_ws(ws: WebSocket):
        await ws.accept()
        sess = ServerSession(model, world)
        ticker: Optional[asyncio.Task] = None
        send_lock = asyncio.Lock()

        async def send(msgs):
            for m in msgs:
                async with send_lock:
                    await ws.send_text(json.dumps(m))

        async def tick_loop():
            while not sess.done:
                await asyncio.sleep(sess.tick_ms / 1000)
                if not sess.done:
                    await send(sess.tick())

        try:
            while not sess.done:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    await send(
                        [{"type": "error", "code": "bad_message",
                          "message": "invalid JSON"}]
                    )
                    break
                try:
                    out = sess.handle(msg)
                except ProtocolError as e:
                    await send(
                        [{"type": "error", "code": e.code, "message": str(e)}]
                    )
                    break
                await send(out)
                if msg.get("type") == "start" and sess.mode == "realtime":
                    ticker = asyncio.create_task(tick_loop())
        except WebSocketDisconnect:
            pass
        finally:
            sess.done = True
            if ticker is not None:
                ticker.cancel()
            try:
                await ws.close()
            except Exception:
                pass

    return app


# -- tcp transport ------------------------------------------------------------


async def handle_tcp_connection(
    reader: asyncio.StreamReader,
    writer: asyncio.StreamWriter,
    model: DuplexModel,
    world: World,
):
    sess = ServerSession(model, world)
    ticker: Optional[asyncio.Task] = None
    lock = asyncio.Lock()

    async def send(msgs):
        for m in msgs:
            async with lock:
                writer.write((json.dumps(m) + "\n").encode())
                await writer.drain()

    async def tick_loop():
        while not sess.done:
            await asyncio.sleep(sess.tick_ms / 1000)
            if not sess.done:
                await send(sess.tick())

    try:
        while not sess.done:
            line = await reader.readline()
            if not line:
                break
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                await send(
                    [{"type": "error", "code": "bad_message",
                      "message": "invalid JSON"}]
                )
                break
            try:
                out = sess.handle(msg)
            except ProtocolError as e:
                await send([{"type": "error", "code": e.code, "message": str(e)}])
                break
            await send(out)
            if msg.get("type") == "start" and sess.mode == "realtime":
                ticker = asyncio.create_task(tick_loop())
    finally:
        sess.done = True
        if ticker is not None:
            ticker.cancel()
        writer.close()
        try:
            await writer.wait_closed()
        except Exception:
            pass


async def serve_tcp(model: DuplexModel, world: World, host: str, port: int):
    server = await asyncio.start_server(
        lambda r, w: handle_tcp_connection(r, w, model, world), host, port
    )
    async with server:
        await server.serve_forever()


def load_server(checkpoint_path, world_config: Optional[WorldConfig] = None):
    model = DuplexModel.load(checkpoint_path)
    world = World(world_config if world_config is not None else WorldConfig())
    return model, world
