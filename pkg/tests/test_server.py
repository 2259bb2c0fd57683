import asyncio
import json
import math

import numpy as np
import pytest

from duplexlm import vocab
from duplexlm.model import DuplexModel, ModelConfig
from duplexlm.server import (
    ProtocolError,
    QUEUE_CAP,
    ServerSession,
    build_app,
    build_manifest,
    handle_tcp_connection,
)
from duplexlm.session import SamplerConfig, run_offline
from duplexlm.world import World, WorldConfig

TINY = dict(n_blocks=1, n_heads=2, d_model=16, d_ff=32, max_seq_len=96, d_enc=8)


@pytest.fixture(scope="module")
def model():
    return DuplexModel(ModelConfig(seed=0, **TINY))


@pytest.fixture(scope="module")
def world():
    return World(WorldConfig())


def run_lockstep_script(model, world, context, stream, seed):
    """Drive a ServerSession with one listen message per step."""
    sess = ServerSession(model, world)
    out = sess.handle({"type": "start", "context": context, "seed": seed,
                       "mode": "lockstep"})
    assert out[0]["type"] == "ready"
    tokens = []
    i = 0
    while not sess.done:
        frame = stream[i] if i < len(stream) else vocab.SIL
        msgs = sess.handle({"type": "listen", "symbols": [int(frame)]})
        tokens.extend(m for m in msgs if m["type"] == "token")
        i += 1
    done = msgs[-1]
    assert done["type"] == "done"
    return tokens, done, out[0]


def test_lockstep_matches_offline(model, world):
    rng = np.random.default_rng(0)
    for seed in range(3):
        ctx = "hello"
        stream = rng.integers(0, vocab.V_LISTEN, size=40).tolist()
        ref = run_offline(model, ctx, stream, SamplerConfig(seed=seed))
        tokens, done, ready = run_lockstep_script(model, world, ctx, stream, seed)
        assert [t["token"] for t in tokens] == ref["tokens"]
        assert [t["irq_p"] for t in tokens] == ref["irq_trace"]
        assert done["reason"] == ref["stop"]["reason"]
        assert done["step"] == ref["stop"]["step"]
        assert ready["max_len"] == 3 * len(ctx) + 16


def test_token_steps_increase_by_one(model, world):
    tokens, _, _ = run_lockstep_script(model, world, "abc", [], 0)
    assert [t["step"] for t in tokens] == list(range(1, len(tokens) + 1))
    assert all(
        t["irq_log10"] == pytest.approx(math.log10(max(t["irq_p"], 1e-12)))
        for t in tokens
    )


def test_session_isolation(model, world):
    """Interleaved sessions each match their own offline oracle."""
    ctxs = ["abc", "wxyz", "hi"]
    seeds = [3, 4, 5]
    sessions = []
    for ctx, seed in zip(ctxs, seeds):
        s = ServerSession(model, world)
        s.handle({"type": "start", "context": ctx, "seed": seed,
                  "mode": "lockstep"})
        sessions.append({"sess": s, "tokens": []})
    live = True
    while live:
        live = False
        for rec in sessions:
            if rec["sess"].done:
                continue
            live = True
            msgs = rec["sess"].handle({"type": "listen", "symbols": [0]})
            rec["tokens"].extend(m["token"] for m in msgs if m["type"] == "token")
    for rec, ctx, seed in zip(sessions, ctxs, seeds):
        ref = run_offline(model, ctx, [], SamplerConfig(seed=seed))
        assert rec["tokens"] == ref["tokens"]


def test_protocol_errors(model, world):
    sess = ServerSession(model, world)
    with pytest.raises(ProtocolError) as e:
        sess.handle({"type": "listen", "symbols": [0]})
    assert e.value.code == "bad_message"
    with pytest.raises(ProtocolError) as e:
        sess.handle({"type": "frobnicate"})
    assert e.value.code == "unknown_type"
    with pytest.raises(ProtocolError):
        sess.handle({"no": "type"})
    sess.handle({"type": "start", "context": "ab", "mode": "lockstep"})
    with pytest.raises(ProtocolError):
        sess.handle({"type": "start", "context": "cd"})
    with pytest.raises(ProtocolError):
        sess.handle({"type": "listen", "symbols": [vocab.V_LISTEN]})
    with pytest.raises(ProtocolError):
        sess.handle({"type": "listen", "symbols": "not a list"})


def test_bad_start_values(model, world):
    sess = ServerSession(model, world)
    with pytest.raises(ProtocolError):
        sess.handle({"type": "start"})  # missing context
    sess = ServerSession(model, world)
    with pytest.raises(ProtocolError):
        sess.handle({"type": "start", "context": "ab", "mode": "warp"})


def test_listen_after_done_ignored(model, world):
    sess = ServerSession(model, world)
    sess.handle({"type": "start", "context": "ab", "mode": "lockstep"})
    while not sess.done:
        sess.handle({"type": "listen", "symbols": [0]})
    assert sess.handle({"type": "listen", "symbols": [0]}) == []
    assert sess.ignored_after_done == 1


def test_client_stop(model, world):
    sess = ServerSession(model, world)
    sess.handle({"type": "start", "context": "abc", "mode": "lockstep"})
    sess.handle({"type": "listen", "symbols": [0]})
    out = sess.handle({"type": "stop"})
    assert out[0]["type"] == "done"
    assert out[0]["reason"] == "client_stop"
    assert out[0]["step"] == 1
    assert sess.done


def test_realtime_tick_and_silence_substitution(model, world):
    rt = ServerSession(model, world)
    rt.handle({"type": "start", "context": "ab", "mode": "realtime",
               "seed": 9})
    tokens = []
    while not rt.done:
        msgs = rt.tick()
        tokens.extend(m["token"] for m in msgs if m["type"] == "token")
    ref = run_offline(model, "ab", [], SamplerConfig(seed=9))
    assert tokens == ref["tokens"]  # starvation substitutes SIL frames


def test_realtime_fifo_order(model, world):
    rt = ServerSession(model, world)
    rt.handle({"type": "start", "context": "abcd", "mode": "realtime",
               "seed": 1})
    burst = [5, 6, 7, 8]
    rt.handle({"type": "listen", "symbols": burst})
    consumed = []
    for _ in range(6):
        if rt.done:
            break
        rt.tick()
        consumed.append(None)
    # frames consumed one per tick in FIFO order
    assert list(rt.queue) == burst[min(len(consumed), len(burst)):]


def test_realtime_queue_overflow_drops_oldest(model, world):
    rt = ServerSession(model, world)
    rt.handle({"type": "start", "context": "ab", "mode": "realtime"})
    rt.handle({"type": "listen", "symbols": list(range(1, 5)) * 20})  # 80 frames
    assert len(rt.queue) == QUEUE_CAP
    assert rt.dropped_frames == 80 - QUEUE_CAP
    while not rt.done:
        msgs = rt.tick()
    assert msgs[-1]["type"] == "done"
    assert msgs[-1]["dropped_frames"] == 80 - QUEUE_CAP


def test_latency_frames_with_tagged_command(model, world):
    sess = ServerSession(model, world)
    # force an IRQ stop so the done message carries latency
    m2 = DuplexModel(ModelConfig(seed=0, **TINY))
    m2.params["speak.head.b"].data[vocab.IRQ] = 100.0
    sess = ServerSession(m2, world)
    sess.handle({"type": "start", "context": "abc", "mode": "lockstep",
                 "greedy": True})
    cmd = world.render_command(world.config.words[0], 0)
    out = sess.handle({"type": "listen", "symbols": cmd[:1], "tag": "command"})
    done = out[-1]
    assert done["type"] == "done" and done["reason"] == "irq"
    assert done["latency_frames"] == done["step"] - 0


def test_manifest_contents(world):
    man = build_manifest(world)
    assert man["mu_frames"] == 4
    assert man["detection_window"] == 8
    assert man["words"]
    for word, by_speaker in man["commands"].items():
        for sp, symbols in by_speaker.items():
            assert len(symbols) == 8
            assert all(vocab.CMD_LO <= s <= vocab.CMD_HI for s in symbols)
    assert man["tick_ms_options"]


# -- websocket transport ------------------------------------------------------


def test_websocket_lockstep_and_endpoints(model, world):
    from fastapi.testclient import TestClient

    app = build_app(model, world)
    client = TestClient(app)
    assert client.get("/healthz").text == "ok"
    man = client.get("/manifest").json()
    assert man == build_manifest(world)

    ref = run_offline(model, "wxyz", [], SamplerConfig(seed=7))
    with client.websocket_connect("/session") as ws:
        ws.send_text(json.dumps({"type": "start", "context": "wxyz",
                                 "seed": 7, "mode": "lockstep"}))
        ready = json.loads(ws.receive_text())
        assert ready["type"] == "ready"
        tokens = []
        done = None
        while done is None:
            ws.send_text(json.dumps({"type": "listen", "symbols": [0]}))
            msg = json.loads(ws.receive_text())
            assert msg["type"] == "token"
            tokens.append(msg["token"])
            if msg["token"] in (vocab.EOS, vocab.IRQ) or msg["step"] == ready["max_len"]:
                done = json.loads(ws.receive_text())
        assert tokens == ref["tokens"]
        assert done["reason"] == ref["stop"]["reason"]


def test_websocket_malformed_message(model, world):
    from fastapi.testclient import TestClient

    app = build_app(model, world)
    client = TestClient(app)
    with client.websocket_connect("/session") as ws:
        ws.send_text(json.dumps({"type": "start", "context": "ab",
                                 "mode": "lockstep"}))
        json.loads(ws.receive_text())
        ws.send_text("this is not json")
        err = json.loads(ws.receive_text())
        assert err == {"type": "error", "code": "bad_message",
                       "message": "invalid JSON"}


# -- tcp transport ------------------------------------------------------------


def test_tcp_lockstep_matches_offline(model, world):
    async def scenario():
        server = await asyncio.start_server(
            lambda r, w: handle_tcp_connection(r, w, model, world),
            "127.0.0.1", 0,
        )
        port = server.sockets[0].getsockname()[1]
        async with server:
            reader, writer = await asyncio.open_connection("127.0.0.1", port)

            async def send(obj):
                writer.write((json.dumps(obj) + "\n").encode())
                await writer.drain()

            async def recv():
                return json.loads(await reader.readline())

            await send({"type": "start", "context": "hi", "seed": 2,
                        "mode": "lockstep"})
            ready = await recv()
            assert ready["type"] == "ready"
            tokens = []
            done = None
            while done is None:
                await send({"type": "listen", "symbols": [0]})
                msg = await recv()
                tokens.append(msg["token"])
                if msg["token"] in (vocab.EOS, vocab.IRQ) or msg["step"] == ready["max_len"]:
                    done = await recv()
            writer.close()
            return tokens, done

    tokens, done = asyncio.run(scenario())
    ref = run_offline(model, "hi", [], SamplerConfig(seed=2))
    assert tokens == ref["tokens"]
    assert done["reason"] == ref["stop"]["reason"]
