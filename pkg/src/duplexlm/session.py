"""Streaming duplex inference: KV-cached decoding, incremental listener
encoding, top-p sampling, and IRQ-probability tracing.

All math here is plain float32 numpy against a frozen model's parameter
arrays; many sessions may run concurrently over one shared model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import vocab
from .model import DuplexModel, LengthError
from .tensor import ContractError, softmax_lastdim_np


@dataclass
class SamplerConfig:
    top_p: float = 0.99
    temperature: float = 1.0
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if not (0 < self.top_p <= 1):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class Stop:
    reason: str  # "eos" | "irq" | "maxlen"
    step: int    # number of tokens generated when the session stopped


def nucleus_sample(
    probs: np.ndarray, top_p: float, rng: np.random.Generator
) -> int:
    """Sample from the smallest probability-sorted prefix with cumulative
    mass >= top_p (the top token is always in the support)."""
    order = np.argsort(-probs, kind="stable")
    sorted_p = probs[order]
    cum = np.cumsum(sorted_p)
    cutoff = int(np.searchsorted(cum, top_p)) + 1
    support = order[:cutoff]
    weights = probs[support] / probs[support].sum()
    return int(rng.choice(support, p=weights))


def _ln(x, g, b, eps=1e-5):
    mean = x.mean(dtype=x.dtype)
    c = x - mean
    var = (c * c).mean(dtype=x.dtype)
    return c / np.sqrt(var + eps) * g + b


def _gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


class _DecoderCache:
    """Incremental backbone evaluation over one growing sequence."""

    def __init__(self, model: DuplexModel):
        self.cfg = model.config
        self.p = {name: t.data for name, t in model.params.items()}
        cfg = self.cfg
        self.hd = cfg.d_model // cfg.n_heads
        cap = cfg.max_seq_len
        self.k_cache = [
            np.zeros((cap, cfg.n_heads, self.hd), dtype=np.float32)
            for _ in range(cfg.n_blocks)
        ]
        self.v_cache = [
            np.zeros((cap, cfg.n_heads, self.hd), dtype=np.float32)
            for _ in range(cfg.n_blocks)
        ]
        self.t = 0

    def step(self, input_id: int, listen_vec: Optional[np.ndarray]) -> np.ndarray:
        """Advance one position; returns logits at this position."""
        cfg = self.cfg
        p = self.p
        pos = self.t
        if pos >= cfg.max_seq_len:
            raise LengthError(f"sequence exceeds max_seq_len {cfg.max_seq_len}")
        x = p["speak.tok_emb"][input_id] + p["speak.pos_emb"][pos]
        if listen_vec is not None and cfg.fusion == "early":
            x = x + listen_vec
        H, hd = cfg.n_heads, self.hd
        for i in range(cfg.n_blocks):
            if listen_vec is not None and cfg.fusion == "middle":
                x = x + listen_vec
            pre = f"speak.block{i}"
            h = _ln(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            qkv = h @ p[f"{pre}.attn.wqkv"] + p[f"{pre}.attn.bqkv"]
            D = cfg.d_model
            q = qkv[:D].reshape(H, hd)
            self.k_cache[i][pos] = qkv[D : 2 * D].reshape(H, hd)
            self.v_cache[i][pos] = qkv[2 * D :].reshape(H, hd)
            K = self.k_cache[i][: pos + 1]
            V = self.v_cache[i][: pos + 1]
            scores = np.einsum("thd,hd->ht", K, q) / math.sqrt(hd)
            att = softmax_lastdim_np(scores)
            y = np.einsum("ht,thd->hd", att, V).reshape(D)
            x = x + (y @ p[f"{pre}.attn.wo"] + p[f"{pre}.attn.bo"])
            h2 = _ln(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            x = x + (
                _gelu(h2 @ p[f"{pre}.mlp.w1"] + p[f"{pre}.mlp.b1"]) @ p[f"{pre}.mlp.w2"]
                + p[f"{pre}.mlp.b2"]
            )
        x = _ln(x, p["speak.lnf.g"], p["speak.lnf.b"])
        logits = x @ p["speak.head.w"] + p["speak.head.b"]
        if listen_vec is not None and cfg.fusion == "late":
            logits = logits + (
                listen_vec @ p["listen.latehead.w"] + p["listen.latehead.b"]
            )
        self.t += 1
        return logits


class StreamingListener:
    """Incremental causal conv encoding; matches whole-stream encoding
    exactly at every frame."""

    def __init__(self, model: DuplexModel):
        self.cfg = model.config
        self.p = {name: t.data for name, t in model.params.items()}
        # layer 0 buffer holds embedded inputs; buffer i+1 holds conv i output
        self.bufs: list[np.ndarray] = [
            np.zeros((0, self.cfg.d_enc), dtype=np.float32)
            for _ in range(self.cfg.conv_depth + 1)
        ]
        self.n = 0

    def feed(self, symbols: Sequence[int]) -> np.ndarray:
        """Encode + project the new frames; returns [n_new, d_model]."""
        sym = np.asarray(symbols, dtype=np.int64)
        if sym.size and (sym.min() < 0 or sym.max() >= self.cfg.listen_vocab_size):
            raise IndexError(
                f"listen symbol out of range [0, {self.cfg.listen_vocab_size})"
            )
        if sym.size == 0:
            return np.zeros((0, self.cfg.d_model), dtype=np.float32)
        k = self.cfg.kernel_size
        new = self.p["listen.emb"][sym]
        self.bufs[0] = np.concatenate([self.bufs[0], new], axis=0)
        lo, hi = self.n, self.n + len(sym)
        for i in range(self.cfg.conv_depth):
            src = self.bufs[i]
            w = self.p[f"listen.conv{i}.w"]
            b = self.p[f"listen.conv{i}.b"]
            out = np.zeros((hi - lo, self.cfg.d_enc), dtype=np.float32)
            for t in range(lo, hi):
                acc = b.copy()
                for j in range(k):
                    s = t - (k - 1) + j
                    if s >= 0:
                        acc = acc + src[s] @ w[j]
                out[t - lo] = acc
            out = np.maximum(out, 0)
            self.bufs[i + 1] = np.concatenate([self.bufs[i + 1], out], axis=0)
        self.n = hi
        feats = self.bufs[-1][lo:hi]
        return feats @ self.p["listen.proj.w"] + self.p["listen.proj.b"]


class Session:
    """One live duplex generation. feed_listen() and step() must be
    serialized by the caller; the state is single-threaded."""

    def __init__(
        self,
        model: DuplexModel,
        context: str,
        sampler: SamplerConfig,
        max_len: Optional[int] = None,
        realtime: bool = False,
        vanilla: bool = False,
    ):
        self.model = model
        self.vanilla = vanilla
        self.context = context
        self.context_ids = vocab.encode_context(context)
        self.sampler = sampler
        self.max_len = max_len if max_len is not None else 3 * len(context) + 16
        self.realtime = realtime
        self.rng = np.random.default_rng(sampler.seed)
        self.tokens: list[int] = []
        self.irq_trace: list[float] = []
        self.stop: Optional[Stop] = None
        self.frames_fed = 0

        prefix = (
            [vocab.BOC + vocab.CTX_OFFSET]
            + [c + vocab.CTX_OFFSET for c in self.context_ids]
            + [vocab.EOC + vocab.CTX_OFFSET]
        )
        total = len(prefix) + 1 + self.max_len
        if total > model.config.max_seq_len:
            raise LengthError(
                f"context of {len(context)} chars needs up to {total} positions, "
                f"max_seq_len is {model.config.max_seq_len}"
            )
        self._decoder = _DecoderCache(model)
        self._listener = StreamingListener(model)
        self._listen_vecs = np.zeros((0, model.config.d_model), dtype=np.float32)
        for tok in prefix:
            self._decoder.step(tok, None)

    @property
    def steps(self) -> int:
        return len(self.tokens)

    def feed_listen(self, symbols: Sequence[int]):
        if self.stop is not None:
            raise ContractError("feed_listen on a stopped session")
        vecs = self._listener.feed(symbols)
        if len(vecs):
            self._listen_vecs = np.concatenate([self._listen_vecs, vecs], axis=0)
        self.frames_fed += len(vecs)

    def step(self) -> tuple[int, float]:
        """Generate one token; returns (token, P(IRQ) before filtering)."""
        if self.stop is not None:
            raise ContractError("step on a stopped session")
        t = self.steps  # producing token index t (0-based); needs frame t
        if self.vanilla:
            listen_vec = None
        else:
            if self.frames_fed <= t:
                if self.realtime:
                    self.feed_listen([vocab.SIL] * (t + 1 - self.frames_fed))
                else:
                    raise ContractError(
                        f"lockstep step {t + 1} needs {t + 1} frames, have {self.frames_fed}"
                    )
            listen_vec = self._listen_vecs[t]
        input_id = vocab.BOS if t == 0 else self.tokens[-1]
        logits = self._decoder.step(input_id, listen_vec)
        probs = softmax_lastdim_np(logits / np.float32(self.sampler.temperature))
        irq_p = float(probs[vocab.IRQ])
        self.irq_trace.append(irq_p)
        if self.sampler.greedy:
            token = int(np.argmax(probs))
        else:
            token = nucleus_sample(probs, self.sampler.top_p, self.rng)
        self.tokens.append(token)
        n = self.steps
        if token == vocab.EOS:
            self.stop = Stop("eos", n)
        elif token == vocab.IRQ:
            self.stop = Stop("irq", n)
        elif n >= self.max_len:
            self.stop = Stop("maxlen", n)
        return token, irq_p


def start(
    model: DuplexModel,
    context: str,
    sampler: SamplerConfig,
    max_len: Optional[int] = None,
    realtime: bool = False,
) -> Session:
    return Session(model, context, sampler, max_len=max_len, realtime=realtime)


def run_offline(
    model: DuplexModel,
    context: str,
    listen_stream: Sequence[int],
    sampler: SamplerConfig,
    max_len: Optional[int] = None,
    vanilla: bool = False,
) -> dict:
    """Lockstep loop: feed frame t-1, generate token t, until stop.

    Streams shorter than max_len are padded with SIL."""
    sess = Session(model, context, sampler, max_len=max_len, vanilla=vanilla)
    stream = list(listen_stream)
    while sess.stop is None:
        if not vanilla:
            t = sess.steps
            frame = stream[t] if t < len(stream) else vocab.SIL
            sess.feed_listen([frame])
        sess.step()
    return {
        "context": context,
        "tokens": sess.tokens,
        "stop": {"reason": sess.stop.reason, "step": sess.stop.step},
        "irq_trace": sess.irq_trace,
    }


def trace_export(result: dict, onset: Optional[int] = None) -> dict:
    """Fig-style trace record: per-step probability plus log10 values."""
    trace = result["irq_trace"]
    return {
        "context": result["context"],
        "tokens": result["tokens"],
        "stop": result["stop"],
        "onset": onset,
        "irq_trace": [
            {
                "step": i + 1,
                "probability": p,
                "log10_probability": math.log10(max(p, 1e-12)),
            }
            for i, p in enumerate(trace)
        ],
    }
