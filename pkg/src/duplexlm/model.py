"""Decoder-only duplex token model.

A GPT-style backbone generates speaking tokens from a character context;
a causal convolutional listener encoder turns the listening-channel
symbol stream into per-frame features which join the backbone at one of
three fusion points (input embeddings, every block input, or output
logits). All fusion arithmetic is additive, so a zero listening pathway
reproduces the vanilla TTS forward exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import vocab
from .params import ParamStore
from .tensor import (
    ContractError,
    Tensor,
    concat,
    cross_entropy_with_logits,
    embedding,
    gelu,
    layer_norm,
    matmul,
    relu,
    softmax_lastdim,
)

FUSIONS = ("early", "middle", "late")


class LengthError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_blocks: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_seq_len: int = 256
    fusion: str = "middle"
    listen_vocab_size: int = vocab.V_LISTEN
    conv_depth: int = 3
    kernel_size: int = 3
    d_enc: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Layout:
    """One laid-out training/inference sequence.

    input_ids: unified-vocabulary ids [BOC ctx EOC BOS speak...]
    targets:   per-position next-token targets (speaking region only)
    mask:      True where targets contribute to the loss
    prefix_len: number of positions before the first speak input (BOS is
                the last prefix position; its prediction target is the
                first speaking token)
    """

    input_ids: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    prefix_len: int

    @property
    def n_steps(self) -> int:
        return int(self.mask.sum())


def layout_sequence(
    context_ids: Sequence[int],
    speak_tokens: Sequence[int],
    max_seq_len: int,
    terminal: int = vocab.EOS,
) -> Layout:
    ctx = list(context_ids)
    spk = list(speak_tokens)
    prefix = (
        [vocab.BOC + vocab.CTX_OFFSET]
        + [c + vocab.CTX_OFFSET for c in ctx]
        + [vocab.EOC + vocab.CTX_OFFSET]
        + [vocab.BOS]
    )
    ids = prefix + spk
    T = len(ids)
    if T > max_seq_len:
        raise LengthError(f"layout length {T} exceeds max_seq_len {max_seq_len}")
    targets = np.zeros(T, dtype=np.int64)
    mask = np.zeros(T, dtype=bool)
    p = len(prefix)
    region = spk + [terminal]
    targets[p - 1 : p - 1 + len(region)] = region
    mask[p - 1 : p - 1 + len(region)] = True
    return Layout(np.asarray(ids, dtype=np.int64), targets, mask, p)


def _gather_frames(sp: Tensor, idx: np.ndarray, valid: np.ndarray) -> Tensor:
    """out[b, t] = sp[b, idx[b, t]] where valid, else zeros. Differentiable."""
    B = sp.data.shape[0]
    bidx = np.arange(B)[:, None]
    out_data = sp.data[bidx, idx] * valid[..., None]

    def backward(g):
        gv = g * valid[..., None]
        full = np.zeros_like(sp.data)
        np.add.at(full, (np.broadcast_to(bidx, idx.shape), idx), gv)
        sp._accumulate(full)

    return Tensor._from_op(out_data.astype(sp.data.dtype), (sp,), backward)


class DuplexModel:
    def __init__(self, config: ModelConfig, init: bool = True):
        self.config = config
        self.params = ParamStore()
        self._mask_cache: dict[int, np.ndarray] = {}
        if init:
            self._init_params()

    # -- parameters -----------------------------------------------------------

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)

        def w(name, *shape):
            self.params.add(
                name,
                Tensor(
                    rng.normal(0.0, 0.02, size=shape).astype(np.float32),
                    requires_grad=True,
                ),
            )

        def zeros(name, *shape):
            self.params.add(
                name, Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
            )

        def ones(name, *shape):
            self.params.add(
                name, Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)
            )

        d, ff = cfg.d_model, cfg.d_ff
        w("speak.tok_emb", vocab.V_INPUT, d)
        w("speak.pos_emb", cfg.max_seq_len, d)
        for i in range(cfg.n_blocks):
            pre = f"speak.block{i}"
            ones(f"{pre}.ln1.g", d)
            zeros(f"{pre}.ln1.b", d)
            w(f"{pre}.attn.wqkv", d, 3 * d)
            zeros(f"{pre}.attn.bqkv", 3 * d)
            w(f"{pre}.attn.wo", d, d)
            zeros(f"{pre}.attn.bo", d)
            ones(f"{pre}.ln2.g", d)
            zeros(f"{pre}.ln2.b", d)
            w(f"{pre}.mlp.w1", d, ff)
            zeros(f"{pre}.mlp.b1", ff)
            w(f"{pre}.mlp.w2", ff, d)
            zeros(f"{pre}.mlp.b2", d)
        ones("speak.lnf.g", d)
        zeros("speak.lnf.b", d)
        w("speak.head.w", d, vocab.V_SPEAK)
        zeros("speak.head.b", vocab.V_SPEAK)

        # The listener stacks several conv layers; a fixed small init would
        # shrink activations geometrically with depth, starving the fusion
        # pathway of gradient. Fan-in scaling keeps feature magnitudes near
        # unit scale while the projection stays small so fusion starts as a
        # gentle perturbation of the speaking stream.
        de = cfg.d_enc

        def w_scaled(name, *shape, std):
            self.params.add(
                name,
                Tensor(
                    rng.normal(0.0, std, size=shape).astype(np.float32),
                    requires_grad=True,
                ),
            )

        w_scaled("listen.emb", cfg.listen_vocab_size, de, std=1.0)
        conv_std = math.sqrt(2.0 / (cfg.kernel_size * de))
        for i in range(cfg.conv_depth):
            w_scaled(f"listen.conv{i}.w", cfg.kernel_size, de, de, std=conv_std)
            zeros(f"listen.conv{i}.b", de)
        w("listen.proj.w", de, d)
        zeros("listen.proj.b", d)
        if cfg.fusion == "late":
            w("listen.latehead.w", d, vocab.V_SPEAK)
            zeros("listen.latehead.b", vocab.V_SPEAK)

    def speaking_params(self) -> ParamStore:
        return self.params.subset("speak.")

    def listening_params(self) -> ParamStore:
        return self.params.subset("listen.")

    @property
    def receptive_field(self) -> int:
        return 1 + self.config.conv_depth * (self.config.kernel_size - 1)

    # -- listener pathway -----------------------------------------------------

    def encode_listen(self, symbols) -> Tensor:
        """Causal conv features; accepts [T] or [B, T] symbol arrays."""
        sym = np.asarray(symbols, dtype=np.int64)
        squeeze = sym.ndim == 1
        if squeeze:
            sym = sym[None, :]
        if sym.size and (sym.min() < 0 or sym.max() >= self.config.listen_vocab_size):
            raise IndexError(
                f"listen symbol out of range [0, {self.config.listen_vocab_size})"
            )
        x = embedding(self.params["listen.emb"], sym)
        k = self.config.kernel_size
        B, T = sym.shape
        for i in range(self.config.conv_depth):
            wk = self.params[f"listen.conv{i}.w"]
            b = self.params[f"listen.conv{i}.b"]
            pad = Tensor(np.zeros((B, k - 1, self.config.d_enc), dtype=x.data.dtype))
            xp = concat([pad, x], axis=1)
            y = None
            for j in range(k):
                term = matmul(xp[:, j : j + T, :], wk[j])
                y = term if y is None else y + term
            x = relu(y + b)
        return x[0] if squeeze else x

    def project_listen(self, features: Tensor) -> Tensor:
        return matmul(features, self.params["listen.proj.w"]) + self.params[
            "listen.proj.b"
        ]

    def align_listen(self, projected: Tensor, layout: Layout) -> Tensor:
        """Place frame j at the sequence position whose target is step j+1.

        Context-prefix positions receive exact zero vectors. Surplus frames
        beyond the last prediction step are ignored.
        """
        T = len(layout.input_ids)
        n_pred = T - (layout.prefix_len - 1)
        if projected.data.shape[0] < n_pred:
            raise AlignmentError(
                f"listening stream provides {projected.data.shape[0]} frames, "
                f"layout needs {n_pred}"
            )
        sp = projected.reshape(1, *projected.data.shape)
        idx = np.zeros((1, T), dtype=np.int64)
        valid = np.zeros((1, T), dtype=bool)
        pos = np.arange(layout.prefix_len - 1, T)
        idx[0, pos] = pos - (layout.prefix_len - 1)
        valid[0, pos] = True
        return _gather_frames(sp, idx, valid)[0]

    # -- backbone -------------------------------------------------------------

    def _causal_mask(self, T: int) -> np.ndarray:
        m = self._mask_cache.get(T)
        if m is None:
            m = np.triu(np.full((T, T), -1e9, dtype=np.float32), k=1)
            self._mask_cache[T] = m[None, None]
        return self._mask_cache[T]

    def _attn(self, x: Tensor, i: int, mask: np.ndarray) -> Tensor:
        cfg = self.config
        B, T, D = x.data.shape
        H = cfg.n_heads
        hd = D // H
        qkv = matmul(x, self.params[f"speak.block{i}.attn.wqkv"]) + self.params[
            f"speak.block{i}.attn.bqkv"
        ]
        q = qkv[:, :, :D].reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        k = qkv[:, :, D : 2 * D].reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        v = qkv[:, :, 2 * D :].reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
        att = softmax_lastdim(scores + Tensor(mask))
        y = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return matmul(y, self.params[f"speak.block{i}.attn.wo"]) + self.params[
            f"speak.block{i}.attn.bo"
        ]

    def _mlp(self, x: Tensor, i: int) -> Tensor:
        h = gelu(
            matmul(x, self.params[f"speak.block{i}.mlp.w1"])
            + self.params[f"speak.block{i}.mlp.b1"]
        )
        return matmul(h, self.params[f"speak.block{i}.mlp.w2"]) + self.params[
            f"speak.block{i}.mlp.b2"
        ]

    def forward(self, input_ids, listen_aligned: Optional[Tensor] = None) -> Tensor:
        """Logits [B, T, V_speak]. listen_aligned is [B, T, d_model] or None
        (vanilla TTS mode: no listening parameters participate)."""
        ids = np.asarray(input_ids, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
            if listen_aligned is not None and listen_aligned.data.ndim == 2:
                listen_aligned = listen_aligned.reshape(1, *listen_aligned.data.shape)
        B, T = ids.shape
        if T > self.config.max_seq_len:
            raise LengthError(f"sequence length {T} exceeds {self.config.max_seq_len}")
        cfg = self.config
        x = embedding(self.params["speak.tok_emb"], ids) + self.params["speak.pos_emb"][
            :T
        ]
        if listen_aligned is not None and cfg.fusion == "early":
            x = x + listen_aligned
        mask = self._causal_mask(T)
        for i in range(cfg.n_blocks):
            if listen_aligned is not None and cfg.fusion == "middle":
                x = x + listen_aligned
            x = x + self._attn(layer_norm(x, self.params[f"speak.block{i}.ln1.g"], self.params[f"speak.block{i}.ln1.b"]), i, mask)
            x = x + self._mlp(layer_norm(x, self.params[f"speak.block{i}.ln2.g"], self.params[f"speak.block{i}.ln2.b"]), i)
        x = layer_norm(x, self.params["speak.lnf.g"], self.params["speak.lnf.b"])
        logits = matmul(x, self.params["speak.head.w"]) + self.params["speak.head.b"]
        if listen_aligned is not None and cfg.fusion == "late":
            logits = logits + (
                matmul(listen_aligned, self.params["listen.latehead.w"])
                + self.params["listen.latehead.b"]
            )
        return logits[0] if squeeze else logits

    # -- losses ---------------------------------------------------------------

    def _batch_layouts(
        self, items: Sequence[tuple[Sequence[int], Sequence[int], int]]
    ) -> tuple[list[Layout], np.ndarray, np.ndarray, np.ndarray]:
        layouts = [
            layout_sequence(ctx, spk, self.config.max_seq_len, terminal=term)
            for ctx, spk, term in items
        ]
        T = max(len(l.input_ids) for l in layouts)
        B = len(layouts)
        ids = np.full((B, T), vocab.PAD_INPUT, dtype=np.int64)
        targets = np.zeros((B, T), dtype=np.int64)
        mask = np.zeros((B, T), dtype=bool)
        for b, l in enumerate(layouts):
            n = len(l.input_ids)
            ids[b, :n] = l.input_ids
            targets[b, :n] = l.targets
            mask[b, :n] = l.mask
        return layouts, ids, targets, mask

    def _masked_ce(self, logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
        B, T, V = logits.data.shape
        flat = logits.reshape(B * T, V)
        return cross_entropy_with_logits(
            flat, targets.reshape(-1), mask.reshape(-1)
        )

    def tts_loss(
        self, batch: Sequence[tuple[Sequence[int], Sequence[int]]]
    ) -> Tensor:
        """Summed NLL over speaking regions (through EOS), vanilla mode.

        batch items: (context_ids, speak_tokens) without terminal.
        """
        items = [(ctx, spk, vocab.EOS) for ctx, spk in batch]
        _, ids, targets, mask = self._batch_layouts(items)
        logits = self.forward(ids)
        return self._masked_ce(logits, targets, mask)

    def fdm_loss(
        self,
        batch: Sequence[
            tuple[Sequence[int], Sequence[int], Sequence[int], int]
        ],
    ) -> Tensor:
        """Summed NLL with the listening channel fused in.

        batch items: (context_ids, speak_region_tokens, listen_symbols,
        terminal). For interrupted samples speak_region_tokens are already
        truncated at onset + mu and terminal is IRQ; otherwise terminal is
        EOS. The loss has exactly len(speak_region_tokens) + 1 terms per
        sample.
        """
        items = [(ctx, spk, term) for ctx, spk, _, term in batch]
        layouts, ids, targets, mask = self._batch_layouts(items)
        B, T = ids.shape
        streams = [np.asarray(s, dtype=np.int64) for _, _, s, _ in batch]
        for l, s in zip(layouts, streams):
            n_pred = len(l.input_ids) - (l.prefix_len - 1)
            if len(s) < n_pred:
                raise AlignmentError(
                    f"listen stream length {len(s)} < required {n_pred} frames"
                )
        TL = max(len(s) for s in streams)
        sym = np.zeros((B, TL), dtype=np.int64)
        for b, s in enumerate(streams):
            sym[b, : len(s)] = s
        feats = self.encode_listen(sym)
        sp = self.project_listen(feats)
        idx = np.zeros((B, T), dtype=np.int64)
        valid = np.zeros((B, T), dtype=bool)
        for b, l in enumerate(layouts):
            n = len(l.input_ids)
            pos = np.arange(l.prefix_len - 1, n)
            idx[b, pos] = pos - (l.prefix_len - 1)
            valid[b, pos] = True
        aligned = _gather_frames(sp, idx, valid)
        logits = self.forward(ids, aligned)
        return self._masked_ce(logits, targets, mask)

    # -- persistence ----------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {
            "model_config": self.config.to_dict(),
            "fusion": self.config.fusion,
            "vocab_version": vocab.VOCAB_VERSION,
            "param_groups": {
                "speaking": self.speaking_params().names(),
                "listening": self.listening_params().names(),
            },
        }

    def save(self, path, extra_meta: Optional[dict] = None):
        from .params import save_checkpoint

        meta = self.checkpoint_meta()
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "DuplexModel":
        from .params import load_checkpoint

        params, meta = load_checkpoint(path)
        cfg = ModelConfig.from_dict(meta["model_config"])
        model = cls(cfg, init=True)
        for name, t in params.items():
            model.params[name].data[...] = t.data
        return model
