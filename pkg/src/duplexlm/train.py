"""Training loops: vanilla TTS pretraining, listener-encoder pretraining
(frame-classification proxy task), and full duplex-model training with
the scratch / frozen / finetune initialization matrix per channel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import vocab
from .model import DuplexModel, ModelConfig
from .optim import AdamW, clip_grad_norm
from .params import ParamStore, load_into, save_checkpoint
from .tensor import ContractError, Tensor, cross_entropy_with_logits, matmul
from .world import SampleRecord, World

SPEAK_INITS = ("scratch", "frozen", "finetune")
LISTEN_INITS = ("scratch", "frozen", "finetune")

# Encoder weights exported by listener pretraining; the projection (and the
# late-fusion head) always train from scratch inside the duplex model.
ENCODER_PREFIXES = ("listen.emb", "listen.conv")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_max: float = 5e-4
    warmup_steps: int = 500
    total_steps: Optional[int] = None   # defaults to epochs * steps_per_epoch
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    speaking_init: str = "scratch"
    listening_init: str = "scratch"
    speaking_checkpoint: Optional[str] = None
    listening_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.speaking_init not in SPEAK_INITS:
            raise ConfigError(f"speaking_init must be one of {SPEAK_INITS}")
        if self.listening_init not in LISTEN_INITS:
            raise ConfigError(f"listening_init must be one of {LISTEN_INITS}")
        if self.speaking_init != "scratch" and not self.speaking_checkpoint:
            raise ConfigError(
                f"speaking_init={self.speaking_init!r} requires speaking_checkpoint"
            )
        if self.listening_init != "scratch" and not self.listening_checkpoint:
            raise ConfigError(
                f"listening_init={self.listening_init!r} requires listening_checkpoint"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: float = math.inf

    def record_step(self, step: int, loss: float, lr: float):
        self.steps.append({"step": step, "loss": loss, "lr": lr})

    def record_epoch(self, epoch: int, val_loss: float) -> bool:
        self.epochs.append({"epoch": epoch, "val_loss": val_loss})
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.best_epoch = epoch
            return True
        return False

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for rec in self.steps:
                f.write(json.dumps({"kind": "step", **rec}) + "\n")
            for rec in self.epochs:
                f.write(json.dumps({"kind": "epoch", **rec}) + "\n")
            f.write(
                json.dumps(
                    {
                        "kind": "best",
                        "epoch": self.best_epoch,
                        "val_loss": self.best_val_loss,
                    }
                )
                + "\n"
            )


def lr_at(step: int, config: TrainConfig, total_steps: Optional[int] = None) -> float:
    """Linear warmup to lr_max, then cosine decay to zero."""
    total = total_steps if total_steps is not None else config.total_steps
    if total is None:
        raise ConfigError("total_steps not resolved")
    if not (0 <= step <= total):
        raise ContractError(f"step {step} outside [0, {total}]")
    if step < config.warmup_steps:
        return config.lr_max * step / config.warmup_steps
    if total == config.warmup_steps:
        return config.lr_max
    progress = (step - config.warmup_steps) / (total - config.warmup_steps)
    return config.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def _batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator):
    """Length-bucketed batches (less padding), seeded jitter + shuffled
    batch order for epoch-to-epoch variety."""
    lengths = np.asarray(lengths)
    order = np.lexsort((rng.random(len(lengths)), lengths))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    for i in rng.permutation(len(batches)):
        yield batches[i]


def _resolve_total_steps(cfg: TrainConfig, n_train: int) -> int:
    if cfg.total_steps is not None:
        return cfg.total_steps
    per_epoch = math.ceil(n_train / cfg.batch_size)
    return max(1, cfg.epochs * per_epoch)


def _snapshot(params: ParamStore) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


def _restore(params: ParamStore, snap: dict[str, np.ndarray]):
    for name, arr in snap.items():
        params[name].data[...] = arr


def pretrain_tts(
    config: TrainConfig,
    model_config: ModelConfig,
    world: World,
    train: Sequence[SampleRecord],
    val: Sequence[SampleRecord],
    out_path,
) -> tuple[DuplexModel, TrainLog]:
    """Vanilla TTS: backbone only; the checkpoint carries no listening
    parameters."""
    model = DuplexModel(model_config)
    trainable = model.speaking_params()
    opt = AdamW(trainable, lr=config.lr_max, weight_decay=config.weight_decay)
    log = TrainLog()
    total = _resolve_total_steps(config, len(train))
    rng = np.random.default_rng(config.seed)
    tts = [(vocab.encode_context(r.context), r.speak_target) for r in train]
    val_tts = [(vocab.encode_context(r.context), r.speak_target) for r in val]
    step = 0
    best = None
    for epoch in range(config.epochs):
        for idx in _batches([len(c) + len(s) for c, s in tts], config.batch_size, rng):
            batch = [tts[i] for i in idx]
            trainable.zero_grads()
            loss = model.tts_loss(batch) * (1.0 / len(batch))
            loss.backward()
            clip_grad_norm(trainable, config.grad_clip)
            opt.lr = lr_at(min(step, total), config, total)
            opt.step()
            log.record_step(step, loss.item(), opt.lr)
            step += 1
        val_loss = eval_tts_loss(model, val_tts)
        if log.record_epoch(epoch, val_loss):
            best = _snapshot(trainable)
    if best is not None:
        _restore(trainable, best)
    save_checkpoint(
        out_path,
        trainable,
        meta={**model.checkpoint_meta(), "trained": "tts", "train_config": config.to_dict()},
    )
    return model, log


def eval_tts_loss(model: DuplexModel, items) -> float:
    total = 0.0
    bs = 64
    for i in range(0, len(items), bs):
        total += model.tts_loss(items[i : i + bs]).item()
    return total / max(1, len(items))


def frame_classes(listen: Sequence[int]) -> np.ndarray:
    """Per-frame proxy labels: 0 silence, 1 noise, 2 command."""
    s = np.asarray(listen)
    cls = np.zeros(len(s), dtype=np.int64)
    cls[(s >= 1) & (s < vocab.CMD_LO)] = 1
    cls[s >= vocab.CMD_LO] = 2
    return cls


def pretrain_listener(
    config: TrainConfig,
    model_config: ModelConfig,
    train: Sequence[SampleRecord],
    val: Sequence[SampleRecord],
    out_path,
) -> tuple[DuplexModel, TrainLog, float]:
    """Frame-classification proxy task over listening streams; exports the
    encoder weights plus a throwaway classifier head. Returns held-out
    frame accuracy."""
    model = DuplexModel(model_config)
    trainable = ParamStore()
    for name, t in model.params.items():
        if name.startswith(ENCODER_PREFIXES):
            trainable.add(name, t)
    rng_init = np.random.default_rng(config.seed + 1)
    head_w = trainable.add(
        "probe.head.w",
        Tensor(
            rng_init.normal(0, 0.02, size=(model_config.d_enc, 3)).astype(np.float32),
            requires_grad=True,
        ),
    )
    head_b = trainable.add(
        "probe.head.b", Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    )
    opt = AdamW(trainable, lr=config.lr_max, weight_decay=config.weight_decay)
    log = TrainLog()
    total = _resolve_total_steps(config, len(train))
    rng = np.random.default_rng(config.seed)
    streams = [np.asarray(r.listen, dtype=np.int64) for r in train]
    step = 0

    def batch_loss(idx):
        T = max(len(streams[i]) for i in idx)
        sym = np.zeros((len(idx), T), dtype=np.int64)
        labels = np.zeros((len(idx), T), dtype=np.int64)
        mask = np.zeros((len(idx), T), dtype=bool)
        for b, i in enumerate(idx):
            s = streams[i]
            sym[b, : len(s)] = s
            labels[b, : len(s)] = frame_classes(s)
            mask[b, : len(s)] = True
        feats = model.encode_listen(sym)
        logits = matmul(feats, head_w) + head_b
        B, TT, V = logits.data.shape
        return (
            cross_entropy_with_logits(
                logits.reshape(B * TT, V), labels.reshape(-1), mask.reshape(-1)
            ),
            int(mask.sum()),
        )

    for epoch in range(config.epochs):
        for idx in _batches([len(s) for s in streams], config.batch_size, rng):
            trainable.zero_grads()
            loss, n = batch_loss(idx)
            loss = loss * (1.0 / n)
            loss.backward()
            clip_grad_norm(trainable, config.grad_clip)
            opt.lr = lr_at(min(step, total), config, total)
            opt.step()
            log.record_step(step, loss.item(), opt.lr)
            step += 1
        log.record_epoch(epoch, log.steps[-1]["loss"])

    # held-out frame accuracy
    correct = count = 0
    for r in val:
        s = np.asarray(r.listen, dtype=np.int64)
        feats = model.encode_listen(s)
        logits = feats.data @ head_w.data + head_b.data
        pred = logits.argmax(axis=-1)
        correct += int((pred == frame_classes(s)).sum())
        count += len(s)
    accuracy = correct / max(1, count)
    save_checkpoint(
        out_path,
        trainable,
        meta={
            **model.checkpoint_meta(),
            "trained": "listener",
            "frame_accuracy": accuracy,
            "train_config": config.to_dict(),
        },
    )
    return model, log, accuracy


def fdm_batch(world: World, records: Sequence[SampleRecord]):
    out = []
    for r in records:
        region, term = world.training_target(r)
        out.append((vocab.encode_context(r.context), region, r.listen, term))
    return out


def eval_fdm_loss(model: DuplexModel, world: World, records) -> float:
    total = 0.0
    bs = 64
    for i in range(0, len(records), bs):
        total += model.fdm_loss(fdm_batch(world, records[i : i + bs])).item()
    return total / max(1, len(records))


def train_lslm(
    config: TrainConfig,
    model_config: ModelConfig,
    world: World,
    train: Sequence[SampleRecord],
    val: Sequence[SampleRecord],
    out_path,
    log_path=None,
) -> tuple[DuplexModel, TrainLog]:
    """Duplex training with per-channel initialization modes.

    frozen modes exclude the group from the optimizer entirely; for the
    listening channel only the pretrained encoder weights freeze, the
    projection (and late-fusion head) always train.
    """
    model = DuplexModel(model_config)
    if config.speaking_init != "scratch":
        load_into(config.speaking_checkpoint, model.params, prefix="speak.")
    if config.listening_init != "scratch":
        for prefix in ENCODER_PREFIXES:
            load_into(config.listening_checkpoint, model.params, prefix=prefix)

    trainable = ParamStore()
    for name, t in model.params.items():
        if name.startswith("speak.") and config.speaking_init == "frozen":
            continue
        if name.startswith(ENCODER_PREFIXES) and config.listening_init == "frozen":
            continue
        trainable.add(name, t)

    opt = AdamW(trainable, lr=config.lr_max, weight_decay=config.weight_decay)
    log = TrainLog()
    total = _resolve_total_steps(config, len(train))
    rng = np.random.default_rng(config.seed)
    items = fdm_batch(world, train)
    step = 0
    best = None
    for epoch in range(config.epochs):
        for idx in _batches([len(c) + len(r) for c, r, _, _ in items], config.batch_size, rng):
            batch = [items[i] for i in idx]
            trainable.zero_grads()
            loss = model.fdm_loss(batch) * (1.0 / len(batch))
            loss.backward()
            clip_grad_norm(trainable, config.grad_clip)
            opt.lr = lr_at(min(step, total), config, total)
            opt.step()
            log.record_step(step, loss.item(), opt.lr)
            step += 1
        val_loss = eval_fdm_loss(model, world, val)
        if log.record_epoch(epoch, val_loss):
            best = _snapshot(model.params)
    if best is not None:
        _restore(model.params, best)
    model.save(out_path, extra_meta={"trained": "lslm", "train_config": config.to_dict()})
    if log_path is not None:
        log.write_jsonl(log_path)
    return model, log
