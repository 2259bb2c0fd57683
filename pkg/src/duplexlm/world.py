"""Deterministic synthetic token world standing in for real speech.

The speaking side is an invertible codebook: each lowercase letter maps
to a fixed 3-gram of audio tokens, so a decoded transcript can be scored
against the source text exactly. The listening side is a symbol stream
of silence, two noise families, and speaker-perturbed command words; an
interruption is a command word overwriting 8 frames at a sampled onset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import vocab

PLACEHOLDER = "?"
COMMAND_LEN = 8

# Label names for the 30-word voice lexicon and the single command word.
COMMAND_WORD = "honey"
VOICE_WORDS = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "bed", "bird", "cat", "dog", "happy", "house", "marvin",
    "sheila", "tree", "wow",
]


class WorldError(ValueError):
    pass


@dataclass
class Codebook:
    k: int
    table: dict[str, tuple[int, ...]]
    inverse: dict[tuple[int, ...], str]

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for ch in text:
            if ch not in self.table:
                raise WorldError(f"unsupported character {ch!r}")
            out.extend(self.table[ch])
        return out

    def decode(self, tokens: Sequence[int]) -> tuple[str, int]:
        """Greedy k-gram inversion; unmatched k-grams (or a trailing
        remainder) emit a placeholder and bump the count."""
        chars = []
        unmatched = 0
        toks = list(tokens)
        for i in range(0, len(toks) - len(toks) % self.k, self.k):
            gram = tuple(toks[i : i + self.k])
            ch = self.inverse.get(gram)
            if ch is None:
                chars.append(PLACEHOLDER)
                unmatched += 1
            else:
                chars.append(ch)
        if len(toks) % self.k:
            chars.append(PLACEHOLDER)
            unmatched += 1
        return "".join(chars), unmatched


def build_codebook(seed: int, k: int = 3) -> Codebook:
    rng = np.random.default_rng(seed)
    table: dict[str, tuple[int, ...]] = {}
    used: set[tuple[int, ...]] = set()
    for i in range(vocab.N_CHARS):
        while True:
            gram = tuple(int(x) for x in rng.integers(0, vocab.N_AUDIO, size=k))
            if gram not in used:
                used.add(gram)
                break
        table[chr(ord("a") + i)] = gram
    inverse = {gram: ch for ch, gram in table.items()}
    return Codebook(k=k, table=table, inverse=inverse)


def synth_target(codebook: Codebook, context: str) -> list[int]:
    return codebook.encode(context)


def invert_tokens(codebook: Codebook, tokens: Sequence[int]) -> tuple[str, int]:
    return codebook.decode(tokens)


@dataclass
class CommandLexicon:
    words: dict[str, tuple[int, ...]]

    def render(self, word: str, perm: np.ndarray) -> list[int]:
        if word not in self.words:
            raise WorldError(f"unknown command word {word!r}")
        return [int(perm[s]) for s in self.words[word]]


def build_lexicon(seed: int, words: Sequence[str]) -> CommandLexicon:
    rng = np.random.default_rng(seed)
    table: dict[str, tuple[int, ...]] = {}
    used: set[tuple[int, ...]] = set()
    for w in words:
        while True:
            seq = tuple(
                int(x) for x in rng.integers(vocab.CMD_LO, vocab.CMD_HI + 1, size=COMMAND_LEN)
            )
            if seq not in used:
                used.add(seq)
                break
        table[w] = seq
    return CommandLexicon(table)


def speaker_permutation(seed: int, speaker: int) -> np.ndarray:
    """Bijection on the command symbol range, identity elsewhere."""
    rng = np.random.default_rng((seed, speaker, 0x5EAD))
    perm = np.arange(vocab.V_LISTEN)
    cmd = np.arange(vocab.CMD_LO, vocab.CMD_HI + 1)
    perm[vocab.CMD_LO : vocab.CMD_HI + 1] = rng.permutation(cmd)
    return perm


def render_command(
    lexicon: CommandLexicon, word: str, speaker: int, seed: int
) -> list[int]:
    if speaker < 0:
        raise WorldError(f"invalid speaker id {speaker}")
    return lexicon.render(word, speaker_permutation(seed, speaker))


def add_noise_spans(stream: np.ndarray, rng: np.random.Generator):
    n_spans = int(rng.integers(1, 4))
    T = len(stream)
    for _ in range(n_spans):
        if rng.random() < 0.5:
            length = int(rng.integers(4, 13))
            sym = int(rng.integers(1, 5))
            start = int(rng.integers(0, max(1, T - length + 1)))
            stream[start : start + length] = sym
        else:
            length = int(rng.integers(2, 7))
            start = int(rng.integers(0, max(1, T - length + 1)))
            stream[start : start + length] = rng.integers(5, 9, size=min(length, T - start))


def make_listen_stream(
    length: int,
    noise: bool,
    command: Optional[Sequence[int]],
    onset: Optional[int],
    rng: np.random.Generator,
) -> np.ndarray:
    """SIL base, optional noise spans, optional command overwrite at onset.

    The command dominates noise on overlapping frames."""
    if command is not None:
        if onset is None or onset < 0 or onset + COMMAND_LEN > length:
            raise WorldError(
                f"command at onset {onset} does not fit stream length {length}"
            )
    stream = np.full(length, vocab.SIL, dtype=np.int64)
    if noise:
        add_noise_spans(stream, rng)
    if command is not None:
        stream[onset : onset + COMMAND_LEN] = command
    return stream


def label_with_irq(speak_target: Sequence[int], onset: int, mu_frames: int) -> list[int]:
    """Training target for an interrupted sample: keep the first
    onset + mu speaking tokens, then IRQ, nothing after."""
    if onset is None:
        raise WorldError("label_with_irq requires an interruption onset")
    cut = onset + mu_frames
    if cut > len(speak_target):
        raise WorldError(
            f"onset {onset} + mu {mu_frames} exceeds target length {len(speak_target)}"
        )
    return list(speak_target[:cut]) + [vocab.IRQ]


@dataclass
class SampleRecord:
    context: str
    speak_target: list[int]
    listen: list[int]
    onset: Optional[int]
    noise: bool
    split: str
    speaker: Optional[int]
    word: Optional[str] = None

    @property
    def interrupted(self) -> bool:
        return self.onset is not None

    def to_json(self) -> str:
        return json.dumps(
            {
                "context": self.context,
                "speak_target": self.speak_target,
                "listen": self.listen,
                "onset": self.onset,
                "noise": self.noise,
                "split": self.split,
                "speaker": self.speaker,
                "word": self.word,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        d = json.loads(line)
        return cls(**d)


@dataclass
class WorldConfig:
    scenario: str = "command"          # "command" | "voice"
    mu_frames: int = 4
    k: int = 3
    noise_prob: float = 0.5
    interrupt_prob: float = 0.5
    ctx_len_min: int = 5
    ctx_len_max: int = 12
    train_size: int = 6000
    val_size: int = 500
    tts_test_size: int = 500
    interactive_per_class: int = 500
    listen_margin: int = 16
    master_seed: int = 0

    def __post_init__(self):
        if self.scenario not in ("command", "voice"):
            raise WorldError(f"unknown scenario {self.scenario!r}")
        # shortest speak target must fit onset + 2*mu so every interruption is scoreable
        if self.ctx_len_min * self.k < 2 * self.mu_frames:
            raise WorldError("context length range too short for scoreable interruptions")

    @property
    def detection_window(self) -> int:
        return 2 * self.mu_frames

    @property
    def train_speakers(self) -> list[int]:
        if self.scenario == "command":
            return list(range(22))
        return list(range(40))

    @property
    def test_speakers(self) -> list[int]:
        if self.scenario == "command":
            return list(range(22))
        return list(range(40, 50))

    @property
    def words(self) -> list[str]:
        if self.scenario == "command":
            return [COMMAND_WORD]
        return list(VOICE_WORDS)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(**d)


class World:
    """Bundles the codebook, lexicon, and speaker setup for one config."""

    def __init__(self, config: WorldConfig):
        self.config = config
        self.codebook = build_codebook(config.master_seed, k=config.k)
        self.lexicon = build_lexicon(
            np.random.SeedSequence([config.master_seed, 0xC0DE]).generate_state(1)[0],
            config.words,
        )
        self._perm_seed = config.master_seed

    def render_command(self, word: str, speaker: int) -> list[int]:
        return render_command(self.lexicon, word, speaker, self._perm_seed)

    def _sample_rng(self, tag: int, index: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.config.master_seed, tag, index])
        )

    def _random_context(self, rng: np.random.Generator) -> str:
        n = int(rng.integers(self.config.ctx_len_min, self.config.ctx_len_max + 1))
        return "".join(chr(ord("a") + int(c)) for c in rng.integers(0, 26, size=n))

    def make_sample(
        self,
        tag: int,
        index: int,
        split: str,
        speakers: Sequence[int],
        force_interrupted: Optional[bool] = None,
        force_noise: Optional[bool] = None,
    ) -> SampleRecord:
        cfg = self.config
        rng = self._sample_rng(tag, index)
        context = self._random_context(rng)
        speak = self.codebook.encode(context)
        noise = (
            bool(rng.random() < cfg.noise_prob)
            if force_noise is None
            else force_noise
        )
        interrupted = (
            bool(rng.random() < cfg.interrupt_prob)
            if force_interrupted is None
            else force_interrupted
        )
        length = len(speak) + cfg.listen_margin
        word = speaker = onset = command = None
        if interrupted:
            onset_max = len(speak) - cfg.detection_window
            onset = int(rng.integers(0, onset_max + 1))
            word = cfg.words[int(rng.integers(0, len(cfg.words)))]
            speaker = int(speakers[int(rng.integers(0, len(speakers)))])
            command = self.render_command(word, speaker)
        stream = make_listen_stream(length, noise, command, onset, rng)
        if not interrupted:
            self._assert_no_command(stream, speakers)
        return SampleRecord(
            context=context,
            speak_target=speak,
            listen=[int(s) for s in stream],
            onset=onset,
            noise=noise,
            split=split,
            speaker=speaker,
            word=word,
        )

    def _assert_no_command(self, stream: np.ndarray, speakers: Sequence[int]):
        """No 8-frame window may match any perturbed command word."""
        rendered = {
            tuple(self.render_command(w, s))
            for w in self.config.words
            for s in speakers
        }
        for i in range(len(stream) - COMMAND_LEN + 1):
            win = tuple(int(x) for x in stream[i : i + COMMAND_LEN])
            if win in rendered:
                raise WorldError(f"accidental command window at frame {i}")

    def training_target(self, rec: SampleRecord) -> tuple[list[int], int]:
        """(speak-region tokens, terminal id) honoring interruption labels."""
        if rec.interrupted:
            labeled = label_with_irq(
                rec.speak_target, rec.onset, self.config.mu_frames
            )
            return labeled[:-1], vocab.IRQ
        return list(rec.speak_target), vocab.EOS


# Tags keep per-split RNG streams independent of split sizes.
_TAGS = {
    "train": 1,
    "val": 2,
    "test_tts": 3,
    "test_interactive": 4,
}


def make_dataset(config: WorldConfig) -> dict[str, list[SampleRecord]]:
    """Deterministic splits per the scenario.

    test_tts has no interruptions and all-SIL listening. The interactive
    test is paired: test_clean (no noise) and test_noise (noise spans on
    every stream) share contexts, onsets, words, and speakers.
    """
    world = World(config)
    cfg = config
    splits: dict[str, list[SampleRecord]] = {}
    splits["train"] = [
        world.make_sample(_TAGS["train"], i, "train", cfg.train_speakers)
        for i in range(cfg.train_size)
    ]
    splits["val"] = [
        world.make_sample(_TAGS["val"], i, "val", cfg.train_speakers)
        for i in range(cfg.val_size)
    ]
    splits["test_tts"] = [
        world.make_sample(
            _TAGS["test_tts"], i, "test_tts", cfg.test_speakers,
            force_interrupted=False, force_noise=False,
        )
        for i in range(cfg.tts_test_size)
    ]
    clean: list[SampleRecord] = []
    noise: list[SampleRecord] = []
    n = cfg.interactive_per_class
    for i in range(2 * n):
        interrupted = i < n
        base = world.make_sample(
            _TAGS["test_interactive"], i, "test_clean", cfg.test_speakers,
            force_interrupted=interrupted, force_noise=False,
        )
        clean.append(base)
        noisy_rng = world._sample_rng(_TAGS["test_interactive"] + 1000, i)
        command = (
            world.render_command(base.word, base.speaker) if interrupted else None
        )
        stream = make_listen_stream(
            len(base.listen), True, command, base.onset, noisy_rng
        )
        if not interrupted:
            world._assert_no_command(stream, cfg.test_speakers)
        noise.append(
            SampleRecord(
                context=base.context,
                speak_target=base.speak_target,
                listen=[int(s) for s in stream],
                onset=base.onset,
                noise=True,
                split="test_noise",
                speaker=base.speaker,
                word=base.word,
            )
        )
    splits["test_clean"] = clean
    splits["test_noise"] = noise
    return splits


def write_dataset(out_dir, config: WorldConfig) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = make_dataset(config)
    counts = {}
    for name, records in splits.items():
        path = out / f"{name}.jsonl"
        with open(path, "w") as f:
            for rec in records:
                f.write(rec.to_json() + "\n")
        counts[name] = len(records)
    manifest = {
        "world_config": config.to_dict(),
        "seed": config.master_seed,
        "counts": counts,
        "train_speakers": config.train_speakers,
        "test_speakers": config.test_speakers,
        "words": config.words,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def read_split(data_dir, name: str) -> list[SampleRecord]:
    path = Path(data_dir) / f"{name}.jsonl"
    with open(path) as f:
        return [SampleRecord.from_json(line) for line in f if line.strip()]
