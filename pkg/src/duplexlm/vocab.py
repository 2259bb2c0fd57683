"""Vocabulary layouts for the speaking, context, and listening channels."""

from __future__ import annotations

# Speaking vocabulary (model output space)
N_AUDIO = 64          # discrete audio tokens 0..63
BOS = 64
EOS = 65
IRQ = 66
SPAD = 67
V_SPEAK = 68

# Context vocabulary (lowercase letters)
N_CHARS = 26          # 'a'..'z' -> 0..25
BOC = 26
EOC = 27
CPAD = 28
V_CTX = 29

# The backbone consumes one unified input id space: speak ids first,
# then context ids shifted by V_SPEAK. Sequence padding reuses SPAD.
CTX_OFFSET = V_SPEAK
V_INPUT = V_SPEAK + V_CTX
PAD_INPUT = SPAD

# Listening alphabet
SIL = 0
NOISE_STEADY = range(1, 5)    # low-frequency analog: one symbol held
NOISE_BURST = range(5, 9)     # high-frequency analog: rapid random symbols
CMD_LO = 9
CMD_HI = 40                   # inclusive; commands are closed under speaker permutation
V_LISTEN = 41

VOCAB_VERSION = 1

TERMINALS = (EOS, IRQ)


def encode_context(text: str) -> list[int]:
    """Map a lowercase a-z string to context ids. Raises on anything else."""
    ids = []
    for ch in text:
        o = ord(ch) - ord("a")
        if not 0 <= o < N_CHARS:
            raise ValueError(f"unsupported context character {ch!r} (need a-z)")
        ids.append(o)
    return ids


def decode_context(ids) -> str:
    return "".join(chr(ord("a") + i) if 0 <= i < N_CHARS else "?" for i in ids)
