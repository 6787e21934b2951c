"""Byte-level tokenizer.

Token ids 0..255 are raw UTF-8 byte values; BOS is 256. No vocabulary assets,
fully deterministic, round-trips any UTF-8 string.
"""

from __future__ import annotations

BOS_ID = 256
NUM_SPECIAL_TOKENS = 1
BYTE_VOCAB = 256
MIN_VOCAB_SIZE = BYTE_VOCAB + NUM_SPECIAL_TOKENS


def tokenize(text: str) -> list[int]:
    """[BOS] followed by the UTF-8 bytes of the text."""
    return [BOS_ID] + list(text.encode("utf-8"))


def detokenize(ids: list[int]) -> str:
    """Inverse of tokenize: drops special ids, decodes the byte ids."""
    raw = bytes(i for i in ids if 0 <= i < BYTE_VOCAB)
    return raw.decode("utf-8", errors="replace")
