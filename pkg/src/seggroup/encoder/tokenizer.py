"""Deterministic hashing word tokenizer.

Words map to fixed ids via a stable 32-bit blake2s digest, so tokenization is
identical across processes and machines without a fitted vocabulary file.
"""

from __future__ import annotations

import hashlib
import re

from ..errors import DataError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
NUM_SPECIAL = 3

_WORD_RE = re.compile(r"[a-z0-9]+")


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def word_id(word: str, vocab_size: int) -> int:
    digest = hashlib.blake2s(word.encode("utf-8"), digest_size=4).digest()
    return NUM_SPECIAL + int.from_bytes(digest, "little") % (vocab_size - NUM_SPECIAL)


def encode(text: str, vocab_size: int, context_len: int) -> tuple[list[int], bool]:
    """Text -> ``[BOS, w0, ..., EOS]`` ids, truncated to ``context_len``.

    Returns ``(ids, truncated)``; raises on text with no tokens.
    """
    toks = words(text)
    if not toks:
        raise DataError(f"text {text!r} contains no tokens")
    ids = [BOS_ID] + [word_id(w, vocab_size) for w in toks] + [EOS_ID]
    truncated = len(ids) > context_len
    if truncated:
        ids = ids[: context_len - 1] + [EOS_ID]
    return ids, truncated
