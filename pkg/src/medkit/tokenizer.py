"""Character-level vocabulary and sequence encoding.

Seven reserved ids are fixed forever: [PAD]=0, [UNK]=1, [CLS]=2, [SEP]=3,
[MASK]=4, [BOS]=5, [EOS]=6. Content characters start at id 7 and are ordered
by corpus frequency (descending), then code point, so rebuilding on the same
corpus reproduces the same assignment.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
MASK_ID = 4
BOS_ID = 5
EOS_ID = 6

RESERVED_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]"]
NUM_RESERVED = len(RESERVED_TOKENS)


class TokenizerError(ValueError):
    pass


def _normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text)


@dataclass
class Vocab:
    """Bijective token/id mapping over the reserved block plus content chars."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.id_to_token[:NUM_RESERVED] != RESERVED_TOKENS:
            raise TokenizerError("vocab must start with the reserved token block")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise TokenizerError("duplicate token in vocab")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, char: str) -> int:
        return self.token_to_id.get(char, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.id_to_token):
            raise TokenizerError(f"id {idx} out of vocab range")
        return self.id_to_token[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)


@dataclass
class TokenSequence:
    """Encoded ids plus a mask marking real (non-padding) positions."""

    ids: list[int]
    attention_mask: list[bool]
    original_length: int

    def __post_init__(self):
        if len(self.ids) != len(self.attention_mask):
            raise TokenizerError("ids and attention_mask lengths differ")

    @property
    def real_length(self) -> int:
        return sum(self.attention_mask)


def build_vocab(corpus_texts, min_freq: int = 1) -> Vocab:
    """Assign ids to every character whose corpus frequency is >= min_freq."""
    texts = list(corpus_texts)
    if not texts:
        raise TokenizerError("cannot build a vocab from an empty corpus")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(_normalize(text))
    kept = [ch for ch, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda ch: (-counts[ch], ch))
    return Vocab(RESERVED_TOKENS + kept)


def encode(text: str, vocab: Vocab, max_len: int, mode: str = "encoder") -> TokenSequence:
    """Encode text as [CLS] chars [SEP] (padded to max_len) or [BOS] chars [EOS].

    Characters beyond max_len - 2 are dropped; unknown characters map to [UNK].
    """
    if max_len < 3:
        raise TokenizerError("max_len must be at least 3")
    chars = list(_normalize(text))[: max_len - 2]
    body = [vocab.id_of(ch) for ch in chars]
    if mode == "encoder":
        ids = [CLS_ID] + body + [SEP_ID]
        mask = [True] * len(ids)
        pad = max_len - len(ids)
        ids += [PAD_ID] * pad
        mask += [False] * pad
    elif mode == "decoder":
        ids = [BOS_ID] + body + [EOS_ID]
        mask = [True] * len(ids)
    else:
        raise TokenizerError(f"unknown mode {mode!r}")
    return TokenSequence(ids=ids, attention_mask=mask, original_length=len(chars))


def decode(ids, vocab: Vocab) -> str:
    """Concatenate content tokens, skipping specials and stopping at [EOS]."""
    out: list[str] = []
    for idx in ids:
        idx = int(idx)
        if idx == EOS_ID:
            break
        if idx < NUM_RESERVED:
            if not 0 <= idx < vocab.size:
                raise TokenizerError(f"id {idx} out of vocab range")
            continue
        out.append(vocab.token_of(idx))
    return "".join(out)
