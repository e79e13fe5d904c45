"""Vocabularies and token sequences.

Every vocabulary reserves the same four leading symbols: padding, beginning
of sequence, end of sequence, and unknown. Sequence payloads (corpus files,
hypotheses, references) never contain the padding symbol; a sequence flagged
complete carries exactly one end-of-sequence token, at its end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .util import DataError, UsageError, sha256_hex

PAD = 0
BOS = 1
EOS = 2
UNK = 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

# Sequence roles; used for sanity checks when wiring pipelines together.
ROLE_TRANSCRIPT = "transcript"
ROLE_ACOUSTIC = "acoustic"
ROLE_TRANSLATION = "translation"
ROLES = (ROLE_TRANSCRIPT, ROLE_ACOUSTIC, ROLE_TRANSLATION)


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token table. Index in `tokens` is the token id."""

    tokens: tuple[str, ...]
    _index: dict[str, int] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise UsageError(f"vocabulary must start with {RESERVED}")
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise UsageError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "_index", index)

    @classmethod
    def build(cls, symbols) -> "Vocabulary":
        """Vocabulary over `symbols` (non-reserved), reserved ids prepended."""
        return cls(tokens=RESERVED + tuple(symbols))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def content_ids(self) -> range:
        """Ids of the non-reserved tokens."""
        return range(4, len(self.tokens))

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise DataError(f"token {token!r} not in vocabulary") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise UsageError(f"token id {idx} out of range for |V|={len(self.tokens)}")
        return self.tokens[idx]

    def content_hash(self) -> str:
        """Stable hash of the token table, recorded in checkpoints."""
        return sha256_hex("\n".join(self.tokens).encode("utf-8"))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = tuple(line.rstrip("\n") for line in f)
        if len(tokens) < 4 or tuple(tokens[:4]) != RESERVED:
            raise DataError(f"{path}: not a vocabulary file (bad reserved prefix)")
        return cls(tokens=tokens)


@dataclass(frozen=True)
class TokenSequence:
    """A token-id sequence with a role tag.

    `ids` holds the payload tokens and, iff `complete`, one trailing EOS.
    The `body` property strips that EOS; metrics and file I/O operate on
    bodies, models consume/emit the EOS-terminated form.
    """

    ids: tuple[int, ...]
    role: str
    complete: bool = True

    def __post_init__(self):
        if self.role not in ROLES:
            raise UsageError(f"unknown sequence role {self.role!r}")
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if any(i == PAD for i in ids):
            raise UsageError("token sequence contains the padding symbol")
        if any(i == BOS for i in ids):
            raise UsageError("token sequence contains the BOS symbol")
        n_eos = sum(1 for i in ids if i == EOS)
        if self.complete:
            if n_eos != 1 or ids[-1] != EOS:
                raise UsageError("complete sequence must end with exactly one EOS")
        elif n_eos:
            raise UsageError("incomplete sequence must not contain EOS")

    @classmethod
    def from_body(cls, body, role: str, complete: bool = True) -> "TokenSequence":
        ids = tuple(int(i) for i in body)
        return cls(ids=ids + (EOS,) if complete else ids, role=role, complete=complete)

    @property
    def body(self) -> tuple[int, ...]:
        return self.ids[:-1] if self.complete else self.ids

    def __len__(self) -> int:
        return len(self.ids)

    def to_tokens(self, vocab: Vocabulary) -> list[str]:
        return [vocab.token_of(i) for i in self.body]

    @classmethod
    def from_tokens(cls, tokens, vocab: Vocabulary, role: str) -> "TokenSequence":
        return cls.from_body([vocab.id_of(t) for t in tokens], role=role)
