"""Synthetic speech-translation task: corpus generation, rendering, noise.

An example is built in three layers:

  transcript x_s   tokens from the source vocabulary, uniform lengths;
  translation y    deterministic transduction of x_s through a token-mapping
                   table (some source tokens emit two target tokens, and one
                   designated trigger token swaps the two target tokens that
                   follow it);
  acoustic x_a     each source token replaced by a sampled multi-token
                   rendering from an acoustic lexicon.

The lexicon deliberately contains homophones: groups of source tokens that
share one acoustic rendering. Those positions cannot be resolved from x_a
alone, which gives a recognizer trained on (x_a, x_s) an irreducible error
rate and gives translation models trained on (x_a, y) a reason to make
mistakes at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .util import DataError, UsageError, make_rng, stable_hash64
from .vocab import (
    EOS,
    ROLE_ACOUSTIC,
    ROLE_TRANSCRIPT,
    ROLE_TRANSLATION,
    TokenSequence,
    Vocabulary,
)


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of the synthetic transduction task.

    `mapping[i]` lists the target tokens emitted for source content token
    `4 + i` (ids below 4 are reserved). Every entry has one or two tokens.
    `trigger` is the id of the source token that swaps the two target tokens
    emitted after its own mapping.
    """

    n_source: int
    n_target: int
    mapping: tuple[tuple[int, ...], ...]
    trigger: int
    min_len: int
    max_len: int
    seed: int

    def __post_init__(self):
        if self.n_source < 2 or self.n_target < 2:
            raise UsageError("need at least two source and two target tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise UsageError(f"bad length range [{self.min_len}, {self.max_len}]")
        if len(self.mapping) != self.n_source:
            raise UsageError("mapping table must cover every source token")
        for tgts in self.mapping:
            if not 1 <= len(tgts) <= 2:
                raise UsageError("each source token must map to 1 or 2 target tokens")
            for t in tgts:
                if not 4 <= t < 4 + self.n_target:
                    raise UsageError(f"mapped target id {t} out of range")
        if not 4 <= self.trigger < 4 + self.n_source:
            raise UsageError(f"trigger id {self.trigger} is not a source content token")

    @classmethod
    def generate(
        cls,
        seed: int,
        n_source: int = 64,
        n_target: int = 72,
        min_len: int = 3,
        max_len: int = 12,
        fertility2_fraction: float = 0.25,
    ) -> "TaskSpec":
        """Draw a random mapping table and trigger token."""
        if not 0.0 <= fertility2_fraction <= 1.0:
            raise UsageError("fertility2_fraction must lie in [0, 1]")
        rng = make_rng(seed, "task-spec")
        n_fert2 = round(fertility2_fraction * n_source)
        fert2 = set(rng.permutation(n_source)[:n_fert2].tolist())
        mapping = []
        for i in range(n_source):
            k = 2 if i in fert2 else 1
            mapping.append(tuple(int(4 + t) for t in rng.integers(0, n_target, size=k)))
        trigger = int(4 + rng.integers(0, n_source))
        return cls(
            n_source=n_source,
            n_target=n_target,
            mapping=tuple(mapping),
            trigger=trigger,
            min_len=min_len,
            max_len=max_len,
            seed=seed,
        )

    def source_vocabulary(self) -> Vocabulary:
        return Vocabulary.build(f"s{i:02d}" for i in range(self.n_source))

    def target_vocabulary(self) -> Vocabulary:
        return Vocabulary.build(f"t{i:02d}" for i in range(self.n_target))


def apply_mapping(spec: TaskSpec, source_body) -> tuple[int, ...]:
    """Transduce a transcript body into the reference translation body.

    Source tokens emit their mapped target tokens left to right. After each
    occurrence of the trigger token (and after its own mapped tokens), the
    next two emitted target tokens are swapped; occurrences are processed
    left to right, and a swap with fewer than two following tokens is a no-op.
    """
    out: list[int] = []
    swap_at: list[int] = []
    for s in source_body:
        if not 4 <= s < 4 + spec.n_source:
            raise UsageError(f"source id {s} out of range for the task")
        out.extend(spec.mapping[s - 4])
        if s == spec.trigger:
            swap_at.append(len(out))
    for pos in swap_at:
        if pos + 1 < len(out):
            out[pos], out[pos + 1] = out[pos + 1], out[pos]
    return tuple(out)


@dataclass
class ParallelExample:
    """One corpus line. `x_hat_s` caches a recognizer transcript when set."""

    index: int
    x_s: TokenSequence
    x_a: TokenSequence
    y: TokenSequence
    x_hat_s: TokenSequence | None = None


# --- acoustic lexicon -------------------------------------------------------

# source content id -> list of renderings; each rendering is 2-4 acoustic
# content ids. Repeated entries act as sampling weights in render_acoustic.
AcousticLexicon = dict[int, list[tuple[int, ...]]]

MIN_RENDER = 2
MAX_RENDER = 4


def acoustic_vocabulary(n_acoustic: int = 48) -> Vocabulary:
    return Vocabulary.build(f"a{i:02d}" for i in range(n_acoustic))


def build_acoustic_lexicon(
    spec: TaskSpec,
    n_acoustic: int = 48,
    homophone_fraction: float = 0.5,
    shared_weight: int = 4,
) -> AcousticLexicon:
    """Derive the rendering table from the task seed.

    A `homophone_fraction` of source tokens is grouped into pairs that share
    one rendering; each member also keeps a unique rendering. The shared
    rendering is repeated `shared_weight` times so it is sampled with
    probability shared_weight / (shared_weight + 1). Unpaired tokens get one
    or two unique renderings. Pairs preferentially join a two-target-token
    source with a one-target-token source, so a misrecognized homophone also
    desynchronizes the output length.
    """
    if not 0.0 <= homophone_fraction <= 1.0:
        raise UsageError("homophone_fraction must lie in [0, 1]")
    if shared_weight < 1:
        raise UsageError("shared_weight must be >= 1")
    rng = make_rng(spec.seed, "lexicon")
    used: set[tuple[int, ...]] = set()

    def fresh_rendering() -> tuple[int, ...]:
        while True:
            k = int(rng.integers(MIN_RENDER, MAX_RENDER + 1))
            r = tuple(int(4 + t) for t in rng.integers(0, n_acoustic, size=k))
            if r not in used:
                used.add(r)
                return r

    ids = [4 + i for i in rng.permutation(spec.n_source).tolist()]
    fert2 = [i for i in ids if len(spec.mapping[i - 4]) == 2]
    fert1 = [i for i in ids if len(spec.mapping[i - 4]) == 1]
    n_pairs = int(homophone_fraction * spec.n_source) // 2
    pairs = []
    for _ in range(n_pairs):
        a = fert2.pop() if fert2 else fert1.pop()
        b = fert1.pop() if fert1 else fert2.pop()
        pairs.append((a, b))
    rest = fert1 + fert2

    lexicon: AcousticLexicon = {}
    for a, b in pairs:
        shared = fresh_rendering()
        for tok in (a, b):
            lexicon[tok] = [shared] * shared_weight + [fresh_rendering()]
    for tok in rest:
        n_alt = int(rng.integers(1, 3))
        lexicon[tok] = [fresh_rendering() for _ in range(n_alt)]
    return lexicon


def render_acoustic(x_s: TokenSequence, lexicon: AcousticLexicon, seed: int) -> TokenSequence:
    """Sample one rendering per source token and concatenate them."""
    if x_s.role != ROLE_TRANSCRIPT:
        raise UsageError(f"render_acoustic expects a transcript, got {x_s.role}")
    rng = make_rng(seed)
    out: list[int] = []
    for tok in x_s.body:
        try:
            alts = lexicon[tok]
        except KeyError:
            raise DataError(f"source token {tok} missing from the acoustic lexicon") from None
        out.extend(alts[int(rng.integers(len(alts)))])
    return TokenSequence.from_body(out, role=ROLE_ACOUSTIC)


# --- noise channel ----------------------------------------------------------


@dataclass(frozen=True)
class NoiseChannelConfig:
    """Per-token substitution/deletion/insertion rates for corrupt_transcript."""

    p_sub: float = 0.0
    p_del: float = 0.0
    p_ins: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_sub", "p_del", "p_ins"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise UsageError(f"{name}={p} outside [0, 1]")
        if self.p_sub + self.p_del > 1.0:
            raise UsageError("p_sub + p_del must not exceed 1")


def corrupt_transcript(x_s: TokenSequence, spec: TaskSpec, cfg: NoiseChannelConfig) -> TokenSequence:
    """Apply the noise channel to a transcript.

    Per token, one of substitute/delete/keep is drawn (substitutions are
    uniform over the other source tokens); independently a random token is
    inserted after the current one with probability p_ins. Deterministic for
    a fixed (x_s, cfg): the draw stream is seeded from cfg.seed mixed with
    the token ids.
    """
    if x_s.role != ROLE_TRANSCRIPT:
        raise UsageError(f"corrupt_transcript expects a transcript, got {x_s.role}")
    rng = make_rng(cfg.seed, "noise", *x_s.body)
    out: list[int] = []
    for tok in x_s.body:
        u = rng.random()
        if u < cfg.p_sub:
            shift = int(rng.integers(1, spec.n_source))
            out.append(4 + (tok - 4 + shift) % spec.n_source)
        elif u < cfg.p_sub + cfg.p_del:
            pass
        else:
            out.append(tok)
        if rng.random() < cfg.p_ins:
            out.append(int(4 + rng.integers(spec.n_source)))
    return TokenSequence.from_body(out, role=ROLE_TRANSCRIPT)


# --- corpus generation and I/O ----------------------------------------------


def example_seed(seed: int, index: int) -> int:
    """Per-example seed; makes generation shardable by index."""
    return stable_hash64(seed, "example", index)


def generate_corpus(
    spec: TaskSpec,
    n: int,
    seed: int,
    lexicon: AcousticLexicon | None = None,
) -> list[ParallelExample]:
    """Generate `n` aligned (x_s, x_a, y) examples."""
    if n < 1:
        raise UsageError("corpus size must be positive")
    if lexicon is None:
        lexicon = build_acoustic_lexicon(spec)
    examples = []
    for i in range(n):
        rng = make_rng(example_seed(seed, i))
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        body = [int(4 + t) for t in rng.integers(0, spec.n_source, size=length)]
        x_s = TokenSequence.from_body(body, role=ROLE_TRANSCRIPT)
        y = TokenSequence.from_body(apply_mapping(spec, body), role=ROLE_TRANSLATION)
        x_a = render_acoustic(x_s, lexicon, seed=stable_hash64(example_seed(seed, i), "acoustic"))
        examples.append(ParallelExample(index=i, x_s=x_s, x_a=x_a, y=y))
    return examples


def save_corpus(path, examples, src_vocab: Vocabulary, ac_vocab: Vocabulary, tgt_vocab: Vocabulary) -> None:
    """Write one example per line: x_s TAB x_a TAB y [TAB x_hat_s]."""
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            fields = [
                " ".join(ex.x_s.to_tokens(src_vocab)),
                " ".join(ex.x_a.to_tokens(ac_vocab)),
                " ".join(ex.y.to_tokens(tgt_vocab)),
            ]
            if ex.x_hat_s is not None:
                fields.append(" ".join(ex.x_hat_s.to_tokens(src_vocab)))
            f.write("\t".join(fields) + "\n")


def load_corpus(path, src_vocab: Vocabulary, ac_vocab: Vocabulary, tgt_vocab: Vocabulary) -> list[ParallelExample]:
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            fields = line.split("\t")
            if len(fields) not in (3, 4):
                raise DataError(f"{path}:{lineno}: expected 3 or 4 TAB fields, got {len(fields)}")
            try:
                x_s = TokenSequence.from_tokens(fields[0].split(), src_vocab, ROLE_TRANSCRIPT)
                x_a = TokenSequence.from_tokens(fields[1].split(), ac_vocab, ROLE_ACOUSTIC)
                y = TokenSequence.from_tokens(fields[2].split(), tgt_vocab, ROLE_TRANSLATION)
                x_hat = (
                    TokenSequence.from_tokens(fields[3].split(), src_vocab, ROLE_TRANSCRIPT)
                    if len(fields) == 4
                    else None
                )
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            examples.append(
                ParallelExample(index=lineno - 1, x_s=x_s, x_a=x_a, y=y, x_hat_s=x_hat)
            )
    return examples
