"""Greedy and beam decoding over the incremental policy protocol.

Both engines are batched across examples; beam search additionally batches
the hypotheses of each example, so one `advance` call per step serves the
whole beam. The padding and begin-of-sequence symbols are never selectable;
a hypothesis is finished exactly when its last token is end-of-sequence.

With length_norm = 0 (the default) beam scores are plain cumulative
log-probabilities, and a beam of size 1 reproduces greedy decoding exactly,
tie-breaking included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnet import log_softmax
from .policy import next_token_distribution
from .util import UsageError
from .vocab import BOS, EOS, PAD, TokenSequence


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    t_max: int = 64
    length_norm: float = 0.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise UsageError("beam_size must be at least 1")
        if self.t_max < 2:
            raise UsageError("t_max must be at least 2 (one content token plus the end token)")
        if self.length_norm < 0:
            raise UsageError("length_norm exponent must be non-negative")


@dataclass(frozen=True)
class Hypothesis:
    """Decoded token sequence (trailing EOS iff finished) with its score."""

    tokens: tuple[int, ...]
    score: float
    finished: bool

    def normalized(self, exponent: float) -> float:
        return self.score / max(1, len(self.tokens)) ** exponent

    def to_sequence(self, role: str) -> TokenSequence:
        return TokenSequence(ids=self.tokens, role=role, complete=self.finished)


def _body(x):
    return x.body if isinstance(x, TokenSequence) else tuple(int(i) for i in x)


def greedy_decode_batch(policy, xs, cfg: DecodeConfig) -> list[Hypothesis]:
    """Argmax decoding (lowest token index on ties), batched across examples."""
    bodies = [_body(x) for x in xs]
    B = len(bodies)
    if B == 0:
        return []
    state, logits = policy.start_batch(bodies)
    tokens: list[list[int]] = [[] for _ in range(B)]
    scores = np.zeros(B)
    finished = np.zeros(B, dtype=bool)
    for step in range(cfg.t_max):
        logp = log_softmax(logits)
        masked = logits.copy()
        masked[:, PAD] = -np.inf
        masked[:, BOS] = -np.inf
        sel = np.argmax(masked, axis=1)
        for b in range(B):
            if finished[b]:
                continue
            tokens[b].append(int(sel[b]))
            scores[b] += logp[b, sel[b]]
            if sel[b] == EOS:
                finished[b] = True
        if finished.all() or step == cfg.t_max - 1:
            break
        feed = np.where(finished, PAD, sel)
        state, logits = policy.advance(state, feed)
    return [
        Hypothesis(tokens=tuple(tokens[b]), score=float(scores[b]), finished=bool(finished[b]))
        for b in range(B)
    ]


def greedy_decode(policy, x, cfg: DecodeConfig) -> Hypothesis:
    return greedy_decode_batch(policy, [x], cfg)[0]


def beam_decode_batch(policy, xs, cfg: DecodeConfig, forced=None) -> list[Hypothesis]:
    """Beam search, optionally constrained to start with per-example prefixes.

    `forced`, when given, lists token tuples (one per example) that every
    hypothesis of that example must begin with; their log-probabilities are
    accumulated into the scores and their length counts toward t_max.
    Finished hypotheses are carried in the beam until beam-many have finished
    or the step limit is reached; the best finished hypothesis under the
    length-normalized score wins (best unfinished if none finished).
    """
    bodies = [_body(x) for x in xs]
    B = len(bodies)
    if B == 0:
        return []
    K = cfg.beam_size
    state, logits = policy.start_batch(bodies)

    forced = [tuple(int(t) for t in f) for f in forced] if forced is not None else [()] * B
    if len(forced) != B:
        raise UsageError("need one forced prefix per example")
    if any(PAD in f or BOS in f for f in forced):
        raise UsageError("cannot force padding or BOS tokens")
    for f in forced:
        if len(f) > cfg.t_max:
            raise UsageError(f"forced prefix of length {len(f)} exceeds t_max={cfg.t_max}")

    # feed the forced prefixes, accumulating their true log-probabilities
    base_scores = np.zeros(B)
    base_finished = np.zeros(B, dtype=bool)
    max_forced = max((len(f) for f in forced), default=0)
    for s in range(max_forced):
        logp = log_softmax(logits)
        feed = np.full(B, PAD, dtype=np.int64)
        for b, f in enumerate(forced):
            if s < len(f):
                tok = f[s]
                base_scores[b] += logp[b, tok]
                if tok == EOS:
                    base_finished[b] = True
                feed[b] = tok
        state, logits = policy.advance(state, feed)

    # replicate each example's row K times; only beam 0 is live initially
    state = state.gather([b for b in range(B) for _ in range(K)])
    logits = logits[[b for b in range(B) for _ in range(K)]]
    scores = np.full((B, K), -np.inf)
    scores[:, 0] = base_scores
    finished = np.zeros((B, K), dtype=bool)
    finished[:, 0] = base_finished
    tokens: list[list[list[int]]] = [[list(forced[b]) for _ in range(K)] for b in range(B)]
    steps_taken = np.array([len(f) for f in forced], dtype=np.int64)
    done = finished.sum(axis=1) >= K

    while True:
        for b in range(B):
            if done[b]:
                continue
            live = ~finished[b]
            # an example is done at the step limit or when no live beam has
            # any probability mass left to expand
            if steps_taken[b] >= cfg.t_max or not live.any() or np.max(scores[b][live]) == -np.inf:
                done[b] = True
        if done.all():
            break

        logp = log_softmax(logits)
        logp[:, PAD] = -np.inf
        logp[:, BOS] = -np.inf
        V = logp.shape[1]
        cand = scores[:, :, None] + logp.reshape(B, K, V)
        # finished beams contribute themselves once, carried in the PAD column
        fin_b, fin_k = np.nonzero(finished)
        cand[fin_b, fin_k, :] = -np.inf
        cand[fin_b, fin_k, PAD] = scores[fin_b, fin_k]

        flat = cand.reshape(B, K * V)
        order = np.argsort(-flat, axis=1, kind="stable")[:, :K]
        new_scores = np.take_along_axis(flat, order, axis=1)
        src_beam = order // V
        sel_tok = order % V

        new_tokens = [tokens[b] for b in range(B)]
        gather_rows = np.arange(B * K)
        feed = np.full(B * K, PAD, dtype=np.int64)
        new_finished = finished.copy()
        for b in range(B):
            if done[b]:
                continue
            row_tokens = []
            row_finished = np.zeros(K, dtype=bool)
            for k in range(K):
                src = int(src_beam[b, k])
                tok = int(sel_tok[b, k])
                gather_rows[b * K + k] = b * K + src
                if finished[b, src]:
                    # carried hypothesis (tok is the PAD column)
                    row_tokens.append(tokens[b][src])
                    row_finished[k] = True
                else:
                    row_tokens.append(tokens[b][src] + [tok])
                    row_finished[k] = tok == EOS
                    if not row_finished[k] and np.isfinite(new_scores[b, k]):
                        feed[b * K + k] = tok
            new_tokens[b] = row_tokens
            new_finished[b] = row_finished
            scores[b] = new_scores[b]
            steps_taken[b] += 1
        tokens = new_tokens
        finished = new_finished
        done |= finished.sum(axis=1) >= K

        state = state.gather(gather_rows)
        state, logits = policy.advance(state, feed)

    results = []
    for b in range(B):
        cands = [
            Hypothesis(tokens=tuple(tokens[b][k]), score=float(scores[b, k]), finished=bool(finished[b, k]))
            for k in range(K)
            if np.isfinite(scores[b, k])
        ]
        if not cands:  # degenerate: keep beam 0 as-is
            cands = [Hypothesis(tokens=tuple(tokens[b][0]), score=float(scores[b, 0]), finished=bool(finished[b, 0]))]
        fin = [h for h in cands if h.finished]
        pool = fin if fin else cands
        best = max(pool, key=lambda h: h.normalized(cfg.length_norm))
        results.append(best)
    return results


def beam_decode(policy, x, cfg: DecodeConfig) -> Hypothesis:
    return beam_decode_batch(policy, [x], cfg)[0]


def oracle_next_token(expert, x, prefix) -> tuple[int, np.ndarray]:
    """Expert argmax correction and its full distribution for one prefix."""
    out = next_token_distribution(expert, x, prefix)
    return out.argmax(), out.probs


def oracle_continuation(expert, x, prefix, action: int, cfg: DecodeConfig) -> Hypothesis:
    """Best expert completion of prefix + action, by beam search.

    The returned hypothesis includes the prefix and the action. A prefix that
    already ends with EOS is returned unchanged (score 0, nothing decoded).
    """
    if isinstance(prefix, TokenSequence) and prefix.complete:
        return Hypothesis(tokens=prefix.ids, score=0.0, finished=True)
    prefix_body = _body(prefix)
    action = int(action)
    if not 0 <= action < expert.vocab_size:
        raise UsageError(f"action {action} out of vocabulary")
    forced = prefix_body + (action,)
    return beam_decode_batch(expert, [x], cfg, forced=[forced])[0]


def topk_inspect(policy, x, prefix, k: int = 8) -> list[tuple[int, float]]:
    """Top-k next-token probabilities, descending, lowest token id on ties."""
    out = next_token_distribution(policy, x, prefix)
    if not 1 <= k <= len(out.probs):
        raise UsageError(f"k={k} outside [1, {len(out.probs)}]")
    order = np.argsort(-out.probs, kind="stable")[:k]
    return [(int(i), float(out.probs[i])) for i in order]
