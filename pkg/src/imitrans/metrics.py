"""Translation quality metrics and significance testing.

BLEU follows the classic corpus formulation: clipped n-gram precisions for
n = 1..4 combined by geometric mean, with a brevity penalty
exp(min(0, 1 - ref_len / hyp_len)). The corpus score is computed from summed
per-sentence sufficient statistics, so corpora can be pooled by adding stats.

The sentence-level variant add-one smooths numerator and denominator for
n >= 2, but only when some unsmoothed numerator is zero; a perfect hypothesis
therefore still scores exactly 100.

TER is simplified: block shifts are chosen greedily (the shift that most
reduces the remaining edit distance, each costing one point) and the shifted
block must exactly match a span of the reference.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .util import UsageError
from .vocab import TokenSequence

NGRAM_ORDER = 4


def _body(seq) -> tuple:
    """Accept TokenSequence or a plain token iterable."""
    if isinstance(seq, TokenSequence):
        return seq.body
    return tuple(seq)


@dataclass(frozen=True)
class BleuStats:
    """Sufficient statistics of one hypothesis/reference pair (or a sum)."""

    matches: tuple[int, int, int, int]
    totals: tuple[int, int, int, int]
    hyp_len: int
    ref_len: int

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(
            matches=tuple(a + b for a, b in zip(self.matches, other.matches)),
            totals=tuple(a + b for a, b in zip(self.totals, other.totals)),
            hyp_len=self.hyp_len + other.hyp_len,
            ref_len=self.ref_len + other.ref_len,
        )

    def as_row(self) -> np.ndarray:
        return np.array(self.matches + self.totals + (self.hyp_len, self.ref_len), dtype=np.float64)

    @staticmethod
    def zero() -> "BleuStats":
        return BleuStats((0, 0, 0, 0), (0, 0, 0, 0), 0, 0)


def sentence_stats(hyp, ref) -> BleuStats:
    hyp, ref = _body(hyp), _body(ref)
    matches, totals = [], []
    for n in range(1, NGRAM_ORDER + 1):
        hyp_ngrams = Counter(hyp[i : i + n] for i in range(len(hyp) - n + 1))
        ref_ngrams = Counter(ref[i : i + n] for i in range(len(ref) - n + 1))
        matches.append(sum(min(c, ref_ngrams[g]) for g, c in hyp_ngrams.items()))
        totals.append(sum(hyp_ngrams.values()))
    return BleuStats(tuple(matches), tuple(totals), len(hyp), len(ref))


def _scores_from_rows(rows: np.ndarray, smooth: bool = False) -> np.ndarray:
    """BLEU for each row of summed stats (shape (N, 10)). Vectorized.

    This single routine backs both the scalar scorers and the randomization
    test, so the two always agree bitwise.
    """
    rows = np.asarray(rows, dtype=np.float64)
    m = rows[:, 0:NGRAM_ORDER].copy()
    t = rows[:, NGRAM_ORDER : 2 * NGRAM_ORDER].copy()
    hyp_len = rows[:, 2 * NGRAM_ORDER]
    ref_len = rows[:, 2 * NGRAM_ORDER + 1]
    if smooth:
        # add-one on numerator and denominator for n >= 2, skipped where every
        # unsmoothed numerator is already positive
        needs = ~(m > 0).all(axis=1)
        m[needs, 1:] += 1.0
        t[needs, 1:] += 1.0
    ok = (m > 0).all(axis=1) & (t > 0).all(axis=1) & (hyp_len > 0)
    safe_m = np.where(m > 0, m, 1.0)
    safe_t = np.where(t > 0, t, 1.0)
    log_prec = np.log(safe_m / safe_t).mean(axis=1)
    bp = np.exp(np.minimum(0.0, 1.0 - ref_len / np.where(hyp_len > 0, hyp_len, 1.0)))
    return np.where(ok, 100.0 * bp * np.exp(log_prec), 0.0)


def bleu_from_stats(stats: BleuStats, smooth: bool = False) -> float:
    return float(_scores_from_rows(stats.as_row()[None, :], smooth=smooth)[0])


def corpus_bleu(hyps, refs) -> float:
    """Corpus BLEU in [0, 100]; 0 if any clipped precision numerator is 0."""
    if len(hyps) != len(refs):
        raise UsageError(f"got {len(hyps)} hypotheses for {len(refs)} references")
    if not hyps:
        raise UsageError("corpus_bleu needs at least one sentence pair")
    total = BleuStats.zero()
    for h, r in zip(hyps, refs):
        if len(_body(r)) == 0:
            raise UsageError("empty reference")
        total = total + sentence_stats(h, r)
    return bleu_from_stats(total)


def sentence_bleu(hyp, ref) -> float:
    """Sentence BLEU with add-one smoothing for the higher orders."""
    if len(_body(ref)) == 0:
        raise UsageError("empty reference")
    return bleu_from_stats(sentence_stats(hyp, ref), smooth=True)


def bleu_reward_to_go(prefix, full, ref) -> float:
    """How much sentence BLEU the continuation of `prefix` into `full` adds."""
    prefix, full = _body(prefix), _body(full)
    if tuple(full[: len(prefix)]) != tuple(prefix):
        raise UsageError("prefix is not a prefix of the full sequence")
    return sentence_bleu(full, ref) - sentence_bleu(prefix, ref)


def ter_reward_to_go(prefix, full, ref) -> float:
    """TER-based counterpart: quality q(s) = max(0, 1 - TER(s, ref)) * 100."""
    prefix, full = _body(prefix), _body(full)
    if tuple(full[: len(prefix)]) != tuple(prefix):
        raise UsageError("prefix is not a prefix of the full sequence")

    def quality(s):
        return max(0.0, 1.0 - ter(s, ref)) * 100.0

    return quality(full) - quality(prefix)


# --- edit-distance family ----------------------------------------------------


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs, vectorized row updates."""
    a, b = _body(a), _body(b)
    if len(a) == 0:
        return len(b)
    if len(b) == 0:
        return len(a)
    b_arr = np.array(b)
    prev = np.arange(len(b) + 1, dtype=np.int64)
    pos = np.arange(1, len(b) + 1, dtype=np.int64)
    for i, tok in enumerate(a, start=1):
        sub = prev[:-1] + (b_arr != tok)
        best = np.minimum(prev[1:] + 1, sub)
        # resolve the sequential insertion term: row[j] = min_k<=j best[k] + (j - k)
        row = np.empty(len(b) + 1, dtype=np.int64)
        row[0] = i
        row[1:] = np.minimum.accumulate(np.minimum(best, pos + i) - pos) + pos
        prev = row
    return int(prev[-1])


def wer(hyp, ref) -> float:
    """Word error rate: edit distance normalized by reference length."""
    ref_body = _body(ref)
    if len(ref_body) == 0:
        raise UsageError("empty reference")
    return edit_distance(hyp, ref) / len(ref_body)


@dataclass(frozen=True)
class EditSummary:
    substitutions: int
    insertions: int
    deletions: int
    shifts: int
    ref_len: int

    @property
    def total_edits(self) -> int:
        return self.substitutions + self.insertions + self.deletions + self.shifts


def edit_ops(hyp, ref) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) along one minimal alignment."""
    hyp, ref = _body(hyp), _body(ref)
    n, m = len(hyp), len(ref)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(
                d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]),
                d[i - 1, j] + 1,
                d[i, j - 1] + 1,
            )
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (hyp[i - 1] != ref[j - 1]):
            subs += hyp[i - 1] != ref[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            ins += 1  # hypothesis token with no reference counterpart
            i -= 1
        else:
            dels += 1  # reference token missing from the hypothesis
            j -= 1
    return subs, ins, dels


def _shift_candidates(hyp: list, ref: tuple):
    """Legal block shifts: hyp[i:j] must exactly match some reference span.

    Yields (i, j, k): remove hyp[i:j] and reinsert before position k of the
    remaining tokens.
    """
    ref_spans = {ref[p : p + w] for w in range(1, len(ref) + 1) for p in range(len(ref) - w + 1)}
    n = len(hyp)
    for i in range(n):
        for j in range(i + 1, n + 1):
            block = tuple(hyp[i:j])
            if block not in ref_spans:
                continue
            for k in range(n - (j - i) + 1):
                if k == i:
                    continue
                yield i, j, k


def _apply_shift(hyp: list, i: int, j: int, k: int) -> list:
    block = hyp[i:j]
    rest = hyp[:i] + hyp[j:]
    return rest[:k] + block + rest[k:]


EXACT_SHIFT_LIMIT = 8


def _exact_shift_plan(hyp_body: list, ref_body: tuple) -> tuple[list, int]:
    """Minimal-cost shift sequence by breadth-first search over shift counts.

    Explores every hypothesis permutation reachable through legal shifts,
    level by level, and keeps the state minimizing shifts + edit distance.
    A level at depth g is only worth expanding while g + 1 can still beat
    the best total seen, which bounds the search tightly in practice.
    """
    start = tuple(hyp_body)
    best_total = edit_distance(start, ref_body)
    best_state, best_shifts = start, 0
    seen = {start}
    frontier = [start]
    g = 0
    while frontier and g + 1 < best_total:
        g += 1
        level = []
        for state in frontier:
            as_list = list(state)
            for i, j, k in _shift_candidates(as_list, ref_body):
                shifted = tuple(_apply_shift(as_list, i, j, k))
                if shifted in seen:
                    continue
                seen.add(shifted)
                total = g + edit_distance(shifted, ref_body)
                if total < best_total:
                    best_total, best_state, best_shifts = total, shifted, g
                level.append(shifted)
        frontier = level
    return list(best_state), best_shifts


def ter_details(hyp, ref) -> EditSummary:
    """TER decomposition: minimal shifts + edits for short hypotheses, greedy beyond.

    Pairs with both sides at most EXACT_SHIFT_LIMIT tokens get the exact
    search. Longer ones fall back to the usual greedy rule: repeatedly apply
    the legal shift that most reduces the Levenshtein distance (ties broken
    by lowest (i, j, k)), as long as the distance drops by at least 2 so the
    move pays for its own cost of 1.
    """
    hyp_body, ref_body = list(_body(hyp)), _body(ref)
    if len(ref_body) == 0:
        raise UsageError("empty reference")
    if len(hyp_body) <= EXACT_SHIFT_LIMIT and len(ref_body) <= EXACT_SHIFT_LIMIT:
        hyp_body, shifts = _exact_shift_plan(hyp_body, ref_body)
    else:
        shifts = 0
        dist = edit_distance(hyp_body, ref_body)
        while dist > 0:
            best = None
            for i, j, k in _shift_candidates(hyp_body, ref_body):
                cand = edit_distance(_apply_shift(hyp_body, i, j, k), ref_body)
                if cand + 1 < dist and (best is None or cand < best[0]):
                    best = (cand, i, j, k)
            if best is None:
                break
            dist, i, j, k = best
            hyp_body = _apply_shift(hyp_body, i, j, k)
            shifts += 1
    subs, ins, dels = edit_ops(hyp_body, ref_body)
    return EditSummary(
        substitutions=subs, insertions=ins, deletions=dels, shifts=shifts, ref_len=len(ref_body)
    )


def ter(hyp, ref) -> float:
    """Translation edit rate: (edits + shifts) / reference length."""
    summary = ter_details(hyp, ref)
    return summary.total_edits / summary.ref_len


# --- aggregation -------------------------------------------------------------


def corpus_wer(hyps, refs) -> float:
    """Total edits over total reference length."""
    if len(hyps) != len(refs) or not hyps:
        raise UsageError("need equally many hypotheses and references, at least one")
    edits = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    ref_len = sum(len(_body(r)) for r in refs)
    if ref_len == 0:
        raise UsageError("empty reference corpus")
    return edits / ref_len


def corpus_ter(hyps, refs) -> float:
    if len(hyps) != len(refs) or not hyps:
        raise UsageError("need equally many hypotheses and references, at least one")
    total = 0
    ref_len = 0
    for h, r in zip(hyps, refs):
        s = ter_details(h, r)
        total += s.total_edits
        ref_len += s.ref_len
    return total / ref_len


def wer_histogram(pairs, bin_width: float = 0.1) -> list[tuple[float, int]]:
    """Histogram of per-sentence WER. Bins are [k*w, (k+1)*w), zeros included."""
    if bin_width <= 0:
        raise UsageError("bin_width must be positive")
    if not pairs:
        raise UsageError("wer_histogram needs at least one pair")
    rates = [wer(h, r) for h, r in pairs]
    top = int(max(rates) // bin_width)
    counts = [0] * (top + 1)
    for rate in rates:
        counts[int(rate // bin_width)] += 1
    return [(k * bin_width, c) for k, c in enumerate(counts)]


# --- significance ------------------------------------------------------------


def paired_randomization_test(
    stats_a: list[BleuStats],
    stats_b: list[BleuStats],
    trials: int = 10000,
    seed: int = 0,
) -> float:
    """Paired approximate randomization test on corpus BLEU.

    Per trial, each sentence's stats pair is swapped between systems with
    probability 1/2; the p-value is the plus-one-smoothed fraction of trials
    whose absolute corpus-score difference reaches the observed one.
    """
    if len(stats_a) != len(stats_b) or not stats_a:
        raise UsageError("need equally many per-sentence stats for both systems")
    if trials < 1:
        raise UsageError("trials must be positive")
    a = np.stack([s.as_row() for s in stats_a])
    b = np.stack([s.as_row() for s in stats_b])
    sum_a, sum_b = a.sum(axis=0), b.sum(axis=0)
    observed = abs(
        float(np.diff(_scores_from_rows(np.stack([sum_a, sum_b])))[0])
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    diff = b - a
    hits = 0
    chunk = max(1, min(trials, 2_000_000 // max(1, len(stats_a))))
    done = 0
    while done < trials:
        t = min(chunk, trials - done)
        swap = rng.random((t, len(stats_a))) < 0.5
        moved = swap.astype(np.float64) @ diff
        score_a = _scores_from_rows(sum_a[None, :] + moved)
        score_b = _scores_from_rows(sum_b[None, :] - moved)
        hits += int((np.abs(score_a - score_b) >= observed).sum())
        done += t
    return (hits + 1) / (trials + 1)
