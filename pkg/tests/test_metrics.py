"""Metric correctness against independent oracles.

The oracles here are deliberately written in a different style from the
library code (plain dict loops, quadratic DP tables, brute-force searches)
so that agreement actually means something.
"""

import math

import numpy as np
import pytest

from imitrans.metrics import (
    BleuStats,
    EXACT_SHIFT_LIMIT,
    bleu_reward_to_go,
    corpus_bleu,
    corpus_ter,
    corpus_wer,
    edit_distance,
    edit_ops,
    paired_randomization_test,
    sentence_bleu,
    sentence_stats,
    ter,
    ter_details,
    ter_reward_to_go,
    wer,
    wer_histogram,
)
from imitrans.util import UsageError, make_rng


# --- oracles ------------------------------------------------------------------


def oracle_corpus_bleu(hyps, refs):
    """Brute-force corpus BLEU: explicit n-gram dicts, no shared code."""
    matches = [0, 0, 0, 0]
    totals = [0, 0, 0, 0]
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            ref_counts = {}
            for i in range(len(ref) - n + 1):
                g = tuple(ref[i : i + n])
                ref_counts[g] = ref_counts.get(g, 0) + 1
            hyp_counts = {}
            for i in range(len(hyp) - n + 1):
                g = tuple(hyp[i : i + n])
                hyp_counts[g] = hyp_counts.get(g, 0) + 1
            for g, c in hyp_counts.items():
                matches[n - 1] += min(c, ref_counts.get(g, 0))
                totals[n - 1] += c
    if hyp_len == 0 or any(m == 0 for m in matches) or any(t == 0 for t in totals):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_prec)


def oracle_edit_distance(a, b):
    """Textbook quadratic Levenshtein table."""
    a, b = list(a), list(b)
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(
                d[i - 1][j - 1] + (a[i - 1] != b[j - 1]),
                d[i - 1][j] + 1,
                d[i][j - 1] + 1,
            )
    return d[len(a)][len(b)]


def oracle_ter_edits(hyp, ref):
    """Exhaustive minimum of shifts + edit distance over all shift sequences.

    Depth-first over every legal block move, memoized on the hypothesis
    permutation; tractable for the short sequences used in the tests.
    """
    ref = tuple(ref)
    spans = {ref[p : p + w] for w in range(1, len(ref) + 1) for p in range(len(ref) - w + 1)}

    def moves(h):
        for i in range(len(h)):
            for j in range(i + 1, len(h) + 1):
                if h[i:j] not in spans:
                    continue
                for k in range(len(h) - (j - i) + 1):
                    if k != i:
                        yield h[:i] + h[j:], h[i:j], k

    best = {}

    def search(h, shifts):
        if h in best and best[h] <= shifts:
            return math.inf
        best[h] = shifts
        out = shifts + oracle_edit_distance(h, ref)
        for rest, block, k in moves(h):
            out = min(out, search(rest[:k] + block + rest[k:], shifts + 1))
        return out

    return search(tuple(hyp), 0)


def random_sentence_pair(rng, max_len=15):
    """A reference and a hypothesis that is a noisy copy of it."""
    vocab = int(rng.integers(4, 12))
    ref = [int(t) for t in rng.integers(0, vocab, int(rng.integers(1, max_len + 1)))]
    hyp = []
    for tok in ref:
        r = rng.random()
        if r < 0.15:
            continue  # drop
        if r < 0.3:
            hyp.append(int(rng.integers(0, vocab)))  # replace
        else:
            hyp.append(tok)
        if rng.random() < 0.1:
            hyp.append(int(rng.integers(0, vocab)))  # insert
    return hyp, ref


# --- BLEU ----------------------------------------------------------------------


def test_corpus_bleu_matches_brute_force_oracle():
    rng = make_rng(20240601)
    for _ in range(200):
        n = int(rng.integers(1, 21))
        pairs = [random_sentence_pair(rng) for _ in range(n)]
        hyps = [h for h, _ in pairs]
        refs = [r for _, r in pairs]
        assert corpus_bleu(hyps, refs) == pytest.approx(oracle_corpus_bleu(hyps, refs), abs=1e-9)


def test_corpus_bleu_hand_example():
    hyp = "the cat sat on the mat".split()
    ref = "the cat sat on a mat".split()
    # precisions 5/6, 3/5, 2/4, 1/3 and BP = 1
    assert corpus_bleu([hyp], [ref]) == pytest.approx(100.0 * (5 / 6 * 3 / 5 * 2 / 4 * 1 / 3) ** 0.25, abs=1e-9)
    assert corpus_bleu([hyp], [ref]) == pytest.approx(53.73, abs=1e-2)


def test_corpus_bleu_perfect_and_disjoint():
    refs = [["a", "b", "c", "d"], ["x", "y", "z", "w", "v"]]
    assert corpus_bleu(refs, refs) == pytest.approx(100.0)
    assert corpus_bleu([["q", "q", "q", "q"]], [["a", "b", "c", "d"]]) == 0.0


def test_corpus_bleu_zero_when_any_order_unmatched():
    # unigrams overlap but no 4-gram does
    assert corpus_bleu([["a", "x", "b", "y"]], [["a", "b", "c", "d"]]) == 0.0


def test_corpus_bleu_brevity_penalty():
    hyp = ["a", "b", "c", "d"]
    ref = ["a", "b", "c", "d", "e", "f", "g", "h"]
    assert corpus_bleu([hyp], [ref]) == pytest.approx(100.0 * math.exp(1.0 - 2.0), abs=1e-9)


def test_corpus_bleu_input_validation():
    with pytest.raises(UsageError):
        corpus_bleu([["a"]], [])
    with pytest.raises(UsageError):
        corpus_bleu([], [])
    with pytest.raises(UsageError):
        corpus_bleu([["a"]], [[]])


def test_bleu_stats_sum_to_corpus_stats():
    rng = make_rng(7)
    pairs = [random_sentence_pair(rng) for _ in range(30)]
    total = BleuStats.zero()
    for h, r in pairs:
        total = total + sentence_stats(h, r)
    again = BleuStats.zero()
    for h, r in pairs:
        again = again + sentence_stats(h, r)
    assert total == again
    assert total.hyp_len == sum(len(h) for h, _ in pairs)
    assert total.ref_len == sum(len(r) for _, r in pairs)
    assert all(m <= t for m, t in zip(total.matches, total.totals))


def test_sentence_bleu_smoothing_values():
    # all precisions exact: smoothing must not fire
    ref = ["a", "b", "c", "d"]
    assert sentence_bleu(ref, ref) == pytest.approx(100.0)
    # one 3-token pair, smoothed by hand: precisions 1 everywhere after
    # add-one, so the whole score is the brevity penalty exp(1 - 4/3)
    assert sentence_bleu(["a", "b", "c"], ["a", "b", "c", "d"]) == pytest.approx(
        100.0 * math.exp(1.0 - 4.0 / 3.0), abs=1e-9
    )
    assert sentence_bleu(["a", "b", "c"], ["a", "b", "c", "d"]) == pytest.approx(71.65313105737893)
    assert sentence_bleu([], ["a", "b"]) == 0.0
    with pytest.raises(UsageError):
        sentence_bleu(["a"], [])


def test_bleu_reward_to_go():
    ref = ["a", "b", "c", "d", "e"]
    assert bleu_reward_to_go(ref, ref, ref) == 0.0
    assert bleu_reward_to_go([], ref, ref) == pytest.approx(100.0)
    half = ref[:2]
    assert bleu_reward_to_go(half, ref, ref) == pytest.approx(100.0 - sentence_bleu(half, ref))
    with pytest.raises(UsageError):
        bleu_reward_to_go(["b"], ["a", "b"], ref)


# --- WER -----------------------------------------------------------------------


def test_edit_distance_matches_dp_oracle():
    rng = make_rng(31)
    for _ in range(1000):
        vocab = int(rng.integers(2, 7))
        a = [int(t) for t in rng.integers(0, vocab, int(rng.integers(0, 13)))]
        b = [int(t) for t in rng.integers(0, vocab, int(rng.integers(0, 13)))]
        assert edit_distance(a, b) == oracle_edit_distance(a, b)


def test_wer_hand_values():
    assert wer("a x c".split(), "a b c d".split()) == pytest.approx(0.5)
    assert wer(["a", "b"], ["a", "b"]) == 0.0
    assert wer([], ["a"] * 5) == 1.0
    with pytest.raises(UsageError):
        wer(["a"], [])


def test_edit_ops_decomposition():
    subs, ins, dels = edit_ops("a x c".split(), "a b c d".split())
    assert (subs, ins, dels) == (1, 0, 1)
    subs, ins, dels = edit_ops(["a", "a", "b"], ["a", "b"])
    assert (subs, ins, dels) == (0, 1, 0)
    rng = make_rng(99)
    for _ in range(200):
        a = [int(t) for t in rng.integers(0, 4, int(rng.integers(0, 10)))]
        b = [int(t) for t in rng.integers(0, 4, int(rng.integers(0, 10)))]
        subs, ins, dels = edit_ops(a, b)
        assert subs + ins + dels == edit_distance(a, b)


def test_corpus_wer_pools_edits():
    hyps = [["a", "b"], ["x"]]
    refs = [["a", "b"], ["y", "z"]]
    # 0 edits on the first pair, 2 on the second, 4 reference tokens
    assert corpus_wer(hyps, refs) == pytest.approx(2 / 4)
    with pytest.raises(UsageError):
        corpus_wer([], [])


def test_wer_histogram_bins():
    pairs = [
        (["a", "b"], ["a", "b"]),  # 0.0
        (["a", "x"], ["a", "b"]),  # 0.5
        (["x", "y"], ["a", "b"]),  # 1.0
    ]
    hist = wer_histogram(pairs, bin_width=0.5)
    assert hist == [(0.0, 1), (0.5, 1), (1.0, 1)]
    with pytest.raises(UsageError):
        wer_histogram([], bin_width=0.5)
    with pytest.raises(UsageError):
        wer_histogram(pairs, bin_width=0.0)


# --- TER -----------------------------------------------------------------------


def test_ter_matches_exhaustive_oracle():
    rng = make_rng(53)
    for _ in range(500):
        vocab = int(rng.integers(2, 6))
        hyp = [int(t) for t in rng.integers(0, vocab, int(rng.integers(1, 7)))]
        ref = [int(t) for t in rng.integers(0, vocab, int(rng.integers(1, 7)))]
        details = ter_details(hyp, ref)
        assert details.total_edits == oracle_ter_edits(hyp, ref)
        assert ter(hyp, ref) == pytest.approx(details.total_edits / len(ref))


def test_ter_hand_values():
    assert ter(["b", "a"], ["a", "b"]) == pytest.approx(0.5)  # one shift
    assert ter(["a", "x"], ["a", "b"]) == pytest.approx(0.5)  # one substitution
    assert ter(["a", "b", "c"], ["a", "b", "c"]) == 0.0
    assert ter([], ["a", "b"]) == pytest.approx(1.0)
    with pytest.raises(UsageError):
        ter(["a"], [])


def test_ter_shift_actually_counted():
    details = ter_details(["b", "a"], ["a", "b"])
    assert details.shifts == 1
    assert details.substitutions == details.insertions == details.deletions == 0


def test_ter_long_hypotheses_never_beat_plain_edits():
    # beyond the exact-search limit the greedy fallback must still return
    # something no worse than doing zero shifts
    rng = make_rng(54)
    for _ in range(50):
        vocab = int(rng.integers(3, 8))
        length = int(rng.integers(EXACT_SHIFT_LIMIT + 1, 2 * EXACT_SHIFT_LIMIT + 1))
        hyp = [int(t) for t in rng.integers(0, vocab, length)]
        ref = [int(t) for t in rng.integers(0, vocab, int(rng.integers(9, 16)))]
        assert ter_details(hyp, ref).total_edits <= edit_distance(hyp, ref)


def test_corpus_ter_pools_edits():
    hyps = [["b", "a"], ["a", "b"]]
    refs = [["a", "b"], ["a", "b"]]
    assert corpus_ter(hyps, refs) == pytest.approx(1 / 4)


def test_ter_reward_to_go_values():
    ref = ["a", "b", "c", "d"]
    assert ter_reward_to_go(ref, ref, ref) == 0.0
    assert ter_reward_to_go([], ref, ref) == pytest.approx(100.0)
    # a hypothesis worse than the empty one exercises the clamp
    junk = ["x", "y", "z", "w", "v", "u"]
    assert ter_reward_to_go(junk[:2], junk, ref) == 0.0
    with pytest.raises(UsageError):
        ter_reward_to_go(["b"], ["a", "b"], ref)


# --- significance ----------------------------------------------------------------


def _stats_list(pairs):
    return [sentence_stats(h, r) for h, r in pairs]


def test_randomization_test_identical_systems():
    rng = make_rng(61)
    pairs = [random_sentence_pair(rng) for _ in range(40)]
    stats = _stats_list(pairs)
    assert paired_randomization_test(stats, stats, trials=500, seed=3) == 1.0


def test_randomization_test_separates_clear_quality_gap():
    rng = make_rng(62)
    refs = [[int(t) for t in rng.integers(0, 8, 10)] for _ in range(120)]
    perfect = _stats_list([(r, r) for r in refs])
    junk = _stats_list([([int(t) for t in rng.integers(8, 16, 10)], r) for r in refs])
    p = paired_randomization_test(perfect, junk, trials=10000, seed=0)
    assert p < 0.005


def test_randomization_test_determinism_and_smoothing_floor():
    rng = make_rng(63)
    pairs = [random_sentence_pair(rng) for _ in range(30)]
    better = _stats_list([(r, r) for _, r in pairs])
    worse = _stats_list(pairs)
    p1 = paired_randomization_test(better, worse, trials=2000, seed=11)
    p2 = paired_randomization_test(better, worse, trials=2000, seed=11)
    assert p1 == p2
    assert p1 >= 1 / 2001  # plus-one smoothing floor
    with pytest.raises(UsageError):
        paired_randomization_test(better, worse[:-1])
    with pytest.raises(UsageError):
        paired_randomization_test(better, worse, trials=0)
