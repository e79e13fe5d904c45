"""Imitation learning: roll-ins, expert-labeled records, training loops.

Each iteration rolls in a sequence per example (the reference with
probability beta, otherwise the student's own greedy decode), asks the
frozen expert for corrections along that sequence, and updates the student
on the freshly collected records. Records are not aggregated across
iterations.

The exploration variant collects one record per example instead: a uniformly
random time step, the student's argmax action there, and the reward-to-go of
the expert's best completion of that action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import metrics
from .corpus import ParallelExample
from .decode import DecodeConfig, Hypothesis, beam_decode_batch, greedy_decode_batch
from .nnet import pad_rows, softmax
from .policy import aggrevate_loss, apply_update, ikd_loss, ikd_plus_loss, AdamOptimizer, OptimizerConfig
from .util import TrainingError, UsageError, make_rng, stable_hash64
from .vocab import BOS, EOS, PAD, ROLE_TRANSLATION, TokenSequence

ORACLE_INPUTS = ("gold", "synthetic")
TARGET_MODES = ("argmax", "distribution")
REWARD_METRICS = ("bleu", "ter")


@dataclass(frozen=True)
class BetaSchedule:
    """Mixing weight between reference and student roll-ins.

    exponential: beta(i) = exp(-decay * (i - 1)), so beta(1) is always 1;
    constant:    beta(i) = value for every iteration.
    """

    kind: str = "exponential"
    decay: float = math.log(20.0)
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("exponential", "constant"):
            raise UsageError(f"unknown beta schedule kind {self.kind!r}")
        if self.kind == "exponential" and self.decay <= 0:
            raise UsageError("exponential schedule needs decay > 0")
        if self.kind == "constant" and not 0.0 <= self.value <= 1.0:
            raise UsageError("constant beta must lie in [0, 1]")

    @classmethod
    def exponential_for(cls, iterations: int, final_beta: float = 0.05) -> "BetaSchedule":
        """Decay chosen so beta reaches final_beta at the last iteration."""
        if not 0.0 < final_beta < 1.0:
            raise UsageError("final_beta must lie in (0, 1)")
        if iterations <= 1:
            return cls(kind="constant", value=1.0)
        return cls(kind="exponential", decay=math.log(1.0 / final_beta) / (iterations - 1))

    def beta(self, iteration: int) -> float:
        if iteration < 1:
            raise UsageError("iterations are numbered from 1")
        if self.kind == "constant":
            return self.value
        return math.exp(-self.decay * (iteration - 1))


def inverse_sqrt_lr(base: float, update: int, warmup: int) -> float:
    """Learning rate at `update` (counted from 1): linear ramp to `base`
    over the first `warmup` updates, then decay as sqrt(warmup / update).
    """
    if base <= 0:
        raise UsageError("base learning rate must be positive")
    if warmup < 1:
        raise UsageError("warmup must cover at least one update")
    if update < 1:
        raise UsageError("updates are numbered from 1")
    if update < warmup:
        return base * update / warmup
    return base * math.sqrt(warmup / update)


@dataclass(frozen=True)
class IterationConfig:
    """Knobs shared by the collection loops."""

    batch_size: int = 64
    oracle_input: str = "gold"  # expert reads x_s ("gold") or x_hat_s ("synthetic")
    target_mode: str = "distribution"  # expert correction: "argmax" or "distribution"
    reward_metric: str = "bleu"
    oracle_beam: int = 5
    seed: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError("batch_size must be positive")
        if self.oracle_input not in ORACLE_INPUTS:
            raise UsageError(f"oracle_input must be one of {ORACLE_INPUTS}")
        if self.target_mode not in TARGET_MODES:
            raise UsageError(f"target_mode must be one of {TARGET_MODES}")
        if self.reward_metric not in REWARD_METRICS:
            raise UsageError(f"reward_metric must be one of {REWARD_METRICS}")
        if self.oracle_beam < 1:
            raise UsageError("oracle_beam must be positive")


@dataclass(frozen=True)
class DaggerRecord:
    """One supervised position: expert correction on a rolled-in prefix."""

    x: tuple[int, ...]  # student encoder input (acoustic body)
    prefix: tuple[int, ...]
    target_id: int | None = None
    target_dist: np.ndarray | None = None
    example_index: int | None = None
    t: int | None = None


@dataclass(frozen=True)
class AggrevateRecord:
    """One explored action with the reward-to-go of its expert completion."""

    x: tuple[int, ...]
    prefix: tuple[int, ...]
    action: int
    reward: float
    example_index: int | None = None
    t: int | None = None


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    beta: float
    loss: float
    dev_bleu: float
    records: int


def rollin_seed(seed: int, iteration: int, example_index: int) -> int:
    return stable_hash64(seed, "rollin", iteration, example_index)


def rollin(example: ParallelExample, student, beta: float, seed: int, decode_cfg: DecodeConfig | None = None) -> TokenSequence:
    """Reference y with probability beta, else the student's greedy decode."""
    if not 0.0 <= beta <= 1.0:
        raise UsageError(f"beta={beta} outside [0, 1]")
    if make_rng(seed).random() < beta:
        return example.y
    cfg = decode_cfg or DecodeConfig(beam_size=1, t_max=getattr(student, "t_max", 64))
    hyp = greedy_decode_batch(student, [example.x_a], cfg)[0]
    return hyp.to_sequence(ROLE_TRANSLATION)


def _rollin_batch(examples, student, beta: float, cfg: IterationConfig, iteration: int, decode_cfg: DecodeConfig) -> list[TokenSequence]:
    """Batched roll-in; per-example draws match `rollin` given the same seeds."""
    use_ref = [
        make_rng(rollin_seed(cfg.seed, iteration, ex.index)).random() < beta for ex in examples
    ]
    need = [i for i, u in enumerate(use_ref) if not u]
    out: list[TokenSequence | None] = [ex.y if u else None for ex, u in zip(examples, use_ref)]
    if need:
        hyps = greedy_decode_batch(student, [examples[i].x_a for i in need], decode_cfg)
        for i, hyp in zip(need, hyps):
            out[i] = hyp.to_sequence(ROLE_TRANSLATION)
    return out


def _expert_input(example: ParallelExample, oracle_input: str) -> tuple[int, ...]:
    if oracle_input == "gold":
        return example.x_s.body
    if example.x_hat_s is None:
        raise UsageError(
            f"example {example.index} has no synthetic transcript; "
            "transcribe the corpus with the recognizer first"
        )
    return example.x_hat_s.body


def expert_step_distributions(expert, expert_inputs, rolled) -> list[np.ndarray]:
    """Expert next-token distributions along each rolled-in sequence.

    One teacher-forced pass; returns, per example, an array of shape
    (len(rolled.ids), V) whose row t-1 conditions on rolled.ids[:t-1].
    """
    src = pad_rows([tuple(x) + (EOS,) for x in expert_inputs])
    dec_in = pad_rows([(BOS,) + tuple(r.ids[:-1]) for r in rolled])
    logits, _ = expert.forward_sequence(src, dec_in)
    probs = softmax(logits)
    return [probs[i, : len(r.ids)] for i, r in enumerate(rolled)]


def collect_dagger(examples, student, expert, cfg: IterationConfig, beta: float, iteration: int = 1) -> list[DaggerRecord]:
    """Expert-labeled records along roll-ins, one per sequence position.

    For a rolled-in sequence of length L (end token included) this yields
    records t = 1..L whose prefixes grow one token at a time.
    """
    decode_cfg = DecodeConfig(beam_size=1, t_max=getattr(student, "t_max", 64))
    rolled = _rollin_batch(examples, student, beta, cfg, iteration, decode_cfg)
    expert_inputs = [_expert_input(ex, cfg.oracle_input) for ex in examples]
    dists = expert_step_distributions(expert, expert_inputs, rolled)
    records: list[DaggerRecord] = []
    for ex, seq, dist in zip(examples, rolled, dists):
        ids = seq.ids
        for t in range(1, len(ids) + 1):
            row = dist[t - 1]
            if cfg.target_mode == "argmax":
                rec = DaggerRecord(
                    x=ex.x_a.body, prefix=ids[: t - 1], target_id=int(np.argmax(row)),
                    example_index=ex.index, t=t,
                )
            else:
                rec = DaggerRecord(
                    x=ex.x_a.body, prefix=ids[: t - 1], target_dist=row,
                    example_index=ex.index, t=t,
                )
            records.append(rec)
    return records


def collect_aggrevate(examples, student, expert, cfg: IterationConfig, beta: float, iteration: int = 1) -> list[AggrevateRecord]:
    """One explored action per example with its completion reward-to-go."""
    decode_cfg = DecodeConfig(beam_size=1, t_max=getattr(student, "t_max", 64))
    rolled = _rollin_batch(examples, student, beta, cfg, iteration, decode_cfg)
    # uniform exploration step per example
    steps = []
    for ex, seq in zip(examples, rolled):
        rng = make_rng(stable_hash64(cfg.seed, "explore", iteration, ex.index))
        steps.append(int(rng.integers(1, len(seq.ids) + 1)))
    # student argmax action at the sampled step (PAD/BOS are not actions)
    src = pad_rows([ex.x_a.body + (EOS,) for ex in examples])
    dec_in = pad_rows([(BOS,) + seq.ids[:-1] for seq in rolled])
    logits, _ = student.forward_sequence(src, dec_in)
    actions = []
    for i, t in enumerate(steps):
        row = logits[i, t - 1].copy()
        row[PAD] = -np.inf
        row[BOS] = -np.inf
        actions.append(int(np.argmax(row)))
    # expert completion of prefix + action
    prefixes = [seq.ids[: t - 1] for seq, t in zip(rolled, steps)]
    completion_cfg = DecodeConfig(beam_size=cfg.oracle_beam, t_max=getattr(expert, "t_max", 64))
    expert_inputs = [_expert_input(ex, cfg.oracle_input) for ex in examples]
    hyps = beam_decode_batch(
        expert,
        expert_inputs,
        completion_cfg,
        forced=[p + (a,) for p, a in zip(prefixes, actions)],
    )
    reward_fn = metrics.bleu_reward_to_go if cfg.reward_metric == "bleu" else metrics.ter_reward_to_go
    records = []
    for ex, t, prefix, action, hyp in zip(examples, steps, prefixes, actions, hyps):
        full = hyp.tokens[:-1] if hyp.finished else hyp.tokens
        reward = reward_fn(prefix, full, ex.y.body)
        records.append(
            AggrevateRecord(
                x=ex.x_a.body, prefix=prefix, action=action, reward=float(reward),
                example_index=ex.index, t=t,
            )
        )
    return records


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering a permutation of range(n)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def corpus_hypotheses(policy, examples, decode_cfg: DecodeConfig, input_field: str = "x_a", batch_size: int = 64) -> list[Hypothesis]:
    """Decode a corpus in fixed-size batches (greedy when beam_size is 1)."""
    out: list[Hypothesis] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        xs = [getattr(ex, input_field) for ex in chunk]
        if any(x is None for x in xs):
            raise UsageError(f"examples missing the {input_field} field")
        if decode_cfg.beam_size == 1:
            out.extend(greedy_decode_batch(policy, xs, decode_cfg))
        else:
            out.extend(beam_decode_batch(policy, xs, decode_cfg))
    return out


def dev_bleu(policy, examples, decode_cfg: DecodeConfig, input_field: str = "x_a", ref_field: str = "y") -> float:
    hyps = corpus_hypotheses(policy, examples, decode_cfg, input_field)
    bodies = [h.tokens[:-1] if h.finished else h.tokens for h in hyps]
    return metrics.corpus_bleu(bodies, [getattr(ex, ref_field).body for ex in examples])


def dagger_train(
    student,
    expert,
    train_examples,
    dev_examples,
    schedule: BetaSchedule,
    iterations: int,
    opt_cfg: OptimizerConfig,
    cfg: IterationConfig,
    eval_cfg: DecodeConfig | None = None,
    patience: int = 10,
    warmup_updates: int = 0,
) -> tuple[object, list[IterationStats]]:
    """Iterated imitation training; one optimization epoch per iteration.

    Returns the student at its development-best iteration plus per-iteration
    statistics (unchanged with an empty stats list when iterations is 0).
    Stops early after `patience` iterations without improvement. Aborts
    (with the student rolled back to the last completed iteration) if a loss
    or gradient turns non-finite. A positive `warmup_updates` switches the
    learning rate from constant to inverse_sqrt_lr.
    """
    if iterations < 0:
        raise UsageError("iterations must be non-negative")
    if not train_examples:
        raise UsageError("empty training corpus")
    eval_cfg = eval_cfg or DecodeConfig(beam_size=5, t_max=getattr(student, "t_max", 64))
    loss_fn = ikd_loss if cfg.target_mode == "argmax" else ikd_plus_loss
    optimizer = AdamOptimizer(opt_cfg, student.parameters())
    best = None
    best_bleu = -1.0
    bad_iterations = 0
    update = 0
    stats: list[IterationStats] = []
    for i in range(1, iterations + 1):
        beta = schedule.beta(i)
        snapshot = {k: v.copy() for k, v in student.parameters().items()}
        loss_sum = 0.0
        n_records = 0
        try:
            rng = make_rng(cfg.seed, "order", i)
            for idx in shuffled_batches(len(train_examples), cfg.batch_size, rng):
                batch = [train_examples[j] for j in idx]
                records = collect_dagger(batch, student, expert, cfg, beta, iteration=i)
                loss, grads = loss_fn(student, records)
                update += 1
                if warmup_updates > 0:
                    optimizer.cfg = replace(
                        opt_cfg, learning_rate=inverse_sqrt_lr(opt_cfg.learning_rate, update, warmup_updates)
                    )
                apply_update(student, grads, optimizer)
                loss_sum += loss * len(records)
                n_records += len(records)
        except TrainingError:
            params = student.parameters()
            for k, v in snapshot.items():
                params[k][...] = v
            raise
        bleu = dev_bleu(student, dev_examples, eval_cfg) if dev_examples else 0.0
        stats.append(IterationStats(iteration=i, beta=beta, loss=loss_sum / max(1, n_records), dev_bleu=bleu, records=n_records))
        if dev_examples:
            if bleu > best_bleu:
                best_bleu = bleu
                best = {k: v.copy() for k, v in student.parameters().items()}
                bad_iterations = 0
            else:
                bad_iterations += 1
                if bad_iterations >= patience:
                    break
    if best is not None:
        params = student.parameters()
        for k, v in best.items():
            params[k][...] = v
    return student, stats


def aggrevate_train(
    student,
    expert,
    train_examples,
    dev_examples,
    schedule: BetaSchedule,
    epochs: int,
    opt_cfg: OptimizerConfig,
    cfg: IterationConfig,
    eval_cfg: DecodeConfig | None = None,
    patience: int = 10,
    warmup_updates: int = 0,
) -> tuple[object, list[IterationStats]]:
    """Cost-regression fine-tuning from a warm-started student.

    Keeps the development-best parameters (the warm start counts as the
    epoch-0 candidate) and stops early after `patience` epochs without
    improvement. A positive `warmup_updates` switches the learning rate from
    constant to inverse_sqrt_lr.
    """
    if not 1 <= epochs <= 50:
        raise UsageError("epochs must lie in [1, 50]")
    if not train_examples:
        raise UsageError("empty training corpus")
    eval_cfg = eval_cfg or DecodeConfig(beam_size=5, t_max=getattr(student, "t_max", 64))
    optimizer = AdamOptimizer(opt_cfg, student.parameters())
    best = {k: v.copy() for k, v in student.parameters().items()}
    best_bleu = dev_bleu(student, dev_examples, eval_cfg) if dev_examples else -1.0
    bad_epochs = 0
    update = 0
    stats: list[IterationStats] = []
    for i in range(1, epochs + 1):
        beta = schedule.beta(i)
        loss_sum = 0.0
        n_records = 0
        rng = make_rng(cfg.seed, "order", i)
        for idx in shuffled_batches(len(train_examples), cfg.batch_size, rng):
            batch = [train_examples[j] for j in idx]
            records = collect_aggrevate(batch, student, expert, cfg, beta, iteration=i)
            loss, grads = aggrevate_loss(student, records)
            update += 1
            if warmup_updates > 0:
                optimizer.cfg = replace(
                    opt_cfg, learning_rate=inverse_sqrt_lr(opt_cfg.learning_rate, update, warmup_updates)
                )
            apply_update(student, grads, optimizer)
            loss_sum += loss * len(records)
            n_records += len(records)
        bleu = dev_bleu(student, dev_examples, eval_cfg) if dev_examples else 0.0
        stats.append(IterationStats(iteration=i, beta=beta, loss=loss_sum / max(1, n_records), dev_bleu=bleu, records=n_records))
        if dev_examples:
            if bleu > best_bleu:
                best_bleu = bleu
                best = {k: v.copy() for k, v in student.parameters().items()}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= patience:
                    break
    params = student.parameters()
    for k, v in best.items():
        params[k][...] = v
    return student, stats
