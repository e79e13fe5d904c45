"""Experiment orchestration: config files, pretraining, variants, reports.

Everything an experiment produces lives under one working directory:

    corpus.tsv                      generated task data
    corpus_synth.tsv                same corpus with recognizer transcripts
    expert.ckpt / asr.ckpt          pretrained models
    <variant>.ckpt                  trained translation students
    <name>_iters.tsv                per-iteration training statistics
    <name>_scores.tsv               corpus scores per split
    <name>_<split>_stats.tsv        per-sentence statistics for significance
    <name>_meta.txt                 wall time and run metadata (never compared)
    feasibility.tsv, report.tsv, report.md, distilled_<source>.tsv

Every score file is a deterministic function of (config, seed): rerunning a
command with the same inputs rewrites byte-identical files. Wall times go to
the _meta.txt sidecars only, so they never break that property.
"""

from __future__ import annotations

import configparser
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .corpus import (
    AcousticLexicon,
    ParallelExample,
    TaskSpec,
    acoustic_vocabulary,
    build_acoustic_lexicon,
    generate_corpus,
    load_corpus,
    save_corpus,
)
from .decode import DecodeConfig, beam_decode_batch, greedy_decode_batch
from .imitation import (
    BetaSchedule,
    IterationConfig,
    IterationStats,
    aggrevate_train,
    corpus_hypotheses,
    dagger_train,
    dev_bleu,
    shuffled_batches,
)
from .metrics import BleuStats
from .nnet import PolicyHyper
from .policy import (
    AdamOptimizer,
    NeuralSeq2SeqPolicy,
    OptimizerConfig,
    apply_update,
    load_checkpoint,
    save_checkpoint,
    smoothed_ce_loss,
    warm_start_encoder,
)
from .util import DataError, TrainingError, UsageError, make_rng, sha256_hex, stable_hash64
from .vocab import ROLE_TRANSCRIPT, ROLE_TRANSLATION, TokenSequence, Vocabulary

logger = logging.getLogger(__name__)

VARIANTS = (
    "standard",
    "kd_plus",
    "synthkd_plus",
    "ikd",
    "ikd_plus",
    "synthikd",
    "synthikd_plus",
    "aggrevate",
)
SPLITS = ("train", "dev", "test")

# variant -> (trainer, target_mode, oracle_input, reference_rollins_only)
_VARIANT_TABLE = {
    "standard": ("ce", None, None, False),
    "kd_plus": ("dagger", "distribution", "gold", True),
    "synthkd_plus": ("dagger", "distribution", "synthetic", True),
    "ikd": ("dagger", "argmax", "gold", False),
    "ikd_plus": ("dagger", "distribution", "gold", False),
    "synthikd": ("dagger", "argmax", "synthetic", False),
    "synthikd_plus": ("dagger", "distribution", "synthetic", False),
    "aggrevate": ("aggrevate", None, "gold", False),
}

DEFAULT_CONFIG = {
    "task": {
        "seed": "7",
        "n_source": "64",
        "n_target": "72",
        "min_len": "3",
        "max_len": "12",
        "fertility2_fraction": "0.25",
        "n_acoustic": "48",
        "homophone_fraction": "0.5",
        "shared_weight": "4",
        "corpus_size": "25000",
        "corpus_seed": "11",
    },
    "model": {
        "embed_dim": "32",
        "hidden_dim": "64",
        "expert_embed_dim": "48",
        "expert_hidden_dim": "96",
        "t_max": "64",
    },
    "training": {
        "seed": "1",
        "batch_size": "64",
        "learning_rate": "0.002",
        "clip_norm": "10.0",
        "label_smoothing": "0.1",
        "epochs": "3",
        "iterations": "12",
        "warmup_updates": "0",
        "patience": "10",
        "beta_kind": "exponential",
        "beta_value": "1.0",
        "final_beta": "0.05",
        "reward_metric": "bleu",
        "oracle_beam": "5",
        "aggrevate_epochs": "5",
        "aggrevate_learning_rate": "0.0005",
        "warm_start_variant": "ikd_plus",
        "warm_start_encoder": "true",
        "expert_epochs": "14",
        "expert_accuracy_gate": "0.99",
        "asr_epochs": "8",
        "wer_band_low": "0.10",
        "wer_band_high": "0.35",
    },
    "decode": {
        "beam_size": "5",
        "length_norm": "0.0",
    },
    "report": {
        "baseline": "standard",
        "trials": "10000",
        "seed": "0",
    },
    "paths": {
        "workdir": "runs/default",
        "corpus_file": "corpus.tsv",
        "tag": "",
    },
}


# --- configuration ------------------------------------------------------------


def default_config() -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.read_dict(DEFAULT_CONFIG)
    return cfg


def load_config(path=None, overrides=()) -> configparser.ConfigParser:
    """Defaults, optionally overlaid with an INI file and `section.key=value` pairs."""
    cfg = default_config()
    if path is not None:
        if not Path(path).exists():
            raise UsageError(f"config file {path} does not exist")
        try:
            with open(path, encoding="utf-8") as f:
                cfg.read_file(f)
        except configparser.Error as e:
            raise UsageError(f"cannot parse config {path}: {e}") from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        section, option = key.split(".", 1)
        if section not in cfg or option not in cfg[section]:
            raise UsageError(f"unknown config entry {section}.{option}")
        cfg[section][option] = value
    return cfg


def config_hash(cfg: configparser.ConfigParser) -> str:
    """Digest of every non-path setting; identifies the experiment."""
    lines = [
        f"{section}.{option}={cfg[section][option]}"
        for section in sorted(cfg.sections())
        if section != "paths"
        for option in sorted(cfg[section])
    ]
    return sha256_hex("\n".join(lines).encode("utf-8"))[:12]


def split_of(index: int) -> str:
    """Deterministic 80/10/10 split by hash of the example index."""
    bucket = stable_hash64("split", index) % 10
    if bucket < 8:
        return "train"
    return "dev" if bucket == 8 else "test"


def split_corpus(examples) -> dict[str, list[ParallelExample]]:
    out: dict[str, list[ParallelExample]] = {name: [] for name in SPLITS}
    for ex in examples:
        out[split_of(ex.index)].append(ex)
    return out


# --- experiment context ---------------------------------------------------------


@dataclass
class Experiment:
    """Config plus the derived task objects and workdir layout."""

    cfg: configparser.ConfigParser
    spec: TaskSpec
    lexicon: AcousticLexicon
    src_vocab: Vocabulary
    ac_vocab: Vocabulary
    tgt_vocab: Vocabulary
    workdir: Path

    @classmethod
    def from_config(cls, cfg: configparser.ConfigParser) -> "Experiment":
        task = cfg["task"]
        spec = TaskSpec.generate(
            seed=task.getint("seed"),
            n_source=task.getint("n_source"),
            n_target=task.getint("n_target"),
            min_len=task.getint("min_len"),
            max_len=task.getint("max_len"),
            fertility2_fraction=task.getfloat("fertility2_fraction"),
        )
        lexicon = build_acoustic_lexicon(
            spec,
            n_acoustic=task.getint("n_acoustic"),
            homophone_fraction=task.getfloat("homophone_fraction"),
            shared_weight=task.getint("shared_weight"),
        )
        workdir = Path(cfg["paths"]["workdir"])
        workdir.mkdir(parents=True, exist_ok=True)
        return cls(
            cfg=cfg,
            spec=spec,
            lexicon=lexicon,
            src_vocab=spec.source_vocabulary(),
            ac_vocab=acoustic_vocabulary(task.getint("n_acoustic")),
            tgt_vocab=spec.target_vocabulary(),
            workdir=workdir,
        )

    # -- paths --

    def corpus_path(self) -> Path:
        return self.workdir / self.cfg["paths"]["corpus_file"]

    def synth_corpus_path(self) -> Path:
        return self.corpus_path().with_name(self.corpus_path().stem + "_synth.tsv")

    def run_name(self, base: str) -> str:
        tag = self.cfg["paths"]["tag"].strip()
        return f"{base}_{tag}" if tag else base

    def checkpoint_path(self, name: str) -> Path:
        return self.workdir / f"{name}.ckpt"

    def scores_path(self, name: str) -> Path:
        return self.workdir / f"{name}_scores.tsv"

    def stats_path(self, name: str, split: str) -> Path:
        return self.workdir / f"{name}_{split}_stats.tsv"

    def iters_path(self, name: str) -> Path:
        return self.workdir / f"{name}_iters.tsv"

    def meta_path(self, name: str) -> Path:
        return self.workdir / f"{name}_meta.txt"

    # -- typed config access --

    def hash(self) -> str:
        return config_hash(self.cfg)

    def decode_config(self, beam_size: int | None = None) -> DecodeConfig:
        return DecodeConfig(
            beam_size=self.cfg["decode"].getint("beam_size") if beam_size is None else beam_size,
            t_max=self.cfg["model"].getint("t_max"),
            length_norm=self.cfg["decode"].getfloat("length_norm"),
        )

    def optimizer_config(self, learning_rate: float | None = None) -> OptimizerConfig:
        tr = self.cfg["training"]
        return OptimizerConfig(
            learning_rate=tr.getfloat("learning_rate") if learning_rate is None else learning_rate,
            clip_norm=tr.getfloat("clip_norm"),
        )

    def vocab_for_channel(self, channel: str) -> Vocabulary:
        return {"acoustic": self.ac_vocab, "transcript": self.src_vocab, "translation": self.tgt_vocab}[channel]

    def hyper(self, input_channel: str, output_channel: str, wide: bool = False) -> PolicyHyper:
        model = self.cfg["model"]
        prefix = "expert_" if wide else ""
        return PolicyHyper(
            src_vocab_size=len(self.vocab_for_channel(input_channel)),
            tgt_vocab_size=len(self.vocab_for_channel(output_channel)),
            embed_dim=model.getint(prefix + "embed_dim"),
            hidden_dim=model.getint(prefix + "hidden_dim"),
            input_channel=input_channel,
            output_channel=output_channel,
            t_max=model.getint("t_max"),
        )

    def new_policy(self, input_channel: str, output_channel: str, wide: bool, init_key: str) -> NeuralSeq2SeqPolicy:
        return NeuralSeq2SeqPolicy.create(
            self.hyper(input_channel, output_channel, wide=wide),
            seed=stable_hash64(self.cfg["training"].getint("seed"), "init", init_key),
            src_vocab_hash=self.vocab_for_channel(input_channel).content_hash(),
            tgt_vocab_hash=self.vocab_for_channel(output_channel).content_hash(),
        )

    # -- corpus --

    def generate(self) -> Path:
        task = self.cfg["task"]
        examples = generate_corpus(
            self.spec, task.getint("corpus_size"), task.getint("corpus_seed"), lexicon=self.lexicon
        )
        save_corpus(self.corpus_path(), examples, self.src_vocab, self.ac_vocab, self.tgt_vocab)
        return self.corpus_path()

    def load_examples(self, path: Path | None = None) -> list[ParallelExample]:
        path = path or self.corpus_path()
        if not path.exists():
            raise UsageError(f"corpus {path} does not exist; run gen-data first")
        return load_corpus(path, self.src_vocab, self.ac_vocab, self.tgt_vocab)

    def corpus_hash(self, path: Path | None = None) -> str:
        path = path or self.corpus_path()
        if not path.exists():
            raise UsageError(f"corpus {path} does not exist; run gen-data first")
        return sha256_hex(path.read_bytes())[:12]

    def load_policy(self, name: str, expect_channels: tuple[str, str] | None = None) -> NeuralSeq2SeqPolicy:
        path = self.checkpoint_path(name)
        if not path.exists():
            raise UsageError(f"checkpoint {path} does not exist; train it first")
        policy, _, _ = load_checkpoint(path)
        self.check_vocab_hashes(policy, str(path))
        if expect_channels is not None and (
            policy.hyper.input_channel,
            policy.hyper.output_channel,
        ) != expect_channels:
            raise UsageError(
                f"checkpoint {path} maps {policy.hyper.input_channel} to "
                f"{policy.hyper.output_channel}, expected {expect_channels[0]} to {expect_channels[1]}"
            )
        return policy

    def check_vocab_hashes(self, policy: NeuralSeq2SeqPolicy, origin: str) -> None:
        want_src = self.vocab_for_channel(policy.hyper.input_channel).content_hash()
        want_tgt = self.vocab_for_channel(policy.hyper.output_channel).content_hash()
        if policy.src_vocab_hash and policy.src_vocab_hash != want_src:
            raise UsageError(f"{origin}: source vocabulary differs from the configured task")
        if policy.tgt_vocab_hash and policy.tgt_vocab_hash != want_tgt:
            raise UsageError(f"{origin}: target vocabulary differs from the configured task")


# --- small file formats -----------------------------------------------------------


@dataclass(frozen=True)
class ScoreRow:
    variant: str
    split: str
    bleu: float
    ter: float
    wer: float
    n: int
    corpus_hash: str
    config_hash: str


SCORE_HEADER = "variant\tsplit\tbleu\tter\twer\tn\tcorpus_hash\tconfig_hash"


def write_score_rows(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(SCORE_HEADER + "\n")
        for r in rows:
            f.write(
                f"{r.variant}\t{r.split}\t{r.bleu:.4f}\t{r.ter:.4f}\t{r.wer:.4f}"
                f"\t{r.n}\t{r.corpus_hash}\t{r.config_hash}\n"
            )


def read_score_rows(path) -> list[ScoreRow]:
    rows = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != SCORE_HEADER:
            raise DataError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(f, start=2):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 8:
                raise DataError(f"{path}:{lineno}: expected 8 fields")
            rows.append(
                ScoreRow(
                    variant=fields[0],
                    split=fields[1],
                    bleu=float(fields[2]),
                    ter=float(fields[3]),
                    wer=float(fields[4]),
                    n=int(fields[5]),
                    corpus_hash=fields[6],
                    config_hash=fields[7],
                )
            )
    return rows


def write_sentence_stats(path, stats: list[BleuStats]) -> None:
    rows = np.stack([s.as_row() for s in stats]).astype(np.int64)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write("\t".join(str(int(v)) for v in row) + "\n")


def read_sentence_stats(path) -> list[BleuStats]:
    stats = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            vals = [int(v) for v in line.split()]
            if len(vals) != 10:
                raise DataError(f"{path}:{lineno}: expected 10 integers")
            stats.append(BleuStats(tuple(vals[0:4]), tuple(vals[4:8]), vals[8], vals[9]))
    return stats


def write_iteration_stats(path, stats: list[IterationStats]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("iter\tbeta\tloss\tdev_bleu\trecords\n")
        for s in stats:
            f.write(f"{s.iteration}\t{s.beta:.6f}\t{s.loss:.6f}\t{s.dev_bleu:.4f}\t{s.records}\n")


def write_meta(path, exp: Experiment, wall_seconds: float, extra: dict | None = None) -> None:
    """Run metadata sidecar; the only output file that is not deterministic."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"wall_seconds={wall_seconds:.3f}\n")
        f.write(f"config_hash={exp.hash()}\n")
        for k, v in (extra or {}).items():
            f.write(f"{k}={v}\n")


# --- decoding and evaluation ------------------------------------------------------


def _input_field(policy) -> str:
    return {"acoustic": "x_a", "transcript": "x_s"}[policy.hyper.input_channel]


def _ref_field(policy) -> str:
    return {"translation": "y", "transcript": "x_s"}[policy.hyper.output_channel]


def decode_bodies(policy, examples, decode_cfg: DecodeConfig, input_field: str, batch_size: int = 64) -> list[tuple[int, ...]]:
    hyps = corpus_hypotheses(policy, examples, decode_cfg, input_field, batch_size=batch_size)
    return [h.tokens[:-1] if h.finished else h.tokens for h in hyps]


def evaluate_policy(policy, examples, decode_cfg: DecodeConfig, batch_size: int = 64):
    """Decode a split and score it: (bleu, ter, wer, per-sentence BleuStats)."""
    if not examples:
        raise UsageError("cannot evaluate an empty split")
    bodies = decode_bodies(policy, examples, decode_cfg, _input_field(policy), batch_size)
    refs = [getattr(ex, _ref_field(policy)).body for ex in examples]
    bleu = metrics.corpus_bleu(bodies, refs)
    ter = metrics.corpus_ter(bodies, refs)
    wer = metrics.corpus_wer(bodies, refs)
    stats = [metrics.sentence_stats(b, r) for b, r in zip(bodies, refs)]
    return bleu, ter, wer, stats


def evaluate_to_files(exp: Experiment, name: str, policy, splits_wanted=("dev", "test"), corpus_path: Path | None = None) -> list[ScoreRow]:
    """Evaluate a policy on corpus splits and write scores + sentence stats."""
    examples = exp.load_examples(corpus_path)
    chash = exp.corpus_hash(corpus_path)
    parts = split_corpus(examples)
    batch = exp.cfg["training"].getint("batch_size")
    rows = []
    for split in splits_wanted:
        if split not in SPLITS:
            raise UsageError(f"unknown split {split!r}")
        bleu, ter, wer, stats = evaluate_policy(policy, parts[split], exp.decode_config(), batch)
        rows.append(
            ScoreRow(
                variant=name, split=split, bleu=bleu, ter=ter, wer=wer,
                n=len(parts[split]), corpus_hash=chash, config_hash=exp.hash(),
            )
        )
        write_sentence_stats(exp.stats_path(name, split), stats)
    write_score_rows(exp.scores_path(name), rows)
    return rows


def sentence_accuracy(policy, examples, decode_cfg: DecodeConfig, batch_size: int = 64) -> float:
    """Fraction of examples whose greedy decode matches the reference exactly."""
    if not examples:
        raise UsageError("cannot score an empty split")
    bodies = decode_bodies(policy, examples, decode_cfg, _input_field(policy), batch_size)
    refs = [getattr(ex, _ref_field(policy)).body for ex in examples]
    return sum(b == r for b, r in zip(bodies, refs)) / len(examples)


# --- supervised training -----------------------------------------------------------


def supervised_train(
    student,
    train_examples,
    dev_examples,
    *,
    epochs: int,
    opt_cfg: OptimizerConfig,
    batch_size: int,
    seed: int,
    label_smoothing: float,
    patience: int = 10,
) -> tuple[object, list[IterationStats]]:
    """Teacher-forced cross-entropy training with development-best retention.

    Input and reference fields follow the student's channels, so the same
    loop trains the expert, the recognizer, and the standard baseline.
    """
    if epochs < 1:
        raise UsageError("need at least one epoch")
    if not train_examples:
        raise UsageError("empty training corpus")
    input_field, ref_field = _input_field(student), _ref_field(student)
    eval_cfg = DecodeConfig(beam_size=1, t_max=student.t_max)
    optimizer = AdamOptimizer(opt_cfg, student.parameters())
    best = {k: v.copy() for k, v in student.parameters().items()}
    best_bleu = -1.0
    bad_epochs = 0
    stats: list[IterationStats] = []
    for epoch in range(1, epochs + 1):
        loss_sum = 0.0
        n_examples = 0
        rng = make_rng(seed, "order", epoch)
        for idx in shuffled_batches(len(train_examples), batch_size, rng):
            batch = [train_examples[j] for j in idx]
            pairs = [(getattr(ex, input_field), getattr(ex, ref_field)) for ex in batch]
            loss, grads = smoothed_ce_loss(student, pairs, epsilon=label_smoothing)
            apply_update(student, grads, optimizer)
            loss_sum += loss * len(batch)
            n_examples += len(batch)
        bleu = dev_bleu(student, dev_examples, eval_cfg, input_field, ref_field) if dev_examples else 0.0
        stats.append(
            IterationStats(iteration=epoch, beta=1.0, loss=loss_sum / n_examples, dev_bleu=bleu, records=n_examples)
        )
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


# --- pretraining --------------------------------------------------------------------


def pretrain_expert(exp: Experiment) -> Path:
    """Train the translation oracle on clean transcripts and gate its accuracy."""
    t0 = time.perf_counter()
    tr = exp.cfg["training"]
    parts = split_corpus(exp.load_examples())
    expert = exp.new_policy("transcript", "translation", wide=True, init_key="expert")
    expert, stats = supervised_train(
        expert,
        parts["train"],
        parts["dev"],
        epochs=tr.getint("expert_epochs"),
        opt_cfg=exp.optimizer_config(),
        batch_size=tr.getint("batch_size"),
        seed=stable_hash64(tr.getint("seed"), "expert"),
        label_smoothing=tr.getfloat("label_smoothing"),
        patience=tr.getint("patience"),
    )
    gate = tr.getfloat("expert_accuracy_gate")
    accuracy = sentence_accuracy(expert, parts["dev"], DecodeConfig(beam_size=1, t_max=expert.t_max))
    if accuracy < gate:
        raise TrainingError(
            f"expert dev sentence accuracy {accuracy:.4f} below the {gate} gate "
            f"after {stats[-1].iteration} epochs (last dev BLEU {stats[-1].dev_bleu:.2f}); "
            "the downstream experiments need a near-perfect oracle"
        )
    path = exp.checkpoint_path("expert")
    save_checkpoint(path, expert, meta={"role": "expert", "config_hash": exp.hash(), "dev_accuracy": round(accuracy, 6)})
    write_iteration_stats(exp.iters_path("expert"), stats)
    evaluate_to_files(exp, "expert", expert)
    write_meta(exp.meta_path("expert"), exp, time.perf_counter() - t0, {"dev_accuracy": f"{accuracy:.6f}"})
    logger.info("expert dev sentence accuracy %.4f", accuracy)
    return path


def pretrain_asr(exp: Experiment) -> Path:
    """Train the recognizer and report its word error rate."""
    t0 = time.perf_counter()
    tr = exp.cfg["training"]
    parts = split_corpus(exp.load_examples())
    asr = exp.new_policy("acoustic", "transcript", wide=False, init_key="asr")
    asr, stats = supervised_train(
        asr,
        parts["train"],
        parts["dev"],
        epochs=tr.getint("asr_epochs"),
        opt_cfg=exp.optimizer_config(),
        batch_size=tr.getint("batch_size"),
        seed=stable_hash64(tr.getint("seed"), "asr"),
        label_smoothing=tr.getfloat("label_smoothing"),
        patience=tr.getint("patience"),
    )
    path = exp.checkpoint_path("asr")
    save_checkpoint(path, asr, meta={"role": "asr", "config_hash": exp.hash()})
    write_iteration_stats(exp.iters_path("asr"), stats)
    rows = evaluate_to_files(exp, "asr", asr)
    dev_wer = next(r.wer for r in rows if r.split == "dev")
    low, high = tr.getfloat("wer_band_low"), tr.getfloat("wer_band_high")
    if not low <= dev_wer <= high:
        logger.warning(
            "recognizer dev WER %.4f outside the calibration band [%.2f, %.2f]", dev_wer, low, high
        )
    write_meta(exp.meta_path("asr"), exp, time.perf_counter() - t0, {"dev_wer": f"{dev_wer:.4f}"})
    logger.info("recognizer dev WER %.4f", dev_wer)
    return path


# --- synthetic transcripts ------------------------------------------------------------


def ensure_synthetic(exp: Experiment, examples: list[ParallelExample]) -> list[ParallelExample]:
    """Fill in recognizer transcripts (beam decoding), cached as a corpus copy.

    The recognizer is frozen after pretraining, so transcribing once and
    reusing the file is exact. The cache is dropped and rebuilt if its other
    columns no longer match the corpus.
    """
    if all(ex.x_hat_s is not None for ex in examples):
        return examples
    cache = exp.synth_corpus_path()
    if cache.exists():
        cached = load_corpus(cache, exp.src_vocab, exp.ac_vocab, exp.tgt_vocab)
        if len(cached) == len(examples) and all(
            c.x_s == e.x_s and c.x_a == e.x_a and c.y == e.y and c.x_hat_s is not None
            for c, e in zip(cached, examples)
        ):
            for c, e in zip(cached, examples):
                e.x_hat_s = c.x_hat_s
            return examples
        logger.warning("synthetic transcript cache %s does not match the corpus; rebuilding", cache)
    asr = exp.load_policy("asr", expect_channels=("acoustic", "transcript"))
    batch = exp.cfg["training"].getint("batch_size")
    bodies = decode_bodies(asr, examples, exp.decode_config(), "x_a", batch)
    for ex, body in zip(examples, bodies):
        ex.x_hat_s = TokenSequence.from_body(body, role=ROLE_TRANSCRIPT)
    save_corpus(cache, examples, exp.src_vocab, exp.ac_vocab, exp.tgt_vocab)
    return examples


# --- training variants ------------------------------------------------------------------


def _schedule_for(exp: Experiment, variant: str, total: int) -> BetaSchedule:
    if _VARIANT_TABLE[variant][3]:  # reference roll-ins by definition
        return BetaSchedule(kind="constant", value=1.0)
    tr = exp.cfg["training"]
    kind = tr["beta_kind"]
    if kind == "constant":
        return BetaSchedule(kind="constant", value=tr.getfloat("beta_value"))
    if kind == "exponential":
        return BetaSchedule.exponential_for(total, tr.getfloat("final_beta"))
    raise UsageError(f"unknown beta_kind {kind!r}")


def train_variant(exp: Experiment, variant: str) -> Path:
    """Train one student variant end to end and write its score files."""
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    trainer, target_mode, oracle_input, _ = _VARIANT_TABLE[variant]
    t0 = time.perf_counter()
    tr = exp.cfg["training"]
    examples = exp.load_examples()
    parts = split_corpus(examples)
    eval_greedy = DecodeConfig(beam_size=1, t_max=exp.cfg["model"].getint("t_max"))
    name = exp.run_name(variant)

    if trainer == "ce":
        student = exp.new_policy("acoustic", "translation", wide=False, init_key="ast")
        if tr.getboolean("warm_start_encoder"):
            warm_start_encoder(student, exp.load_policy("asr", expect_channels=("acoustic", "transcript")))
        student, stats = supervised_train(
            student,
            parts["train"],
            parts["dev"],
            epochs=tr.getint("epochs"),
            opt_cfg=exp.optimizer_config(),
            batch_size=tr.getint("batch_size"),
            seed=tr.getint("seed"),
            label_smoothing=tr.getfloat("label_smoothing"),
            patience=tr.getint("patience"),
        )
    else:
        expert = exp.load_policy("expert", expect_channels=("transcript", "translation"))
        if oracle_input == "synthetic":
            ensure_synthetic(exp, examples)
        icfg = IterationConfig(
            batch_size=tr.getint("batch_size"),
            oracle_input=oracle_input,
            target_mode=target_mode or "distribution",
            reward_metric=tr["reward_metric"],
            oracle_beam=tr.getint("oracle_beam"),
            seed=tr.getint("seed"),
        )
        if trainer == "dagger":
            student = exp.new_policy("acoustic", "translation", wide=False, init_key="ast")
            if tr.getboolean("warm_start_encoder"):
                warm_start_encoder(student, exp.load_policy("asr", expect_channels=("acoustic", "transcript")))
            iterations = tr.getint("iterations")
            student, stats = dagger_train(
                student,
                expert,
                parts["train"],
                parts["dev"],
                _schedule_for(exp, variant, iterations),
                iterations,
                exp.optimizer_config(),
                icfg,
                eval_cfg=eval_greedy,
                patience=tr.getint("patience"),
                warmup_updates=tr.getint("warmup_updates"),
            )
        else:
            warm_name = exp.run_name(tr["warm_start_variant"])
            student = exp.load_policy(warm_name, expect_channels=("acoustic", "translation"))
            epochs = tr.getint("aggrevate_epochs")
            student, stats = aggrevate_train(
                student,
                expert,
                parts["train"],
                parts["dev"],
                _schedule_for(exp, variant, epochs),
                epochs,
                exp.optimizer_config(tr.getfloat("aggrevate_learning_rate")),
                icfg,
                eval_cfg=eval_greedy,
                patience=tr.getint("patience"),
                warmup_updates=tr.getint("warmup_updates"),
            )

    path = exp.checkpoint_path(name)
    save_checkpoint(path, student, meta={"role": "student", "variant": variant, "config_hash": exp.hash()})
    write_iteration_stats(exp.iters_path(name), stats)
    evaluate_to_files(exp, name, student)
    write_meta(exp.meta_path(name), exp, time.perf_counter() - t0, {"variant": variant})
    return path


# --- feasibility -------------------------------------------------------------------------


def feasibility_eval(exp: Experiment, split: str = "dev") -> list[tuple[str, float]]:
    """Can the expert rescue a student's partial hypotheses?

    Four corpus-BLEU rows on one split: the student alone, the
    recognize-then-translate cascade, and the expert completing student
    prefixes (cut at a uniformly random step) from gold and from synthetic
    transcripts. Greedy decoding throughout.
    """
    if split not in SPLITS:
        raise UsageError(f"unknown split {split!r}")
    t0 = time.perf_counter()
    ast = exp.load_policy(exp.run_name("standard"), expect_channels=("acoustic", "translation"))
    expert = exp.load_policy("expert", expect_channels=("transcript", "translation"))
    examples = exp.load_examples()
    ensure_synthetic(exp, examples)
    part = split_corpus(examples)[split]
    refs = [ex.y.body for ex in part]
    batch = exp.cfg["training"].getint("batch_size")
    greedy = DecodeConfig(beam_size=1, t_max=exp.cfg["model"].getint("t_max"))

    ast_bodies = decode_bodies(ast, part, greedy, "x_a", batch)

    asr = exp.load_policy("asr", expect_channels=("acoustic", "transcript"))
    transcripts = decode_bodies(asr, part, greedy, "x_a", batch)
    cascade_bodies = _translate_bodies(expert, transcripts, greedy, batch)

    cuts = [
        int(make_rng(exp.cfg["training"].getint("seed"), "cut", ex.index).integers(0, len(body) + 1))
        for ex, body in zip(part, ast_bodies)
    ]
    prefixes = [body[:cut] for body, cut in zip(ast_bodies, cuts)]
    gold_bodies = _complete_bodies(expert, [ex.x_s.body for ex in part], prefixes, greedy, batch)
    synth_bodies = _complete_bodies(expert, [ex.x_hat_s.body for ex in part], prefixes, greedy, batch)

    rows = [
        ("ast_greedy", metrics.corpus_bleu(ast_bodies, refs)),
        ("cascade", metrics.corpus_bleu(cascade_bodies, refs)),
        ("completion_gold", metrics.corpus_bleu(gold_bodies, refs)),
        ("completion_synthetic", metrics.corpus_bleu(synth_bodies, refs)),
    ]
    out = exp.workdir / "feasibility.tsv"
    with open(out, "w", encoding="utf-8") as f:
        f.write("row\tsplit\tbleu\tn\n")
        for rname, bleu in rows:
            f.write(f"{rname}\t{split}\t{bleu:.4f}\t{len(part)}\n")
    write_meta(exp.meta_path("feasibility"), exp, time.perf_counter() - t0)
    return rows


def _translate_bodies(policy, input_bodies, decode_cfg, batch_size):
    out = []
    for start in range(0, len(input_bodies), batch_size):
        chunk = input_bodies[start : start + batch_size]
        if decode_cfg.beam_size > 1:
            hyps = beam_decode_batch(policy, chunk, decode_cfg)
        else:
            hyps = greedy_decode_batch(policy, chunk, decode_cfg)
        out.extend(h.tokens[:-1] if h.finished else h.tokens for h in hyps)
    return out


def _complete_bodies(policy, input_bodies, prefixes, decode_cfg, batch_size):
    out = []
    for start in range(0, len(input_bodies), batch_size):
        chunk = input_bodies[start : start + batch_size]
        forced = prefixes[start : start + batch_size]
        hyps = beam_decode_batch(policy, chunk, decode_cfg, forced=forced)
        out.extend(h.tokens[:-1] if h.finished else h.tokens for h in hyps)
    return out


# --- distilled corpora --------------------------------------------------------------------


def build_distilled_corpus(exp: Experiment, source: str) -> Path:
    """Replace every reference with the expert's beam translation.

    `source` selects the expert's input: "gold" transcripts or "synthetic"
    recognizer transcripts. Inputs are left untouched, so the distilled file
    is a drop-in replacement corpus.
    """
    if source not in ("gold", "synthetic"):
        raise UsageError(f"source must be 'gold' or 'synthetic', got {source!r}")
    t0 = time.perf_counter()
    expert = exp.load_policy("expert", expect_channels=("transcript", "translation"))
    examples = exp.load_examples()
    if source == "synthetic":
        ensure_synthetic(exp, examples)
    inputs = [(ex.x_s if source == "gold" else ex.x_hat_s).body for ex in examples]
    batch = exp.cfg["training"].getint("batch_size")
    bodies = _translate_bodies(expert, inputs, exp.decode_config(), batch)
    changed = 0
    distilled = []
    for ex, body in zip(examples, bodies):
        if body != ex.y.body:
            changed += 1
        distilled.append(
            ParallelExample(
                index=ex.index,
                x_s=ex.x_s,
                x_a=ex.x_a,
                y=TokenSequence.from_body(body, role=ROLE_TRANSLATION),
                x_hat_s=ex.x_hat_s,
            )
        )
    out = exp.workdir / f"distilled_{source}.tsv"
    save_corpus(out, distilled, exp.src_vocab, exp.ac_vocab, exp.tgt_vocab)
    info = exp.workdir / f"distilled_{source}_info.tsv"
    with open(info, "w", encoding="utf-8") as f:
        f.write("source\tchanged\ttotal\tchanged_fraction\n")
        f.write(f"{source}\t{changed}\t{len(distilled)}\t{changed / len(distilled):.6f}\n")
    write_meta(exp.meta_path(f"distilled_{source}"), exp, time.perf_counter() - t0)
    logger.info("distilled %s corpus: %d/%d references changed", source, changed, len(distilled))
    return out


# --- reporting ----------------------------------------------------------------------------


def build_report(exp: Experiment, names=None, baseline: str | None = None) -> tuple[str, str]:
    """Collect score files into one table with significance annotations.

    Returns (tsv, markdown). Every non-baseline student row on a split gets a
    p-value from the paired randomization test against the baseline on that
    split; rows are refused if they mix corpus hashes.
    """
    rp = exp.cfg["report"]
    baseline = baseline or rp["baseline"]
    if names is None:
        names = sorted(
            p.name[: -len("_scores.tsv")]
            for p in exp.workdir.glob("*_scores.tsv")
        )
    if not names:
        raise UsageError(f"no score files found under {exp.workdir}")
    all_rows: list[ScoreRow] = []
    for name in names:
        path = exp.scores_path(name)
        if not path.exists():
            raise UsageError(f"no scores for {name!r}; expected {path}")
        all_rows.extend(read_score_rows(path))
    hashes = {r.corpus_hash for r in all_rows}
    if len(hashes) > 1:
        raise UsageError(f"refusing to merge scores from different corpora (hashes {sorted(hashes)})")
    by_name = {r.variant for r in all_rows}
    if baseline not in by_name:
        raise UsageError(f"baseline {baseline!r} has no score rows")

    def is_student_row(name: str) -> bool:
        return any(name == v or name.startswith(v + "_") for v in VARIANTS)

    trials, seed = rp.getint("trials"), rp.getint("seed")
    lines = [f"variant\tsplit\tbleu\tter\twer\tp_vs_{baseline}"]
    md = [
        f"| variant | split | BLEU | TER | WER | p vs {baseline} |",
        "|---|---|---|---|---|---|",
    ]
    for r in sorted(all_rows, key=lambda r: (r.variant, r.split)):
        p_text = "-"
        if r.variant != baseline and is_student_row(r.variant):
            a = exp.stats_path(r.variant, r.split)
            b = exp.stats_path(baseline, r.split)
            if a.exists() and b.exists():
                p = metrics.paired_randomization_test(
                    read_sentence_stats(a),
                    read_sentence_stats(b),
                    trials=trials,
                    seed=stable_hash64(seed, "report", r.variant, r.split),
                )
                p_text = f"{p:.6f}"
        lines.append(f"{r.variant}\t{r.split}\t{r.bleu:.4f}\t{r.ter:.4f}\t{r.wer:.4f}\t{p_text}")
        md.append(f"| {r.variant} | {r.split} | {r.bleu:.2f} | {r.ter:.4f} | {r.wer:.4f} | {p_text} |")

    header = [
        f"config_hash={exp.hash()}",
        f"corpus_hash={next(iter(hashes))}",
        f"baseline={baseline}",
    ]
    tsv = "\n".join(["# " + " ".join(header)] + lines) + "\n"
    markdown = "\n".join([f"**Run** `{exp.hash()}` on corpus `{next(iter(hashes))}`, baseline `{baseline}`.", ""] + md) + "\n"
    return tsv, markdown


def write_report(exp: Experiment, names=None, baseline: str | None = None) -> Path:
    t0 = time.perf_counter()
    tsv, markdown = build_report(exp, names=names, baseline=baseline)
    out = exp.workdir / "report.tsv"
    out.write_text(tsv, encoding="utf-8")
    (exp.workdir / "report.md").write_text(markdown, encoding="utf-8")
    write_meta(exp.meta_path("report"), exp, time.perf_counter() - t0)
    return out
