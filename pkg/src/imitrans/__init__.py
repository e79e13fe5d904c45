"""Imitation-based distillation on a synthetic speech translation task."""

__version__ = "0.1.0"

from .corpus import (
    NoiseChannelConfig,
    ParallelExample,
    TaskSpec,
    apply_mapping,
    build_acoustic_lexicon,
    corrupt_transcript,
    generate_corpus,
    load_corpus,
    render_acoustic,
    save_corpus,
)
from .decode import (
    DecodeConfig,
    Hypothesis,
    beam_decode,
    beam_decode_batch,
    greedy_decode,
    greedy_decode_batch,
    oracle_continuation,
    oracle_next_token,
    topk_inspect,
)
from .imitation import (
    AggrevateRecord,
    BetaSchedule,
    DaggerRecord,
    IterationConfig,
    IterationStats,
    aggrevate_train,
    collect_aggrevate,
    collect_dagger,
    dagger_train,
    rollin,
)
from .metrics import (
    corpus_bleu,
    corpus_ter,
    corpus_wer,
    edit_distance,
    paired_randomization_test,
    sentence_bleu,
    ter,
    wer,
)
from .policy import (
    AdamOptimizer,
    NeuralSeq2SeqPolicy,
    OptimizerConfig,
    TabularPolicy,
    aggrevate_loss,
    average_checkpoints,
    gradient_check,
    ikd_loss,
    ikd_plus_loss,
    kd_plus_loss,
    load_checkpoint,
    save_checkpoint,
    smoothed_ce_loss,
    warm_start_encoder,
)
from .util import DataError, TrainingError, UsageError
from .vocab import BOS, EOS, PAD, UNK, TokenSequence, Vocabulary
