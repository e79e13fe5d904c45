"""Policies, training losses, optimizer, and checkpoints.

Two policy flavors share one incremental-decoding protocol
(`start_batch(xs) -> (state, logits)`, `advance(state, tokens)`,
`state.gather(rows)`):

  NeuralSeq2SeqPolicy  the numpy GRU encoder/decoder from `nnet`;
  TabularPolicy        an explicit probability table, used for exact decode
                       tests and tiny worked examples.

All sequence-level losses reduce to one teacher-forced core: a forward pass
over (source, decoder-input) matrices, a per-position cross entropy against
either token ids or full distributions, and the matching analytic gradient.
The loss value is the mean over scored positions. Training records that form
prefix chains of one rolled-in sequence are folded into a single decoder row,
so a pass over a record set costs the same as a teacher-forced batch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import nnet
from .nnet import ENCODER_PARAMS, PARAM_ORDER, PolicyHyper, log_softmax, pad_rows, sigmoid
from .util import DataError, TrainingError, UsageError
from .vocab import BOS, EOS, PAD, TokenSequence

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "imitrans-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PolicyOutput:
    """Next-token scores: raw logits and their log-softmax."""

    logits: np.ndarray
    log_probs: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def argmax(self) -> int:
        """Highest-probability token, lowest index on ties."""
        return int(np.argmax(self.logits))


class NeuralSeq2SeqPolicy:
    """Attention seq2seq over token ids; float64 parameters throughout."""

    def __init__(self, hyper: PolicyHyper, params: dict, src_vocab_hash: str = "", tgt_vocab_hash: str = ""):
        self.hyper = hyper
        self.params = params
        self.src_vocab_hash = src_vocab_hash
        self.tgt_vocab_hash = tgt_vocab_hash

    @classmethod
    def create(cls, hyper: PolicyHyper, seed: int, src_vocab_hash: str = "", tgt_vocab_hash: str = "") -> "NeuralSeq2SeqPolicy":
        return cls(hyper, nnet.init_params(hyper, seed), src_vocab_hash, tgt_vocab_hash)

    @property
    def vocab_size(self) -> int:
        return self.hyper.tgt_vocab_size

    @property
    def t_max(self) -> int:
        return self.hyper.t_max

    def parameters(self) -> dict:
        return self.params

    def clone(self) -> "NeuralSeq2SeqPolicy":
        return NeuralSeq2SeqPolicy(
            self.hyper, {k: v.copy() for k, v in self.params.items()}, self.src_vocab_hash, self.tgt_vocab_hash
        )

    def forward_sequence(self, X: np.ndarray, Y_in: np.ndarray):
        return nnet.forward_sequence(self.params, self.hyper, X, Y_in)

    def backward_sequence(self, cache, dlogits: np.ndarray) -> dict:
        return nnet.backward_sequence(self.params, self.hyper, cache, dlogits)

    def start_batch(self, xs):
        """xs: iterable of source bodies (no EOS); EOS is appended here."""
        rows = []
        for x in xs:
            body = tuple(int(i) for i in x)
            for i in body:
                if not 0 <= i < self.hyper.src_vocab_size:
                    raise UsageError(f"source id {i} out of vocabulary")
            rows.append(body + (EOS,))
        return nnet.start_batch(self.params, self.hyper, rows)

    def advance(self, state, tokens):
        return nnet.advance(self.params, self.hyper, state, tokens)


class _TabularState:
    __slots__ = ("x_keys", "prefixes")

    def __init__(self, x_keys, prefixes):
        self.x_keys = x_keys
        self.prefixes = prefixes

    def gather(self, rows) -> "_TabularState":
        return _TabularState([self.x_keys[i] for i in rows], [self.prefixes[i] for i in rows])

    @property
    def rows(self) -> int:
        return len(self.x_keys)


class TabularPolicy:
    """Probability table keyed by (input tokens, prefix tokens).

    Rows are length-V probability vectors; a lookup miss falls back to the
    default row. No trainable parameters.
    """

    def __init__(self, vocab_size: int, rows: dict | None = None, default: np.ndarray | None = None, t_max: int = 64):
        self.hyper_vocab = int(vocab_size)
        if default is None:
            default = np.full(vocab_size, 1.0 / vocab_size)
        self.default = self._check_row(np.asarray(default, dtype=np.float64))
        self.rows = {}
        for key, row in (rows or {}).items():
            x_key, prefix = key
            self.rows[(tuple(x_key), tuple(prefix))] = self._check_row(np.asarray(row, dtype=np.float64))
        self.t_max = t_max

    def _check_row(self, row: np.ndarray) -> np.ndarray:
        if row.shape != (self.hyper_vocab,):
            raise UsageError(f"probability row has shape {row.shape}, want ({self.hyper_vocab},)")
        if (row < 0).any() or abs(float(row.sum()) - 1.0) > 1e-6:
            raise UsageError("probability row must be non-negative and sum to 1")
        return row

    @property
    def vocab_size(self) -> int:
        return self.hyper_vocab

    def parameters(self) -> dict:
        return {}

    def _row(self, x_key, prefix) -> np.ndarray:
        return self.rows.get((x_key, prefix), self.default)

    def _logits(self, state: _TabularState) -> np.ndarray:
        out = np.empty((state.rows, self.hyper_vocab))
        for i, (xk, pf) in enumerate(zip(state.x_keys, state.prefixes)):
            with np.errstate(divide="ignore"):
                out[i] = np.log(self._row(xk, pf))
        return out

    def start_batch(self, xs):
        state = _TabularState([tuple(int(i) for i in x) for x in xs], [() for _ in xs])
        return state, self._logits(state)

    def advance(self, state: _TabularState, tokens):
        prefixes = [
            pf if int(t) == PAD else pf + (int(t),)
            for pf, t in zip(state.prefixes, tokens)
        ]
        new = _TabularState(list(state.x_keys), prefixes)
        return new, self._logits(new)

    def forward_sequence(self, X: np.ndarray, Y_in: np.ndarray):
        """Teacher-forced table lookups, cache-free.

        X rows follow the encoder convention (body, end token, padding), so
        the body before the end token is the lookup key, matching
        start_batch. Y_in rows are begin-of-sequence plus the forced prefix.
        """
        B, Td = Y_in.shape
        logits = np.empty((B, Td, self.hyper_vocab))
        for b in range(B):
            xs = [int(t) for t in X[b]]
            body = tuple(xs[: xs.index(EOS)]) if EOS in xs else tuple(t for t in xs if t != PAD)
            for t in range(Td):
                prefix = tuple(int(v) for v in Y_in[b, 1 : t + 1] if int(v) != PAD)
                with np.errstate(divide="ignore"):
                    logits[b, t] = np.log(self._row(body, prefix))
        return logits, None


def next_token_distribution(policy, x, prefix) -> PolicyOutput:
    """Distribution over the next target token given a source and a prefix."""
    x_body = x.body if isinstance(x, TokenSequence) else tuple(int(i) for i in x)
    prefix = prefix.body if isinstance(prefix, TokenSequence) else tuple(int(i) for i in prefix)
    t_max = getattr(policy, "t_max", 64)
    if len(prefix) >= t_max:
        raise UsageError(f"prefix length {len(prefix)} reaches the decoder limit {t_max}")
    if not x_body:
        raise UsageError("empty source sequence")
    for t in prefix:
        if not 0 <= int(t) < policy.vocab_size:
            raise UsageError(f"prefix token {t} out of vocabulary")
    state, logits = policy.start_batch([x_body])
    for tok in prefix:
        state, logits = policy.advance(state, np.array([tok], dtype=np.int64))
    row = logits[0]
    if not np.isfinite(row).all():
        raise TrainingError("non-finite logits from policy")
    return PolicyOutput(logits=row, log_probs=log_softmax(row))


# --- teacher-forced loss core -------------------------------------------------


@dataclass
class TeacherForcedBatch:
    """Padded matrices for one loss evaluation."""

    src: np.ndarray  # (B, Ts) encoder ids, EOS-terminated rows
    dec_in: np.ndarray  # (B, Td) BOS + rolled-in/reference tokens
    weight: np.ndarray  # (B, Td) 1.0 at scored positions
    target_ids: np.ndarray | None = None  # (B, Td)
    target_dists: np.ndarray | None = None  # (B, Td, V)


def _truncate(body, limit, what):
    if len(body) > limit:
        logger.warning("truncating %s of length %d to %d tokens", what, len(body), limit)
        return body[:limit]
    return body


def batch_from_pairs(policy, pairs) -> TeacherForcedBatch:
    """Batch for plain sequence training: score every position plus EOS."""
    t_max = policy.t_max
    srcs, dec_rows, tgt_rows = [], [], []
    for x, y in pairs:
        x_body = _truncate(x.body if isinstance(x, TokenSequence) else tuple(x), t_max - 1, "source")
        y_body = _truncate(y.body if isinstance(y, TokenSequence) else tuple(y), t_max - 1, "target")
        srcs.append(x_body + (EOS,))
        dec_rows.append((BOS,) + y_body)
        tgt_rows.append(y_body + (EOS,))
    src = pad_rows(srcs)
    dec_in = pad_rows(dec_rows)
    target_ids = pad_rows(tgt_rows)
    # position t is scored iff dec_in[t] is real; the BOS at t=0 scores the
    # first target token and the last real position scores EOS
    weight = (dec_in != PAD).astype(np.float64)
    return TeacherForcedBatch(src=src, dec_in=dec_in, weight=weight, target_ids=target_ids)


def _record_groups(records):
    """Split records into prefix chains that share one decoder row.

    Consecutive records with the same non-None example_index must extend one
    another's prefix by exactly one token; records without an example_index
    become singleton groups.
    """
    groups = []
    for rec in records:
        ei = getattr(rec, "example_index", None)
        prev = groups[-1][-1] if groups else None
        if (
            prev is not None
            and ei is not None
            and getattr(prev, "example_index", None) == ei
            and prev.x == rec.x
        ):
            if not (
                len(rec.prefix) == len(prev.prefix) + 1
                and tuple(rec.prefix[: len(prev.prefix)]) == tuple(prev.prefix)
            ):
                raise UsageError("records of one example must form a prefix chain")
            groups[-1].append(rec)
        else:
            groups.append([rec])
    return groups


def _batch_from_records(policy, records, want: str) -> TeacherForcedBatch:
    if not records:
        raise UsageError("empty record batch")
    groups = _record_groups(records)
    V = policy.vocab_size
    srcs, dec_rows = [], []
    for g in groups:
        srcs.append(tuple(g[0].x) + (EOS,))
        dec_rows.append((BOS,) + tuple(g[-1].prefix))
    src = pad_rows(srcs)
    dec_in = pad_rows(dec_rows)
    B, Td = dec_in.shape
    weight = np.zeros((B, Td))
    target_ids = np.zeros((B, Td), dtype=np.int64) if want == "ids" else None
    target_dists = np.zeros((B, Td, V)) if want == "dists" else None
    for b, g in enumerate(groups):
        for rec in g:
            pos = len(rec.prefix)
            weight[b, pos] = 1.0
            if want == "ids":
                tid = int(rec.target_id)
                if not 0 <= tid < V:
                    raise UsageError(f"target id {tid} out of vocabulary")
                target_ids[b, pos] = tid
            else:
                dist = np.asarray(rec.target_dist, dtype=np.float64)
                if dist.shape != (V,):
                    raise UsageError(f"target distribution has shape {dist.shape}, want ({V},)")
                if abs(float(dist.sum()) - 1.0) > 1e-4 or (dist < 0).any():
                    raise UsageError("target distribution must be non-negative and sum to 1")
                target_dists[b, pos] = dist
    return TeacherForcedBatch(src=src, dec_in=dec_in, weight=weight, target_ids=target_ids, target_dists=target_dists)


def _ce_core(policy, batch: TeacherForcedBatch, epsilon: float = 0.0):
    logits, cache = policy.forward_sequence(batch.src, batch.dec_in)
    logp = log_softmax(logits)
    p = np.exp(logp)
    W = batch.weight
    n = W.sum()
    if n <= 0:
        raise UsageError("loss batch scores no positions")
    if batch.target_dists is not None:
        ce = -(batch.target_dists * logp).sum(axis=-1)
        dl = p - batch.target_dists
    else:
        ids = batch.target_ids
        bi, ti = np.indices(ids.shape)
        gathered = logp[bi, ti, ids]
        dl = p.copy()
        if epsilon == 0.0:
            ce = -gathered
            dl[bi, ti, ids] -= 1.0
        else:
            V = logp.shape[-1]
            ce = -((1.0 - epsilon) * gathered + epsilon * logp.mean(axis=-1))
            dl[bi, ti, ids] -= 1.0 - epsilon
            dl -= epsilon / V
    loss = float((W * ce).sum() / n)
    dl *= (W / n)[..., None]
    grads = policy.backward_sequence(cache, dl)
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss")
    return loss, grads


def smoothed_ce_loss(policy, pairs, epsilon: float = 0.1):
    """Label-smoothed cross entropy over (source, target) pairs.

    The target at each position is (1 - epsilon) on the reference token plus
    epsilon spread uniformly over the whole vocabulary. Returns
    (mean loss per position, gradient dict).
    """
    if not 0.0 <= epsilon < 1.0:
        raise UsageError(f"epsilon={epsilon} outside [0, 1)")
    if not pairs:
        raise UsageError("empty training batch")
    return _ce_core(policy, batch_from_pairs(policy, pairs), epsilon=epsilon)


def kd_plus_loss(policy, records):
    """Cross entropy against full expert distributions on reference prefixes.

    `records` carry (x, prefix, target_dist); the loss is the mean over
    records of -sum_v expert(v) log policy(v | prefix; x).
    """
    return _ce_core(policy, _batch_from_records(policy, records, want="dists"))


def ikd_loss(policy, records):
    """Cross entropy against the expert argmax token on rolled-in prefixes."""
    return _ce_core(policy, _batch_from_records(policy, records, want="ids"))


def ikd_plus_loss(policy, records):
    """Cross entropy against full expert distributions on rolled-in prefixes.

    On records whose prefixes all come from references (the beta = 1 path)
    this is the same computation as kd_plus_loss on the same batch.
    """
    return _ce_core(policy, _batch_from_records(policy, records, want="dists"))


def aggrevate_loss(policy, records):
    """Square loss between sigmoid(Q) and the scaled reward-to-go.

    Q is the raw output-layer logit of the explored action given the rolled-in
    prefix. Rewards live in [-100, 100] and are scaled by 1/100 then clamped
    to [0, 1]; gradients flow only through Q.
    """
    if not records:
        raise UsageError("empty record batch")
    srcs, dec_rows, actions, rewards, positions = [], [], [], [], []
    for rec in records:
        srcs.append(tuple(rec.x) + (EOS,))
        dec_rows.append((BOS,) + tuple(rec.prefix))
        a = int(rec.action)
        if not 0 <= a < policy.vocab_size:
            raise UsageError(f"action {a} out of vocabulary")
        r = float(rec.reward)
        if not -100.0 <= r <= 100.0:
            raise UsageError(f"reward {r} outside [-100, 100]")
        actions.append(a)
        rewards.append(r)
        positions.append(len(rec.prefix))
    src = pad_rows(srcs)
    dec_in = pad_rows(dec_rows)
    logits, cache = policy.forward_sequence(src, dec_in)
    b = np.arange(len(records))
    t = np.array(positions)
    a = np.array(actions)
    q = logits[b, t, a]
    sig = sigmoid(q)
    r_hat = np.clip(np.array(rewards) / 100.0, 0.0, 1.0)
    diff = sig - r_hat
    loss = float((diff * diff).mean())
    dl = np.zeros_like(logits)
    dl[b, t, a] = 2.0 * diff * sig * (1.0 - sig) / len(records)
    grads = policy.backward_sequence(cache, dl)
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss")
    return loss, grads


# --- optimizer ----------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    clip_norm: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")
        if self.clip_norm < 0:
            raise UsageError("clip_norm must be non-negative (0 disables clipping)")


class AdamOptimizer:
    """Adam with global-norm gradient clipping."""

    def __init__(self, cfg: OptimizerConfig, params: dict):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0

    def apply(self, params: dict, grads: dict) -> None:
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        if bad:
            raise TrainingError(f"non-finite gradient in parameter block(s): {', '.join(sorted(bad))}")
        cfg = self.cfg
        if cfg.clip_norm > 0:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.step += 1
        bc1 = 1.0 - cfg.beta1**self.step
        bc2 = 1.0 - cfg.beta2**self.step
        for k, g in grads.items():
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * (g * g)
            params[k] -= cfg.learning_rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + cfg.eps)


def apply_update(policy, grads: dict, optimizer: AdamOptimizer):
    """One optimizer step in place; returns the policy for chaining."""
    optimizer.apply(policy.parameters(), grads)
    return policy


# --- gradient checking ----------------------------------------------------------


def gradient_check(policy, loss_fn, num_coords: int = 200, epsilon: float = 1e-5, seed: int = 0) -> float:
    """Compare analytic gradients with central finite differences.

    Samples coordinates from every parameter block (at least `num_coords`
    total) and returns the maximum relative error
    |analytic - numeric| / max(|numeric|, 1e-5). A policy without parameters
    checks vacuously with error 0.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise UsageError(f"epsilon={epsilon} outside [1e-7, 1e-3]")
    params = policy.parameters()
    if not params:
        return 0.0
    _, grads = loss_fn(policy)
    rng = np.random.Generator(np.random.PCG64(seed))
    names = [n for n in PARAM_ORDER if n in params] or sorted(params)
    per_block = -(-num_coords // len(names))
    worst = 0.0
    for name in names:
        flat = params[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        idx = rng.integers(0, flat.size, size=min(per_block, flat.size))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_fn(policy)[0]
            flat[i] = orig - epsilon
            down = loss_fn(policy)[0]
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(gflat[i] - numeric) / max(abs(numeric), 1e-5)
            worst = max(worst, err)
    return worst


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, policy: NeuralSeq2SeqPolicy, optimizer: AdamOptimizer | None = None, meta: dict | None = None) -> None:
    """Versioned container: one JSON header line, then little-endian float64 blobs.

    Blob order is PARAM_ORDER, then (if optimizer state is saved) the Adam
    first moments and second moments in the same order. Round-trips bitwise.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hyper": policy.hyper.to_dict(),
        "src_vocab_hash": policy.src_vocab_hash,
        "tgt_vocab_hash": policy.tgt_vocab_hash,
        "params": [{"name": n, "shape": list(policy.params[n].shape)} for n in PARAM_ORDER],
        "optimizer": None
        if optimizer is None
        else {"step": optimizer.step, "config": asdict(optimizer.cfg)},
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in PARAM_ORDER:
            f.write(np.ascontiguousarray(policy.params[n], dtype="<f8").tobytes())
        if optimizer is not None:
            for slot in (optimizer.m, optimizer.v):
                for n in PARAM_ORDER:
                    f.write(np.ascontiguousarray(slot[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[NeuralSeq2SeqPolicy, AdamOptimizer | None, dict]:
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: not a checkpoint (bad header)") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint (format tag {header.get('format')!r})")
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    hyper = PolicyHyper.from_dict(header["hyper"])
    entries = header["params"]
    if [e["name"] for e in entries] != list(PARAM_ORDER):
        raise DataError(f"{path}: unexpected parameter table")

    offset = 0

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape)) if shape else 1
        end = offset + size * 8
        if end > len(blob):
            raise DataError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
        return arr

    params = {e["name"]: take(tuple(e["shape"])) for e in entries}
    policy = NeuralSeq2SeqPolicy(hyper, params, header["src_vocab_hash"], header["tgt_vocab_hash"])
    optimizer = None
    if header["optimizer"] is not None:
        cfg = OptimizerConfig(**header["optimizer"]["config"])
        optimizer = AdamOptimizer(cfg, params)
        optimizer.step = int(header["optimizer"]["step"])
        optimizer.m = {e["name"]: take(tuple(e["shape"])) for e in entries}
        optimizer.v = {e["name"]: take(tuple(e["shape"])) for e in entries}
    if offset != len(blob):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return policy, optimizer, header.get("meta", {})


def average_checkpoints(paths) -> NeuralSeq2SeqPolicy:
    """Mean of the parameter tensors of several compatible checkpoints."""
    if not paths:
        raise UsageError("average_checkpoints needs at least one path")
    policies = [load_checkpoint(p)[0] for p in paths]
    first = policies[0]
    for p in policies[1:]:
        if p.hyper != first.hyper:
            raise UsageError("checkpoints disagree on architecture hyperparameters")
        if (p.src_vocab_hash, p.tgt_vocab_hash) != (first.src_vocab_hash, first.tgt_vocab_hash):
            raise UsageError("checkpoints disagree on vocabulary hashes")
    params = {
        k: sum(p.params[k] for p in policies) / len(policies) for k in first.params
    }
    return NeuralSeq2SeqPolicy(first.hyper, params, first.src_vocab_hash, first.tgt_vocab_hash)


def warm_start_encoder(target: NeuralSeq2SeqPolicy, source: NeuralSeq2SeqPolicy) -> NeuralSeq2SeqPolicy:
    """Copy the encoder parameter blocks of `source` into `target`."""
    if target.hyper.src_vocab_size != source.hyper.src_vocab_size:
        raise UsageError("encoder warm start needs matching source vocabularies")
    if target.src_vocab_hash and source.src_vocab_hash and target.src_vocab_hash != source.src_vocab_hash:
        raise UsageError("encoder warm start across different source vocabularies")
    for name in ENCODER_PARAMS:
        if target.params[name].shape != source.params[name].shape:
            raise UsageError(f"encoder block {name} has incompatible shape")
    for name in ENCODER_PARAMS:
        target.params[name] = source.params[name].copy()
    return target
