"""Numpy seq2seq core: GRU encoder, GRU decoder with dot-product attention.

Everything runs in float64 with hand-written backward passes. That buys three
things the experiments depend on: bitwise-reproducible training runs, loss
gradients that can be finite-difference checked to tight tolerances, and a
checkpoint format that is just named float64 tensors.

Layout conventions:
  encoder input   source body + EOS, right-padded with PAD (id 0);
  decoder input   BOS + target tokens, right-padded;
  gates           fused as (.., 3H) blocks in the order reset, update,
                  candidate (PyTorch-style GRU: the reset gate multiplies the
                  hidden contribution of the candidate, bias included).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .vocab import BOS, PAD

NEG_INF = -1e30

PARAM_ORDER = (
    "src_embed",
    "enc_Wi",
    "enc_Wh",
    "enc_bi",
    "enc_bh",
    "bridge_W",
    "bridge_b",
    "tgt_embed",
    "dec_Wi",
    "dec_Wh",
    "dec_bi",
    "dec_bh",
    "att_Wc",
    "att_bc",
    "out_W",
    "out_b",
)

ENCODER_PARAMS = ("src_embed", "enc_Wi", "enc_Wh", "enc_bi", "enc_bh")


@dataclass(frozen=True)
class PolicyHyper:
    """Architecture and wiring of one seq2seq policy."""

    src_vocab_size: int
    tgt_vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128
    input_channel: str = "acoustic"
    output_channel: str = "translation"
    t_max: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyHyper":
        return cls(**d)


def init_params(hyper: PolicyHyper, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(seed))
    D, H = hyper.embed_dim, hyper.hidden_dim
    Vs, Vt = hyper.src_vocab_size, hyper.tgt_vocab_size

    def mat(*shape):
        return rng.uniform(-0.08, 0.08, size=shape)

    return {
        "src_embed": mat(Vs, D),
        "enc_Wi": mat(D, 3 * H),
        "enc_Wh": mat(H, 3 * H),
        "enc_bi": np.zeros(3 * H),
        "enc_bh": np.zeros(3 * H),
        "bridge_W": mat(H, H),
        "bridge_b": np.zeros(H),
        "tgt_embed": mat(Vt, D),
        "dec_Wi": mat(D, 3 * H),
        "dec_Wh": mat(H, 3 * H),
        "dec_bi": np.zeros(3 * H),
        "dec_bh": np.zeros(3 * H),
        "att_Wc": mat(2 * H, H),
        "att_bc": np.zeros(H),
        "out_W": mat(H, Vt),
        "out_b": np.zeros(Vt),
    }


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def pad_rows(rows, pad: int = PAD) -> np.ndarray:
    """Stack variable-length id tuples into a right-padded int64 matrix."""
    width = max(1, max((len(r) for r in rows), default=1))
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _gru_step(x_emb, h, Wi, Wh, bi, bh, H):
    gi = x_emb @ Wi + bi
    gh = h @ Wh + bh
    r = sigmoid(gi[:, :H] + gh[:, :H])
    z = sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
    ghn = gh[:, 2 * H :]
    n = np.tanh(gi[:, 2 * H :] + r * ghn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (r, z, n, ghn)


def _gru_backward(dh_new, h_prev, x_emb, gates, Wi, Wh, grads, prefix: str):
    """Backprop one GRU step. Returns (dh_prev, dx_emb)."""
    r, z, n, ghn = gates
    dz = dh_new * (h_prev - n) * z * (1.0 - z)
    dn_pre = dh_new * (1.0 - z) * (1.0 - n * n)
    dghn = dn_pre * r
    dr = dn_pre * ghn * r * (1.0 - r)
    dgi = np.concatenate([dr, dz, dn_pre], axis=1)
    dgh = np.concatenate([dr, dz, dghn], axis=1)
    grads[prefix + "_Wi"] += x_emb.T @ dgi
    grads[prefix + "_Wh"] += h_prev.T @ dgh
    grads[prefix + "_bi"] += dgi.sum(axis=0)
    grads[prefix + "_bh"] += dgh.sum(axis=0)
    dh_prev = dh_new * z + dgh @ Wh.T
    dx_emb = dgi @ Wi.T
    return dh_prev, dx_emb


def encode(params: dict, X: np.ndarray, H: int):
    """Run the encoder over padded ids. Padded steps carry the state through.

    Returns (states (B, Ts, H), final (B, H), mask (B, Ts), cache).
    """
    B, Ts = X.shape
    emb = params["src_embed"][X]
    mask = (X != PAD).astype(np.float64)
    h = np.zeros((B, H))
    states = np.empty((B, Ts, H))
    step_cache = []
    for t in range(Ts):
        h_cand, gates = _gru_step(emb[:, t], h, params["enc_Wi"], params["enc_Wh"], params["enc_bi"], params["enc_bh"], H)
        m = mask[:, t : t + 1]
        h_next = m * h_cand + (1.0 - m) * h
        step_cache.append((h, gates))
        states[:, t] = h_next
        h = h_next
    return states, h, mask, (emb, step_cache)


def _attention(s, enc_states, enc_mask, scale):
    scores = np.einsum("bh,bth->bt", s, enc_states) * scale
    scores = np.where(enc_mask > 0, scores, NEG_INF)
    a = softmax(scores)
    ctx = np.einsum("bt,bth->bh", a, enc_states)
    return a, ctx


def _readout(params, s, ctx):
    comb_in = np.concatenate([s, ctx], axis=1)
    htil = np.tanh(comb_in @ params["att_Wc"] + params["att_bc"])
    logits = htil @ params["out_W"] + params["out_b"]
    return comb_in, htil, logits


def forward_sequence(params: dict, hyper: PolicyHyper, X: np.ndarray, Y_in: np.ndarray):
    """Teacher-forced forward pass.

    X: (B, Ts) encoder ids; Y_in: (B, Td) decoder inputs (BOS first).
    Returns (logits (B, Td, V), cache for backward_sequence).
    """
    H = hyper.hidden_dim
    scale = 1.0 / np.sqrt(H)
    enc_states, h_final, enc_mask, enc_cache = encode(params, X, H)
    bridge_pre = h_final @ params["bridge_W"] + params["bridge_b"]
    s = np.tanh(bridge_pre)
    s0 = s
    B, Td = Y_in.shape
    y_emb = params["tgt_embed"][Y_in]
    logits = np.empty((B, Td, hyper.tgt_vocab_size))
    dec_cache = []
    for t in range(Td):
        s_prev = s
        s, gates = _gru_step(y_emb[:, t], s_prev, params["dec_Wi"], params["dec_Wh"], params["dec_bi"], params["dec_bh"], H)
        a, ctx = _attention(s, enc_states, enc_mask, scale)
        comb_in, htil, logits_t = _readout(params, s, ctx)
        logits[:, t] = logits_t
        dec_cache.append((s_prev, gates, a, ctx, comb_in, htil))
    cache = (X, Y_in, enc_states, enc_mask, enc_cache, s0, h_final, y_emb, dec_cache)
    return logits, cache


def backward_sequence(params: dict, hyper: PolicyHyper, cache, dlogits: np.ndarray) -> dict:
    """Gradients of sum(dlogits * logits) with respect to every parameter."""
    H = hyper.hidden_dim
    scale = 1.0 / np.sqrt(H)
    X, Y_in, enc_states, enc_mask, enc_cache, s0, h_final, y_emb, dec_cache = cache
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    B, Td, _ = dlogits.shape
    d_enc = np.zeros_like(enc_states)
    ds_next = np.zeros((B, H))
    for t in range(Td - 1, -1, -1):
        s_prev, gates, a, ctx, comb_in, htil = dec_cache[t]
        dl = dlogits[:, t]
        grads["out_W"] += htil.T @ dl
        grads["out_b"] += dl.sum(axis=0)
        dhtil = dl @ params["out_W"].T
        dcomb = dhtil * (1.0 - htil * htil)
        grads["att_Wc"] += comb_in.T @ dcomb
        grads["att_bc"] += dcomb.sum(axis=0)
        dcomb_in = dcomb @ params["att_Wc"].T
        ds = dcomb_in[:, :H] + ds_next
        dctx = dcomb_in[:, H:]
        # attention backward: ctx = a @ enc, a = softmax(s . enc * scale)
        da = np.einsum("bh,bth->bt", dctx, enc_states)
        d_enc += np.einsum("bt,bh->bth", a, dctx)
        dscores = a * (da - (da * a).sum(axis=1, keepdims=True))
        s_t = comb_in[:, :H]
        ds += np.einsum("bt,bth->bh", dscores, enc_states) * scale
        d_enc += np.einsum("bt,bh->bth", dscores, s_t) * scale
        ds_next, dy = _gru_backward(ds, s_prev, y_emb[:, t], gates, params["dec_Wi"], params["dec_Wh"], grads, "dec")
        np.add.at(grads["tgt_embed"], Y_in[:, t], dy)
    # bridge
    dbridge = ds_next * (1.0 - s0 * s0)
    grads["bridge_W"] += h_final.T @ dbridge
    grads["bridge_b"] += dbridge.sum(axis=0)
    dh = dbridge @ params["bridge_W"].T
    # encoder, reversed, with pad carry
    emb, step_cache = enc_cache
    Ts = X.shape[1]
    for t in range(Ts - 1, -1, -1):
        h_prev, gates = step_cache[t]
        dh_total = dh + d_enc[:, t]
        m = enc_mask[:, t : t + 1]
        dh_cand = dh_total * m
        dh = dh_total * (1.0 - m)
        dh_step, dx = _gru_backward(dh_cand, h_prev, emb[:, t], gates, params["enc_Wi"], params["enc_Wh"], grads, "enc")
        dh += dh_step
        np.add.at(grads["src_embed"], X[:, t], dx * m)
    return grads


class DecodeState:
    """Row-batched incremental decoder state (one row per live hypothesis)."""

    __slots__ = ("enc_states", "enc_mask", "h")

    def __init__(self, enc_states, enc_mask, h):
        self.enc_states = enc_states
        self.enc_mask = enc_mask
        self.h = h

    def gather(self, rows) -> "DecodeState":
        idx = np.asarray(rows, dtype=np.int64)
        return DecodeState(self.enc_states[idx], self.enc_mask[idx], self.h[idx])

    @property
    def rows(self) -> int:
        return self.h.shape[0]


def start_batch(params: dict, hyper: PolicyHyper, rows) -> tuple[DecodeState, np.ndarray]:
    """Encode sources (already EOS-terminated) and take the BOS step."""
    X = pad_rows(rows)
    enc_states, h_final, enc_mask, _ = encode(params, X, hyper.hidden_dim)
    s0 = np.tanh(h_final @ params["bridge_W"] + params["bridge_b"])
    state = DecodeState(enc_states, enc_mask, s0)
    bos = np.full(len(rows), BOS, dtype=np.int64)
    return advance(params, hyper, state, bos)


def advance(params: dict, hyper: PolicyHyper, state: DecodeState, tokens) -> tuple[DecodeState, np.ndarray]:
    """One decoder step per row. Rows fed PAD keep their state unchanged."""
    H = hyper.hidden_dim
    tokens = np.asarray(tokens, dtype=np.int64)
    y_emb = params["tgt_embed"][tokens]
    s_cand, _ = _gru_step(y_emb, state.h, params["dec_Wi"], params["dec_Wh"], params["dec_bi"], params["dec_bh"], H)
    live = (tokens != PAD).astype(np.float64)[:, None]
    s = live * s_cand + (1.0 - live) * state.h
    a, ctx = _attention(s_cand, state.enc_states, state.enc_mask, 1.0 / np.sqrt(H))
    _, _, logits = _readout(params, s_cand, ctx)
    return DecodeState(state.enc_states, state.enc_mask, s), logits
