"""The directional transformer network.

Standard transformer encoder (learned absolute positions, plus a length
head pooled over non-PAD outputs) and a decoder whose per-position
behavior is steered by a direction tag:

  R  generate rightward: query sees keys j <= i, positions count from the left
  S  in-place refinement: query sees an unmasked subset, positions from the left
  L  generate leftward: query sees keys j >= i, positions count from the right

Decoder self-attention keys/values are built from raw word embeddings in
every layer (no hidden-state recurrence into K/V), with learned relative
position terms added to both keys and values. A masked key therefore
contributes nothing at all to a query's output: the attention weight is
exactly zero and no other path carries that token's identity.

Direction tags are encoded as integers R=0, S=1, L=2 throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DIR_R, DIR_S, DIR_L = 0, 1, 2
DIR_NAMES = {"R": DIR_R, "S": DIR_S, "L": DIR_L}
DIR_CHARS = {DIR_R: "R", DIR_S: "S", DIR_L: "L"}


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    l_max: int = 64
    rel_k: int = 16
    lambda_len: float = 0.1
    dropout: float = 0.1
    pre_ln: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.rel_k < 1:
            raise ValueError("rel_k must be >= 1")
        if not (0.0 < self.lambda_len <= 1.0):
            raise ValueError("lambda_len must lie in (0, 1]")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameter dict; source/target/output embeddings are tied."""

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)

    def xavier(fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    d, dh, ffn = cfg.d_model, cfg.d_head, cfg.d_ffn
    emb_std = d**-0.5
    p: dict[str, Tensor] = {
        "word_emb": normal((cfg.vocab_size, d), emb_std),
        "dir_emb": normal((3, d), emb_std),
        "pos_fwd": normal((cfg.l_max, d), emb_std),
        "pos_bwd": normal((cfg.l_max, d), emb_std),
        "enc_pos": normal((cfg.l_max, d), emb_std),
        "rel_key": normal((2 * cfg.rel_k + 1, dh), dh**-0.5),
        "rel_val": normal((2 * cfg.rel_k + 1, dh), dh**-0.5),
        "len_w1": xavier(d, d),
        "len_b1": zeros(d),
        "len_w2": xavier(d, cfg.l_max),
        "len_b2": zeros(cfg.l_max),
    }
    if cfg.pre_ln:
        p["enc_lnf_g"], p["enc_lnf_b"] = ones(d), zeros(d)
        p["dec_lnf_g"], p["dec_lnf_b"] = ones(d), zeros(d)
    for i in range(cfg.n_enc_layers):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"enc{i}_attn_{w}"] = xavier(d, d)
        p[f"enc{i}_ln1_g"], p[f"enc{i}_ln1_b"] = ones(d), zeros(d)
        p[f"enc{i}_ffn_w1"], p[f"enc{i}_ffn_b1"] = xavier(d, ffn), zeros(ffn)
        p[f"enc{i}_ffn_w2"], p[f"enc{i}_ffn_b2"] = xavier(ffn, d), zeros(d)
        p[f"enc{i}_ln2_g"], p[f"enc{i}_ln2_b"] = ones(d), zeros(d)
    for i in range(cfg.n_dec_layers):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"dec{i}_self_{w}"] = xavier(d, d)
        p[f"dec{i}_ln1_g"], p[f"dec{i}_ln1_b"] = ones(d), zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            p[f"dec{i}_cross_{w}"] = xavier(d, d)
        p[f"dec{i}_ln2_g"], p[f"dec{i}_ln2_b"] = ones(d), zeros(d)
        p[f"dec{i}_ffn_w1"], p[f"dec{i}_ffn_b1"] = xavier(d, ffn), zeros(ffn)
        p[f"dec{i}_ffn_w2"], p[f"dec{i}_ffn_b2"] = xavier(ffn, d), zeros(d)
        p[f"dec{i}_ln3_g"], p[f"dec{i}_ln3_b"] = ones(d), zeros(d)
    return p


# ---------------------------------------------------------------------------
# positions
# ---------------------------------------------------------------------------


def directed_position_index(i: int, n: int, z: str | int) -> tuple[str, int]:
    """Map a 1-based position to (bank, 1-based index within that bank).

    R and S count from the left in the forward bank; L counts from the
    right in the backward bank, so the two indices of a position always
    sum to n + 1.
    """
    if not (1 <= i <= n):
        raise ValueError(f"position {i} outside [1, {n}]")
    code = DIR_NAMES[z] if isinstance(z, str) else z
    if code == DIR_L:
        return ("bwd", n - i + 1)
    return ("fwd", i)


def relative_index(i: int, j: int, k: int) -> int:
    """Row of the relative tables for key j seen from query i (1-based or 0-based alike)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(np.clip(j - i, -k, k)) + k


def rel_index_matrix(n: int, k: int) -> np.ndarray:
    """[n, n] matrix of relative-table rows: entry (i, j) = clip(j-i, -k, k) + k."""
    offs = np.arange(n)[None, :] - np.arange(n)[:, None]
    return (np.clip(offs, -k, k) + k).astype(np.int64)


def directed_positions(z: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """1-based directed position index per slot for a padded batch.

    z: [B, W] direction codes; lengths: [B] true lengths. R/S slots get
    i+1 (from the left); L slots get n-i (from the right). PAD slots
    receive index 1; they are never attended to or read.
    """
    b, w = z.shape
    fwd = np.tile(np.arange(1, w + 1, dtype=np.int64), (b, 1))
    bwd = lengths[:, None] - np.arange(w, dtype=np.int64)[None, :]
    idx = np.where(z == DIR_L, bwd, fwd)
    return np.clip(idx, 1, None)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderState:
    hidden: Tensor  # [B, Ws, d]
    keep: np.ndarray  # [B, Ws] bool, True at real (non-PAD) positions
    length_logits: Tensor  # [B, l_max], class c <-> content length c+1


def _heads(x: Tensor, cfg: ModelConfig) -> Tensor:
    b, n, _ = x.shape
    return ad.transpose(ad.reshape(x, (b, n, cfg.n_heads, cfg.d_head)), (0, 2, 1, 3))


def _merge(x: Tensor, cfg: ModelConfig) -> Tensor:
    b, _, n, _ = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, cfg.d_model))


def _norm(p, prefix: str, h: Tensor) -> Tensor:
    return ad.layer_norm(h, p[f"{prefix}_g"], p[f"{prefix}_b"])


def _block(p, cfg, h: Tensor, ln_prefix: str, fn, drop_rng) -> Tensor:
    """One residual sublayer; pre-LN normalizes the input, post-LN the sum."""
    out = fn(_norm(p, ln_prefix, h)) if cfg.pre_ln else fn(h)
    if drop_rng is not None:
        out = ad.dropout(out, cfg.dropout, drop_rng)
    res = ad.add(h, out)
    return res if cfg.pre_ln else _norm(p, ln_prefix, res)


def _ffn(p, prefix: str, h: Tensor) -> Tensor:
    x = ad.relu(ad.add(ad.matmul(h, p[f"{prefix}_w1"]), p[f"{prefix}_b1"]))
    return ad.add(ad.matmul(x, p[f"{prefix}_w2"]), p[f"{prefix}_b2"])


def encode(params: dict[str, Tensor], cfg: ModelConfig, src: np.ndarray, src_len: np.ndarray, drop_rng=None) -> EncoderState:
    """Standard self-attention encoder plus length-prediction logits."""
    b, w = src.shape
    if w > cfg.l_max or (src_len > cfg.l_max).any():
        raise ValueError(f"source longer than l_max={cfg.l_max}")
    keep = np.arange(w)[None, :] < src_len[:, None]
    pos = np.tile(np.arange(w), (b, 1))
    h = ad.add(ad.embed(params["word_emb"], src), ad.embed(params["enc_pos"], pos))
    if drop_rng is not None:
        h = ad.dropout(h, cfg.dropout, drop_rng)
    # PAD keys hidden from every query. BOS at position 0 is always real,
    # so no row is ever fully masked (PAD query outputs are never consumed).
    attn_mask = ~keep[:, None, None, :]

    inv = 1.0 / math.sqrt(cfg.d_head)

    def self_attn(i):
        def fn(x):
            q = _heads(ad.matmul(x, params[f"enc{i}_attn_wq"]), cfg)
            k = _heads(ad.matmul(x, params[f"enc{i}_attn_wk"]), cfg)
            v = _heads(ad.matmul(x, params[f"enc{i}_attn_wv"]), cfg)
            scores = ad.matmul(ad.scale(q, inv), ad.transpose(k, (0, 1, 3, 2)))
            alpha = ad.masked_softmax(scores, attn_mask)
            return ad.matmul(_merge(ad.attend(alpha, v), cfg), params[f"enc{i}_attn_wo"])

        return fn

    for i in range(cfg.n_enc_layers):
        h = _block(params, cfg, h, f"enc{i}_ln1", self_attn(i), drop_rng)
        h = _block(params, cfg, h, f"enc{i}_ln2", lambda x, i=i: _ffn(params, f"enc{i}_ffn", x), drop_rng)
    if cfg.pre_ln:
        h = _norm(params, "enc_lnf", h)

    pooled = ad.masked_mean(h, keep)
    mid = ad.relu(ad.add(ad.matmul(pooled, params["len_w1"]), params["len_b1"]))
    length_logits = ad.add(ad.matmul(mid, params["len_w2"]), params["len_b2"])
    return EncoderState(hidden=h, keep=keep, length_logits=length_logits)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def decoder_forward(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    enc: EncoderState,
    tgt_ids: np.ndarray,
    z: np.ndarray,
    pos_idx: np.ndarray,
    key_mask: np.ndarray,
    drop_rng=None,
) -> Tensor:
    """Per-query masked decoder pass; returns logits [B, W, V].

    tgt_ids/z/pos_idx are [B, W]; key_mask is [B, W, W] with True = hidden.
    The layer-0 query stream is position + direction embedding only (no
    words); self-attention keys/values come from the word embeddings of
    tgt_ids in every layer.
    """
    b, w = tgt_ids.shape
    if not (z.shape == (b, w) and pos_idx.shape == (b, w) and key_mask.shape == (b, w, w)):
        raise ValueError(
            f"decoder input shapes disagree: tgt {tgt_ids.shape}, z {z.shape}, pos {pos_idx.shape}, mask {key_mask.shape}"
        )
    if pos_idx.max() > cfg.l_max:
        raise ValueError(f"position index {pos_idx.max()} exceeds l_max={cfg.l_max}")

    # R and S read the forward bank, L the backward bank; both gathers run
    # and a 0/1 mask picks per slot (the unselected gather gets zero grad).
    is_fwd = Tensor((z != DIR_L).astype(np.float32)[..., None])
    is_bwd = Tensor((z == DIR_L).astype(np.float32)[..., None])
    pos = ad.add(
        ad.mul(ad.embed(params["pos_fwd"], pos_idx - 1), is_fwd),
        ad.mul(ad.embed(params["pos_bwd"], pos_idx - 1), is_bwd),
    )
    h = ad.add(pos, ad.embed(params["dir_emb"], z))
    if drop_rng is not None:
        h = ad.dropout(h, cfg.dropout, drop_rng)

    words = ad.embed(params["word_emb"], tgt_ids)
    rel_idx = rel_index_matrix(w, cfg.rel_k)
    self_mask = key_mask[:, None]  # broadcast over heads
    cross_mask = ~enc.keep[:, None, None, :]
    inv = 1.0 / math.sqrt(cfg.d_head)

    def self_attn(i):
        def fn(x):
            q = _heads(ad.matmul(x, params[f"dec{i}_self_wq"]), cfg)
            k = _heads(ad.matmul(words, params[f"dec{i}_self_wk"]), cfg)
            v = _heads(ad.matmul(words, params[f"dec{i}_self_wv"]), cfg)
            qs = ad.scale(q, inv)
            scores = ad.add(
                ad.matmul(qs, ad.transpose(k, (0, 1, 3, 2))),
                ad.rel_scores(qs, params["rel_key"], rel_idx),
            )
            alpha = ad.masked_softmax(scores, self_mask)
            ctx = ad.attend(alpha, v, params["rel_val"], rel_idx)
            return ad.matmul(_merge(ctx, cfg), params[f"dec{i}_self_wo"])

        return fn

    def cross_attn(i):
        def fn(x):
            q = _heads(ad.matmul(x, params[f"dec{i}_cross_wq"]), cfg)
            k = _heads(ad.matmul(enc.hidden, params[f"dec{i}_cross_wk"]), cfg)
            v = _heads(ad.matmul(enc.hidden, params[f"dec{i}_cross_wv"]), cfg)
            scores = ad.matmul(ad.scale(q, inv), ad.transpose(k, (0, 1, 3, 2)))
            alpha = ad.masked_softmax(scores, cross_mask)
            return ad.matmul(_merge(ad.attend(alpha, v), cfg), params[f"dec{i}_cross_wo"])

        return fn

    for i in range(cfg.n_dec_layers):
        h = _block(params, cfg, h, f"dec{i}_ln1", self_attn(i), drop_rng)
        h = _block(params, cfg, h, f"dec{i}_ln2", cross_attn(i), drop_rng)
        h = _block(params, cfg, h, f"dec{i}_ln3", lambda x, i=i: _ffn(params, f"dec{i}_ffn", x), drop_rng)
    if cfg.pre_ln:
        h = _norm(params, "dec_lnf", h)

    return ad.matmul(h, ad.transpose(params["word_emb"], (1, 0)))


def predict_length(enc: EncoderState, beam: int, l_max: int) -> list[list[tuple[int, float]]]:
    """Top-beam (content length, log-prob) per sentence, best first.

    Lengths are capped at l_max - 2 so BOS + content + EOS still fits.
    Ties break toward the shorter length.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    logits = enc.length_logits.data
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = []
    cap = l_max - 2
    for row in logp:
        cand = [(-row[c], c + 1) for c in range(cap)]
        cand.sort()
        out.append([(length, -neg) for neg, length in cand[:beam]])
    return out
