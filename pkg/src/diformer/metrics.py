"""Evaluation metrics and the model's safety diagnostics.

Besides BLEU and exact match, this module hosts the two probes the whole
architecture is built around: the leakage probe (a masked key must have
zero influence on its query's logits) and the mirror check (reversing the
world — banks, direction embeddings, relative tables, inputs — must
exactly reverse the decoder's output rows).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .corpus import BOS, EOS, PAD
from .model import DIR_L, DIR_R, ModelConfig, decoder_forward, directed_positions, encode
from .rng import substream
from .training import TrainBatch


@dataclass
class BleuReport:
    bleu: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self):
        p = self.precisions
        return (
            f"BLEU={self.bleu:.4f} p1={p[0]:.4f} p2={p[1]:.4f} p3={p[2]:.4f} p4={p[3]:.4f} "
            f"BP={self.brevity_penalty:.4f} hyp_len={self.hyp_len} ref_len={self.ref_len}"
        )


def _strip(seq) -> list:
    return [t for t in seq if t not in (PAD, BOS, EOS)]


def _ngrams(seq: list, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps: list[list], refs: list[list]) -> BleuReport:
    """Corpus-level BLEU-4 with clipped counts pooled over all pairs.

    Orders with zero matches get add-one smoothing on both numerator and
    denominator (tiny corpora would otherwise zero out the whole score).
    Brevity penalty is exp(1 - r/h) when the hypothesis side is shorter.
    """
    if not hyps:
        raise ValueError("empty hypothesis set")
    if len(hyps) != len(refs):
        raise ValueError(f"count mismatch: {len(hyps)} hypotheses vs {len(refs)} references")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h, r = _strip(hyp), _strip(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = []
    for m, t in zip(matches, totals):
        if m == 0:
            m, t = m + 1, t + 1
        precisions.append(m / t)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    bleu = bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)
    return BleuReport(
        bleu=bleu,
        precisions=tuple(precisions),
        brevity_penalty=bp,
        hyp_len=hyp_len,
        ref_len=ref_len,
    )


def exact_match(hyps: list[list], refs: list[list]) -> float:
    """Fraction of pairs with identical content after stripping BOS/EOS/PAD."""
    if len(hyps) != len(refs):
        raise ValueError(f"count mismatch: {len(hyps)} vs {len(refs)}")
    if not hyps:
        return 0.0
    return sum(_strip(h) == _strip(r) for h, r in zip(hyps, refs)) / len(hyps)


# ---------------------------------------------------------------------------
# leakage probe
# ---------------------------------------------------------------------------


@dataclass
class LeakageViolation:
    sentence: int
    query: int
    key: int
    max_abs_diff: float


def leakage_probe(params, cfg: ModelConfig, batch: TrainBatch, trials: int = 32, seed: int = 0) -> list[LeakageViolation]:
    """Perturb masked keys and assert the corresponding logit rows are unchanged.

    For every sentence, enumerates (query, masked key) pairs — exhaustively
    when the target is at most 8 tokens, otherwise `trials` sampled pairs —
    replaces the key's word id with a different random id, recomputes the
    decoder, and compares the query's logits with exact float equality.
    Returns all violations; an empty list is the expected outcome.
    """
    rng = substream(seed, "leakage-probe")
    enc = encode(params, cfg, batch.src, batch.src_len)
    base = decoder_forward(params, cfg, enc, batch.tgt_in, batch.z, batch.pos_idx, batch.key_mask).data
    content_ids = np.arange(5, cfg.vocab_size)
    violations = []
    for s in range(batch.tgt_in.shape[0]):
        n = int(batch.tgt_len[s])
        pairs = [(i, j) for i in range(n) for j in range(n) if batch.key_mask[s, i, j]]
        if n > 8 and len(pairs) > trials:
            pick = rng.choice(len(pairs), size=trials, replace=False)
            pairs = [pairs[k] for k in pick]
        for i, j in pairs:
            old = batch.tgt_in[s, j]
            choices = content_ids[content_ids != old]
            new = int(rng.choice(choices))
            perturbed = batch.tgt_in[s : s + 1].copy()
            perturbed[0, j] = new
            logits = decoder_forward(
                params,
                cfg,
                _enc_row(enc, s),
                perturbed,
                batch.z[s : s + 1],
                batch.pos_idx[s : s + 1],
                batch.key_mask[s : s + 1],
            ).data
            diff = np.abs(logits[0, i] - base[s, i])
            if not np.array_equal(logits[0, i], base[s, i]):
                violations.append(LeakageViolation(s, i, j, float(diff.max())))
    return violations


def _enc_row(enc, s):
    from .decoding import slice_enc

    return slice_enc(enc, [s])


# ---------------------------------------------------------------------------
# mirror check
# ---------------------------------------------------------------------------


def mirror_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """The parameter half of the reversal transposition: swap the forward and
    backward positional banks, swap the R and L direction embeddings, and
    reverse both relative tables (row m <-> row 2k-m)."""
    out = dict(params)
    out["pos_fwd"], out["pos_bwd"] = params["pos_bwd"], params["pos_fwd"]
    dir_data = params["dir_emb"].data.copy()
    dir_data[[DIR_R, DIR_L]] = dir_data[[DIR_L, DIR_R]]
    out["dir_emb"] = Tensor(dir_data)
    out["rel_key"] = Tensor(np.ascontiguousarray(params["rel_key"].data[::-1]))
    out["rel_val"] = Tensor(np.ascontiguousarray(params["rel_val"].data[::-1]))
    return out


def mirror_inputs(tgt: np.ndarray, z: np.ndarray, pos_idx: np.ndarray, key_mask: np.ndarray):
    """The input half of the transposition: reverse target order, flip R<->L,
    recompute directed positions, reverse mask rows and columns."""
    flip = {DIR_R: DIR_L, DIR_L: DIR_R}
    tgt_m = np.ascontiguousarray(tgt[:, ::-1])
    z_m = np.vectorize(lambda c: flip.get(c, c))(z[:, ::-1]).astype(np.int64)
    n = tgt.shape[1]
    lengths = np.full(tgt.shape[0], n, dtype=np.int64)
    pos_m = directed_positions(z_m, lengths)
    mask_m = np.ascontiguousarray(key_mask[:, ::-1, ::-1])
    return tgt_m, z_m, pos_m, mask_m


def mirror_check(params, cfg: ModelConfig, enc, tgt, z, pos_idx, key_mask) -> bool:
    """True iff reversed-world decoder logits are exactly the row-reversal
    of the original logits."""
    base = decoder_forward(params, cfg, enc, tgt, z, pos_idx, key_mask).data
    tgt_m, z_m, pos_m, mask_m = mirror_inputs(tgt, z, pos_idx, key_mask)
    mirrored = decoder_forward(mirror_params(params), cfg, enc, tgt_m, z_m, pos_m, mask_m).data
    return np.array_equal(mirrored, np.ascontiguousarray(base[:, ::-1]))
