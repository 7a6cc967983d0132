"""Joint training of all generation directions plus length prediction.

Each target position gets a sampled direction tag; targets are shifted
per tag (next token for R, previous for L, itself for S) so one forward
pass trains every direction at once. Attention masks realize the per-tag
context rules and are the only thing standing between a query and the
future, so their construction is deliberately conservative and heavily
probed by the metrics module.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor, adam_step, backward
from .corpus import BOS, EOS, PAD, PaddedBatch, ParallelPair, make_batches
from .model import DIR_L, DIR_R, DIR_S, EncoderState, ModelConfig, decoder_forward, directed_positions, encode
from .rng import substream


def sample_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    """Direction codes for one sentence: endpoints fixed R/L, interior uniform."""
    if n < 2:
        raise ValueError(f"need at least BOS and EOS, got length {n}")
    z = np.empty(n, dtype=np.int64)
    z[0] = DIR_R
    z[-1] = DIR_L
    if n > 2:
        z[1:-1] = rng.integers(0, 3, size=n - 2)
    return z


def build_shifted_targets(y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Per-position prediction targets: y[i+1] for R, y[i-1] for L, y[i] for S.

    A shift that would step outside the sequence yields PAD, which the loss
    ignores; with valid direction sequences (endpoints R/L) that never
    happens, but the all-R teacher-forcing configuration relies on it for
    the final position.
    """
    y = np.asarray(y)
    z = np.asarray(z)
    if y.shape != z.shape:
        raise ValueError(f"target/direction length mismatch: {y.shape} vs {z.shape}")
    if not np.isin(z, (DIR_R, DIR_S, DIR_L)).all():
        raise ValueError("direction codes must be R, S or L")
    n = len(y)
    out = np.empty(n, dtype=y.dtype)
    for i in range(n):
        j = i + 1 if z[i] == DIR_R else i - 1 if z[i] == DIR_L else i
        out[i] = y[j] if 0 <= j < n else PAD
    return out


def build_attention_mask(z: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """[n, n] boolean key mask (True = hidden) for one sentence.

    R rows hide everything to the right, L rows everything to the left.
    S rows share one random interior subset M (|M| uniform in 1..n-2,
    never touching BOS/EOS) and additionally hide themselves.
    """
    z = np.asarray(z)
    if z.shape != (n,):
        raise ValueError(f"direction sequence shape {z.shape} does not match n={n}")
    mask = np.zeros((n, n), dtype=bool)
    cols = np.arange(n)
    rows_r = z == DIR_R
    rows_l = z == DIR_L
    rows_s = z == DIR_S
    mask[rows_r] = cols[None, :] > cols[rows_r][:, None]
    mask[rows_l] = cols[None, :] < cols[rows_l][:, None]
    if rows_s.any():
        interior = np.arange(1, n - 1)
        m_size = int(rng.integers(1, n - 1))  # uniform over 1..n-2
        chosen = rng.choice(interior, size=m_size, replace=False)
        s_row = np.zeros(n, dtype=bool)
        s_row[chosen] = True
        mask[rows_s] = s_row
        mask[rows_s, cols[rows_s]] = True  # self always hidden for S
    return mask


@dataclass
class TrainBatch:
    src: np.ndarray  # [B, Ws]
    src_len: np.ndarray
    tgt_in: np.ndarray  # [B, W] ground truth fed to the decoder as keys
    tgt_len: np.ndarray
    z: np.ndarray  # [B, W] direction codes
    pos_idx: np.ndarray  # [B, W] 1-based directed positions
    key_mask: np.ndarray  # [B, W, W] True = hidden
    shifted: np.ndarray  # [B, W] targets, PAD where ignored
    len_targets: np.ndarray  # [B] class index = content length - 1


def make_train_batch(batch: PaddedBatch, rng: np.random.Generator, direction_mode: str = "sampled") -> TrainBatch:
    """Assemble directions, shifted targets and masks for one padded batch.

    direction_mode "fixed-right" forces z=R everywhere (the pure
    left-to-right teacher-forcing configuration); default is per-token
    sampling.
    """
    if direction_mode not in ("sampled", "fixed-right"):
        raise ValueError(f"unknown direction_mode {direction_mode!r}")
    b, w = batch.tgt.shape
    z = np.zeros((b, w), dtype=np.int64)
    key_mask = np.ones((b, w, w), dtype=bool)
    shifted = np.full((b, w), PAD, dtype=np.int64)
    for r in range(b):
        n = int(batch.tgt_len[r])
        if direction_mode == "fixed-right":
            zr = np.full(n, DIR_R, dtype=np.int64)
        else:
            zr = sample_directions(n, rng)
        z[r, :n] = zr
        key_mask[r, :n, :n] = build_attention_mask(zr, n, rng)
        key_mask[r, :, n:] = True  # PAD keys hidden everywhere
        key_mask[r, n:, 0] = False  # PAD query rows keep BOS visible
        shifted[r, :n] = build_shifted_targets(batch.tgt[r, :n], zr)
    pos_idx = directed_positions(z, batch.tgt_len)
    return TrainBatch(
        src=batch.src,
        src_len=batch.src_len,
        tgt_in=batch.tgt,
        tgt_len=batch.tgt_len,
        z=z,
        pos_idx=pos_idx,
        key_mask=key_mask,
        shifted=shifted,
        len_targets=batch.tgt_len - 3,  # content length minus 1
    )


def lr_schedule(step: int, peak: float = 5e-4, warmup: int = 400) -> float:
    """Linear warmup to peak, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if step <= warmup:
        return peak * step / warmup
    return peak * (warmup / step) ** 0.5


def dlm_loss(params, cfg: ModelConfig, tb: TrainBatch, drop_rng=None) -> tuple[Tensor, Tensor, Tensor, EncoderState]:
    """Forward pass producing (total, generation loss, length loss, encoder state)."""
    enc = encode(params, cfg, tb.src, tb.src_len, drop_rng)
    logits = decoder_forward(params, cfg, enc, tb.tgt_in, tb.z, tb.pos_idx, tb.key_mask, drop_rng)
    b, w, v = logits.shape
    loss_dlm = ad.cross_entropy(ad.reshape(logits, (b * w, v)), tb.shifted.reshape(-1), ignore=PAD)
    loss_len = ad.cross_entropy(enc.length_logits, tb.len_targets)
    total = ad.add(loss_dlm, ad.scale(loss_len, cfg.lambda_len))
    return total, loss_dlm, loss_len, enc


def dlm_train_step(tb: TrainBatch, params, cfg: ModelConfig, opt: AdamState, lr: float, drop_rng=None) -> tuple[float, float]:
    """One optimizer update; returns (generation loss, length loss)."""
    with Tape() as tape:
        total, loss_dlm, loss_len, _ = dlm_loss(params, cfg, tb, drop_rng)
    if not np.isfinite(total.data):
        raise FloatingPointError(
            f"non-finite loss (dlm={loss_dlm.item()!r}, len={loss_len.item()!r}) on batch "
            f"of {tb.src.shape[0]} sentences, target lengths {tb.tgt_len.tolist()[:16]}"
        )
    backward(total, tape)
    adam_step(params, opt, lr)
    return loss_dlm.item(), loss_len.item()


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    steps: int
    best_loss: float
    metrics: list[str]


def train_loop(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    pairs: list[ParallelPair],
    steps: int,
    seed: int,
    max_tokens: int = 4096,
    lr_peak: float = 5e-4,
    warmup: int = 400,
    direction_mode: str = "sampled",
    log_every: int = 1,
    log_fn=None,
    snapshot_every: int = 200,
) -> TrainResult:
    """Run the optimizer for a fixed number of steps.

    Emits one tab-separated metrics line per step: step, lr, generation
    loss, length loss, target tokens per second. Keeps the parameter
    snapshot with the best smoothed loss and returns it.
    """
    opt = AdamState(params)
    metrics: list[str] = []
    ema = None
    best = (np.inf, None)
    step = 0
    epoch = 0
    while step < steps:
        batches = make_batches(pairs, max_tokens, substream(seed, f"epoch/{epoch}"))
        epoch += 1
        for pb in batches:
            step += 1
            if step > steps:
                break
            rng = substream(seed, f"step/{step}")
            tb = make_train_batch(pb, rng, direction_mode)
            drop_rng = substream(seed, f"dropout/{step}") if cfg.dropout > 0 else None
            lr = lr_schedule(step, lr_peak, warmup)
            t0 = time.perf_counter()
            loss_dlm, loss_len = dlm_train_step(tb, params, cfg, opt, lr, drop_rng)
            dt = max(time.perf_counter() - t0, 1e-9)
            n_tokens = int(tb.tgt_len.sum())
            if step % log_every == 0 or step == steps:
                line = f"{step}\t{lr:.6g}\t{loss_dlm:.6f}\t{loss_len:.6f}\t{n_tokens / dt:.1f}"
                metrics.append(line)
                if log_fn:
                    log_fn(line)
            total = loss_dlm + cfg.lambda_len * loss_len
            ema = total if ema is None else 0.9 * ema + 0.1 * total
            if step % snapshot_every == 0 or step == steps:
                if ema < best[0]:
                    best = (ema, {k: t.data.copy() for k, t in params.items()})
    if best[1] is not None:
        for k, t in params.items():
            t.data = best[1][k]
    return TrainResult(params=params, steps=step, best_loss=best[0], metrics=metrics)


def distill_dataset(
    teacher_params: dict[str, Tensor],
    teacher_cfg: ModelConfig,
    pairs: list[ParallelPair],
    beam: int = 4,
    log_fn=None,
) -> list[ParallelPair]:
    """Replace every target with the teacher's left-to-right beam output.

    Sentences whose decode never finishes keep their original target (and
    are reported through log_fn).
    """
    from .decoding import DecodeConfig, beam_ar_batch

    dcfg = DecodeConfig(mode="l2r", ar_beam=beam)
    srcs = [p.src for p in pairs]
    hyp_lists = beam_ar_batch(teacher_params, teacher_cfg, srcs, "R", dcfg)
    out = []
    kept = 0
    for pair, hyps in zip(pairs, hyp_lists):
        best = hyps[0]
        if best.finished:
            out.append(ParallelPair(list(pair.src), list(best.tokens)))
        else:
            kept += 1
            out.append(ParallelPair(list(pair.src), list(pair.tgt)))
    if kept and log_fn:
        log_fn(f"distill: kept {kept} original targets (teacher decode unfinished)")
    return out
