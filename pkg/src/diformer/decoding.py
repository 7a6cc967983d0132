"""Inference: directional beam search, mask-predict, parallel easy-first,
sequence scoring, and bidirectional self-reranking.

Everything here is deterministic given (params, source, config): argmax
commits break ties toward the leftmost position / first candidate, and no
sampling happens at inference time.

Right-to-left decoding keeps hypotheses in natural (left-to-right) token
order and grows them on the left; positions count from the right via the
backward positional bank, so the model sees exactly what it saw for
L-tagged queries during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .corpus import BOS, EOS, MASK, PAD, pad_matrix
from .model import (
    DIR_L,
    DIR_R,
    DIR_S,
    EncoderState,
    ModelConfig,
    decoder_forward,
    encode,
    predict_length,
)

NAR_MODES = ("mask-predict", "easy-first")
AR_MODES = ("l2r", "r2l")


@dataclass
class DecodeConfig:
    mode: str = "l2r"
    ar_beam: int = 4
    length_beam: int = 5
    max_iters: int = 10  # NAR iteration budget, including rerank scoring passes
    self_rerank: bool = False
    max_len: int | None = None

    def __post_init__(self):
        if self.mode not in AR_MODES + NAR_MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.ar_beam < 1 or self.length_beam < 1 or self.max_iters < 1:
            raise ValueError("beam sizes and iteration counts must be >= 1")

    def effective_iters(self) -> int:
        """Refinement iterations actually run; self-reranking reserves two
        passes of the budget for scoring."""
        if self.self_rerank and self.mode in NAR_MODES:
            return max(1, self.max_iters - 2)
        return self.max_iters

    def budget_note(self) -> str:
        if self.self_rerank and self.mode in NAR_MODES:
            return f"refine={self.effective_iters()} score_passes=2"
        return f"refine={self.effective_iters()}"


@dataclass
class Hypothesis:
    tokens: list[int]  # natural order, BOS ... EOS
    confidences: np.ndarray  # per interior position, in (0, 1]
    scores: dict[str, float] = field(default_factory=dict)  # mean token log-probs
    origin: str = ""
    finished: bool = True

    def mean_confidence(self) -> float:
        return float(self.confidences.mean()) if len(self.confidences) else 1.0

    def content(self) -> list[int]:
        return self.tokens[1:-1]


@dataclass
class NARState:
    tokens: np.ndarray  # [n] ids, MASK at masked slots (display only)
    masked: np.ndarray  # [n] bool
    conf: np.ndarray  # [n] float64 stored confidences
    n: int
    sent: int
    origin: str
    rank: np.ndarray | None = None  # easy-first rank per slot (1 = easiest)
    trace: list | None = None


@dataclass
class TraceStep:
    label: str
    output: list  # token ids, or None for a mask
    context: list
    dirs: list[str]


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def encode_sources(params, cfg: ModelConfig, srcs: list[list[int]]) -> EncoderState:
    mat = pad_matrix(srcs)
    lens = np.array([len(s) for s in srcs], dtype=np.int64)
    return encode(params, cfg, mat, lens)


def slice_enc(enc: EncoderState, rows) -> EncoderState:
    return EncoderState(
        hidden=Tensor(enc.hidden.data[rows]),
        keep=enc.keep[rows],
        length_logits=Tensor(enc.length_logits.data[rows]),
    )


def _decode_logits(params, cfg, enc, sent_rows, toks, z, pos, mask, chunk: int = 1024) -> np.ndarray:
    """decoder_forward over row chunks; returns logits [A, W, V] as numpy."""
    out = []
    for lo in range(0, len(sent_rows), chunk):
        sl = slice(lo, lo + chunk)
        logits = decoder_forward(params, cfg, slice_enc(enc, sent_rows[sl]), toks[sl], z[sl], pos[sl], mask[sl])
        out.append(logits.data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# autoregressive beam search
# ---------------------------------------------------------------------------


def _ar_inputs(n_rows: int, t: int, direction: str):
    if direction == "R":
        z = np.full((n_rows, t), DIR_R, dtype=np.int64)
        pos = np.tile(np.arange(1, t + 1, dtype=np.int64), (n_rows, 1))
        mask = np.triu(np.ones((t, t), dtype=bool), 1)
        query_row = t - 1
    else:
        z = np.full((n_rows, t), DIR_L, dtype=np.int64)
        pos = np.tile(np.arange(t, 0, -1, dtype=np.int64), (n_rows, 1))
        mask = np.tril(np.ones((t, t), dtype=bool), -1)
        query_row = 0
    return z, pos, np.tile(mask, (n_rows, 1, 1)), query_row


def beam_ar_batch(
    params,
    cfg: ModelConfig,
    srcs: list[list[int]],
    direction: str,
    dcfg: DecodeConfig,
    enc: EncoderState | None = None,
    trace: dict[int, list[TraceStep]] | None = None,
) -> list[list[Hypothesis]]:
    """Length-normalized beam search, one hypothesis list per source.

    direction "R" grows hypotheses rightward from BOS until EOS; "L" grows
    leftward from EOS until BOS. Lists are sorted by descending mean token
    log-prob; if nothing finishes within the length cap the single best
    unfinished hypothesis is returned with finished=False.
    """
    if direction not in ("R", "L"):
        raise ValueError(f"direction must be R or L, got {direction!r}")
    if enc is None:
        enc = encode_sources(params, cfg, srcs)
    n_sent = len(srcs)
    beam = dcfg.ar_beam
    max_total = min(cfg.l_max, dcfg.max_len or cfg.l_max)
    start, stop = (BOS, EOS) if direction == "R" else (EOS, BOS)
    banned = sorted({PAD, MASK, start})

    active = [[((start,), 0.0)] for _ in range(n_sent)]
    finished: list[list[Hypothesis]] = [[] for _ in range(n_sent)]

    for t in range(1, max_total):
        rows, row_sent = [], []
        for s in range(n_sent):
            if len(finished[s]) >= beam:
                continue
            for hyp in active[s]:
                rows.append(hyp)
                row_sent.append(s)
        if not rows:
            break
        toks = np.array([h[0] for h in rows], dtype=np.int64)
        z, pos, mask, q_row = _ar_inputs(len(rows), t, direction)
        logits = _decode_logits(params, cfg, enc, np.array(row_sent), toks, z, pos, mask)
        logp = log_softmax(logits[:, q_row, :])
        logp[:, banned] = -np.inf

        by_sent: dict[int, list[tuple[float, int, int]]] = {s: [] for s in set(row_sent)}
        for r, s in enumerate(row_sent):
            base = rows[r][1]
            top = np.argsort(-logp[r], kind="stable")[: beam + 1]
            for tok in top:
                by_sent[s].append((base + logp[r, tok], r, int(tok)))

        for s, cands in by_sent.items():
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            new_active = []
            for ci, (total_lp, r, tok) in enumerate(cands):
                if not np.isfinite(total_lp):
                    continue
                seq = rows[r][0]
                new_seq = seq + (tok,) if direction == "R" else (tok,) + seq
                if trace is not None and ci == 0:
                    _trace_ar_step(trace, s, t, new_seq, direction)
                if tok == stop:
                    if len(finished[s]) < beam:
                        finished[s].append(
                            Hypothesis(
                                tokens=list(new_seq),
                                confidences=np.array([]),
                                scores={("l2r" if direction == "R" else "r2l"): total_lp / t},
                                origin=f"beam{len(finished[s])}",
                            )
                        )
                elif len(new_active) < beam:
                    new_active.append((new_seq, total_lp))
                if len(new_active) >= beam and len(finished[s]) >= beam:
                    break
            active[s] = new_active

    key = "l2r" if direction == "R" else "r2l"
    out = []
    for s in range(n_sent):
        hyps = sorted(finished[s], key=lambda h: -h.scores[key])
        if not hyps:
            seq, lp = max(active[s], key=lambda h: h[1]) if active[s] else ((start,), -np.inf)
            toks_full = seq + (stop,) if direction == "R" else (stop,) + seq
            hyps = [
                Hypothesis(
                    tokens=list(toks_full),
                    confidences=np.array([]),
                    scores={key: lp / max(len(seq), 1)},
                    origin="unfinished",
                    finished=False,
                )
            ]
        out.append(hyps)
    return out


def _trace_ar_step(trace, sent, t, seq, direction):
    # Table-4 style: output = tokens emitted so far, context = what the
    # model was fed this step, one direction tag per context token.
    natural = list(seq)
    if direction == "R":
        output, context = natural[1:], natural[:-1]
        dirs = ["R"] * len(context)
    else:
        output, context = natural[:-1], natural[1:]
        dirs = ["L"] * len(context)
    trace.setdefault(sent, []).append(TraceStep(label=f"step {t}", output=output, context=context, dirs=dirs))


def beam_ar(params, cfg, src: list[int], direction: str, dcfg: DecodeConfig) -> list[Hypothesis]:
    """Single-sentence convenience wrapper around beam_ar_batch."""
    return beam_ar_batch(params, cfg, [src], direction, dcfg)[0]


# ---------------------------------------------------------------------------
# sequence scoring
# ---------------------------------------------------------------------------


def score_sequences(params, cfg: ModelConfig, enc: EncoderState, sent_rows, targets: list[list[int]], direction: str) -> np.ndarray:
    """Mean token log-prob of each target under a fixed direction.

    R scores y_2..y_N from left context; L scores y_1..y_{N-1} from right
    context. One batched forward per call; encoder state is reused.
    """
    if direction not in ("R", "L"):
        raise ValueError(f"direction must be R or L, got {direction!r}")
    lens = np.array([len(y) for y in targets], dtype=np.int64)
    if (lens > cfg.l_max).any():
        raise ValueError(f"target longer than l_max={cfg.l_max}")
    a = len(targets)
    w = int(lens.max())
    toks = pad_matrix(targets, w)
    cols = np.arange(w)
    if direction == "R":
        z = np.full((a, w), DIR_R, dtype=np.int64)
        pos = np.tile(cols + 1, (a, 1))
        mask = np.tile(np.triu(np.ones((w, w), dtype=bool), 1), (a, 1, 1))
    else:
        z = np.full((a, w), DIR_L, dtype=np.int64)
        pos = np.clip(lens[:, None] - cols[None, :], 1, None)
        mask = np.tile(np.tril(np.ones((w, w), dtype=bool), -1), (a, 1, 1))
    mask |= (cols[None, :] >= lens[:, None])[:, None, :]  # PAD keys hidden
    pad_rows = cols[None, :] >= lens[:, None]
    row_for_pad = np.ones(w, dtype=bool)
    row_for_pad[0] = False  # PAD query rows keep BOS visible, outputs unused
    mask[pad_rows] = row_for_pad

    logits = _decode_logits(params, cfg, enc, np.asarray(sent_rows), toks, z, pos, mask)
    logp = log_softmax(logits)
    out = np.empty(a, dtype=np.float64)
    for r in range(a):
        n = int(lens[r])
        if direction == "R":
            rows_idx = np.arange(0, n - 1)
            tgt = toks[r, 1:n]
        else:
            rows_idx = np.arange(1, n)
            tgt = toks[r, 0 : n - 1]
        out[r] = logp[r, rows_idx, tgt].mean()
    return out


def score_sequence(params, cfg: ModelConfig, src: list[int], y: list[int], direction: str) -> float:
    """Single-pair convenience wrapper; encodes the source itself."""
    enc = encode_sources(params, cfg, [src])
    return float(score_sequences(params, cfg, enc, [0], [y], direction)[0])


# ---------------------------------------------------------------------------
# non-autoregressive refinement
# ---------------------------------------------------------------------------


def nar_init(params, cfg: ModelConfig, enc: EncoderState, length_beam: int, want_trace: bool = False) -> list[NARState]:
    """One state per predicted content length: BOS + masks + EOS, all masked."""
    lengths = predict_length(enc, length_beam, cfg.l_max)
    states = []
    for sent, cand in enumerate(lengths):
        for content, logp in cand:
            n = content + 2
            toks = np.full(n, MASK, dtype=np.int64)
            toks[0], toks[-1] = BOS, EOS
            masked = np.zeros(n, dtype=bool)
            masked[1:-1] = True
            conf = np.ones(n, dtype=np.float64)
            states.append(
                NARState(
                    tokens=toks,
                    masked=masked,
                    conf=conf,
                    n=n,
                    sent=sent,
                    origin=f"len{content}",
                    trace=[] if want_trace else None,
                )
            )
    return states


def _nar_forward(params, cfg, enc, states: list[NARState], masks_fn) -> np.ndarray:
    """Batched decoder pass over NAR states; returns log-probs [A, W, V]."""
    a = len(states)
    w = max(st.n for st in states)
    toks = pad_matrix([st.tokens.tolist() for st in states], w)
    lens = np.array([st.n for st in states])
    cols = np.arange(w)
    z = np.full((a, w), DIR_S, dtype=np.int64)
    pos = np.tile(cols + 1, (a, 1))
    key_mask = np.zeros((a, w, w), dtype=bool)
    for r, st in enumerate(states):
        key_mask[r, : st.n, : st.n] = masks_fn(st)
        key_mask[r, :, st.n :] = True
        key_mask[r, st.n :, :] = True
        key_mask[r, st.n :, 0] = False
    sent_rows = np.array([st.sent for st in states])
    logits = _decode_logits(params, cfg, enc, sent_rows, toks, z, pos, key_mask)
    logp = log_softmax(logits)
    logp[:, :, [PAD, BOS, EOS, MASK]] = -np.inf  # interior commits are content tokens
    return logp


def _commit(state: NARState, logp_row: np.ndarray, positions: np.ndarray) -> None:
    choice = np.argmax(logp_row[positions], axis=-1)
    state.tokens[positions] = choice
    state.conf[positions] = np.exp(logp_row[positions, choice])


def remask_count(n_content: int, T: int, t: int) -> int:
    """Number of lowest-confidence tokens re-masked after iteration t of T."""
    return (n_content * (T - t)) // T


def mask_predict_decode(params, cfg, enc, states: list[NARState], T: int) -> list[Hypothesis]:
    """Iterative re-masking refinement over a batch of states.

    Each iteration re-predicts the currently masked set (each S query hides
    that set, which contains itself), keeps stored confidences for
    committed tokens, then re-masks the floor(N(T-t)/T) lowest-confidence
    interior positions, ties toward the leftmost.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    for t in range(1, T + 1):
        live = [st for st in states if st.masked.any()]
        if live:
            def masks_fn(st):
                m = np.zeros((st.n, st.n), dtype=bool)
                m[:, st.masked] = True  # every query hides the masked set
                return m

            before = [st.tokens.copy() for st in live]
            logp = _nar_forward(params, cfg, enc, live, masks_fn)
            for r, st in enumerate(live):
                positions = np.flatnonzero(st.masked)
                _commit(st, logp[r], positions)
                st.masked[:] = False
        else:
            before = []
        for st in states:
            n_content = st.n - 2
            n_mask = remask_count(n_content, T, t)
            if n_mask > 0:
                interior = np.arange(1, st.n - 1)
                order = np.lexsort((interior, st.conf[interior]))
                worst = interior[order[:n_mask]]
                st.masked[:] = False
                st.masked[worst] = True
                st.tokens[worst] = MASK
        for idx, st in enumerate(live):
            if st.trace is not None:
                st.trace.append(_nar_trace_step(t, before[idx], st))
    return [_finish_nar(st) for st in states]


def easy_first_decode(params, cfg, enc, states: list[NARState], T: int) -> list[Hypothesis]:
    """Parallel easy-first refinement.

    Iteration 1 predicts every interior position from BOS/EOS + source
    alone and fixes a difficulty rank by descending probability (ties to
    the left rank first). Later iterations re-predict every interior
    position, each seeing only strictly easier positions' previous-iteration
    tokens.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    for t in range(1, T + 1):
        if t == 1:
            def masks_fn(st):
                m = np.zeros((st.n, st.n), dtype=bool)
                m[:, 1 : st.n - 1] = True
                return m
        else:
            def masks_fn(st):
                m = np.zeros((st.n, st.n), dtype=bool)
                interior = slice(1, st.n - 1)
                # hide interior keys ranked not-easier than the query
                rank = st.rank
                m[interior, interior] = rank[None, 1 : st.n - 1] >= rank[1 : st.n - 1, None]
                m[0, interior] = True
                m[st.n - 1, interior] = True
                return m

        before = [st.tokens.copy() for st in states]
        logp = _nar_forward(params, cfg, enc, states, masks_fn)
        for r, st in enumerate(states):
            if st.n <= 2:
                continue
            positions = np.arange(1, st.n - 1)
            _commit(st, logp[r], positions)
            if t == 1:
                st.masked[:] = False
                rank = np.zeros(st.n, dtype=np.int64)
                order = np.lexsort((positions, -st.conf[positions]))
                rank[positions[order]] = np.arange(1, len(positions) + 1)
                st.rank = rank
            if st.trace is not None:
                st.trace.append(_nar_trace_step(t, before[r], st))
    return [_finish_nar(st) for st in states]


def _finish_nar(st: NARState) -> Hypothesis:
    if st.masked.any():
        raise AssertionError("refinement ended with masked positions")
    return Hypothesis(
        tokens=st.tokens.tolist(),
        confidences=st.conf[1 : st.n - 1].copy(),
        origin=st.origin,
    )


def _nar_trace_step(t: int, before: np.ndarray, st: NARState) -> TraceStep:
    out = [None if st.masked[i] else int(v) for i, v in enumerate(st.tokens)]
    ctx = [None if v == MASK else int(v) for v in before]
    return TraceStep(label=f"iter {t}", output=out, context=ctx, dirs=["S"] * (st.n - 2))


# ---------------------------------------------------------------------------
# self-reranking and corpus decoding
# ---------------------------------------------------------------------------


def self_rerank(params, cfg, enc: EncoderState, sent_rows, candidates: list[Hypothesis]) -> int:
    """Score every candidate in both directions, average, return best index.

    Fresh batched scores replace any score computed during generation so
    both directions are obtained identically; ties keep the first
    candidate.
    """
    targets = [c.tokens for c in candidates]
    s_r = score_sequences(params, cfg, enc, sent_rows, targets, "R")
    s_l = score_sequences(params, cfg, enc, sent_rows, targets, "L")
    best, best_score = 0, -np.inf
    for i, c in enumerate(candidates):
        c.scores["l2r"] = float(s_r[i])
        c.scores["r2l"] = float(s_l[i])
        avg = (s_r[i] + s_l[i]) / 2.0
        if avg > best_score:
            best, best_score = i, float(avg)
    return best


def translate_corpus(
    params,
    cfg: ModelConfig,
    dcfg: DecodeConfig,
    srcs: list[list[int]],
    collect_traces: bool = False,
) -> tuple[list[Hypothesis], dict[int, list[TraceStep]]]:
    """Decode every source with the configured mode; returns one hypothesis
    per sentence plus (optionally) per-sentence traces."""
    traces: dict[int, list[TraceStep]] = {}
    enc = encode_sources(params, cfg, srcs)
    if dcfg.mode in AR_MODES:
        direction = "R" if dcfg.mode == "l2r" else "L"
        hyp_lists = beam_ar_batch(params, cfg, srcs, direction, dcfg, enc=enc, trace=traces if collect_traces else None)
        out = []
        for s, hyps in enumerate(hyp_lists):
            if dcfg.self_rerank and len(hyps) > 1:
                out.append(hyps[self_rerank(params, cfg, enc, [s] * len(hyps), hyps)])
            elif dcfg.self_rerank:
                self_rerank(params, cfg, enc, [s], hyps)
                out.append(hyps[0])
            else:
                out.append(hyps[0])
        return out, traces

    T = dcfg.effective_iters()
    states = nar_init(params, cfg, enc, dcfg.length_beam, want_trace=collect_traces)
    if dcfg.mode == "mask-predict":
        hyps = mask_predict_decode(params, cfg, enc, states, T)
    else:
        hyps = easy_first_decode(params, cfg, enc, states, T)
    by_sent: dict[int, list[tuple[NARState, Hypothesis]]] = {}
    for st, h in zip(states, hyps):
        by_sent.setdefault(st.sent, []).append((st, h))
    out = []
    for s in range(len(srcs)):
        group = by_sent[s]
        cands = [h for _, h in group]
        if dcfg.self_rerank:
            pick = self_rerank(params, cfg, enc, [s] * len(cands), cands)
        else:
            pick, best_conf = 0, -np.inf
            for i, c in enumerate(cands):
                mc = c.mean_confidence()
                if mc > best_conf:
                    pick, best_conf = i, mc
        out.append(cands[pick])
        if collect_traces and group[pick][0].trace is not None:
            traces[s] = group[pick][0].trace
    return out, traces


# ---------------------------------------------------------------------------
# trace rendering
# ---------------------------------------------------------------------------


def render_traces(traces: dict[int, list[TraceStep]], vocab, mode: str) -> str:
    """Three sub-rows per step: output, context with '-' for masks, directions."""

    def tok(t):
        if t is None:
            return "-"
        if t == BOS:
            return "[B]"
        if t == EOS:
            return "[E]"
        if t == MASK:
            return "-"
        return vocab.id_to_token[t]

    lines = []
    for sent in sorted(traces):
        for step in traces[sent]:
            lines.append(f"[{mode} sentence {sent} {step.label}]")
            lines.append(" ".join(tok(t) for t in step.output))
            lines.append(" ".join(tok(t) for t in step.context))
            lines.append(" ".join(step.dirs))
    return "\n".join(lines) + ("\n" if lines else "")
