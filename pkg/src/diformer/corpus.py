"""Vocabularies, synthetic translation tasks, parallel files, batching.

Text is whitespace-tokenized, one sentence per line. Encoded sequences
are always wrapped as [BOS] ... [EOS]. Parallel data lives in file pairs
<name>.src / <name>.tgt; a vocabulary file has one token per line with
id = line number + 5 (after the reserved ids).
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"]
N_RESERVED = len(RESERVED)

DEFAULT_L_MAX = 64


class Vocabulary:
    """Token <-> id bijection with fixed reserved ids 0..4."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def content_ids(self) -> range:
        return range(N_RESERVED, len(self.id_to_token))

    def encode(self, line: str) -> list[int]:
        """Wrap a whitespace-tokenized line in BOS/EOS; OOV maps to UNK."""
        ids = [self.token_to_id.get(tok, UNK) for tok in line.split()]
        return [BOS] + ids + [EOS]

    def decode(self, ids) -> str:
        """Inverse of encode; BOS/EOS/PAD are stripped."""
        return " ".join(self.id_to_token[i] for i in ids if i not in (PAD, BOS, EOS))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token[N_RESERVED:]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])


def build_vocab(lines, min_count: int = 1) -> Vocabulary:
    """Count tokens across lines; keep those with frequency >= min_count.

    Tokens are ordered by (-frequency, token) so ids are deterministic.
    """
    counts = Counter()
    n_lines = 0
    for line in lines:
        n_lines += 1
        counts.update(line.split())
    if n_lines == 0 or not counts:
        raise ValueError("empty corpus: no tokens to build a vocabulary from")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class ParallelPair:
    """One aligned sentence pair, both sides BOS/EOS-wrapped."""

    src: list[int]
    tgt: list[int]


@dataclass
class PaddedBatch:
    """PAD-filled id matrices plus the true (unpadded) lengths."""

    src: np.ndarray  # [B, Ws] int
    tgt: np.ndarray  # [B, Wt] int
    src_len: np.ndarray  # [B]
    tgt_len: np.ndarray  # [B]


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------


@dataclass
class SyntheticTask:
    """A generated parallel corpus plus the vocabulary it is written in."""

    vocab: Vocabulary
    train: list[ParallelPair]
    test: list[ParallelPair]
    substitution: dict[int, int] = field(default_factory=dict)


def _token_names(vocab_size: int) -> list[str]:
    width = len(str(vocab_size - 1))
    return [f"w{i:0{width}d}" for i in range(vocab_size)]


def _pair_hash(a: int, b: int) -> int:
    # Plain integer mixing; must be stable across runs and platforms
    # (Python's hash() is salted, so it cannot be used here).
    return (a * 2654435761 + b * 40503 + 97) % 4294967296


def gen_lexmap_task(
    n_pairs: int,
    vocab_size: int = 50,
    len_range: tuple[int, int] = (5, 15),
    swap_prob: float = 0.3,
    seed: int = 0,
    mode: str = "lexmap",
    n_test: int = 0,
    noise_prob: float = 0.0,
    l_max: int = DEFAULT_L_MAX,
) -> SyntheticTask:
    """Generate a synthetic translation task.

    Modes: "copy" (target = source), "reverse" (target = reversed source),
    "lexmap" (per-token bijective substitution, then each disjoint adjacent
    pair is swapped when a hash of the two source tokens lands below
    swap_prob, so the target stays a deterministic function of the source).

    noise_prob > 0 replaces each target token, with that probability, by a
    synonym drawn from a second substitution table; this makes targets
    nondeterministic given the source (used for distillation experiments).
    """
    if vocab_size < 10:
        raise ValueError(f"vocab_size must be >= 10, got {vocab_size}")
    lo, hi = len_range
    if not (3 <= lo <= hi <= l_max - 2):
        raise ValueError(f"len_range {len_range} outside [3, {l_max - 2}]")
    if mode not in ("copy", "reverse", "lexmap"):
        raise ValueError(f"unknown task mode {mode!r}")

    vocab = Vocabulary(_token_names(vocab_size))
    ids = np.array(vocab.content_ids)
    perm_rng = substream(seed, "lexmap/substitution")
    subst = dict(zip(ids.tolist(), perm_rng.permutation(ids).tolist()))
    synonym = {a: subst[subst[a]] for a in ids.tolist()}  # second image for noise

    def translate(src_content: list[int], noise_rng: np.random.Generator) -> list[int]:
        if mode == "copy":
            out = list(src_content)
        elif mode == "reverse":
            out = list(reversed(src_content))
        else:
            out = [subst[t] for t in src_content]
            for i in range(0, len(out) - 1, 2):
                if _pair_hash(src_content[i], src_content[i + 1]) % 1000 < swap_prob * 1000:
                    out[i], out[i + 1] = out[i + 1], out[i]
        if noise_prob > 0:
            out = [synonym[t] if noise_rng.random() < noise_prob else t for t in out]
        return out

    def draw(count: int, stream: str) -> list[ParallelPair]:
        rng = substream(seed, stream)
        # Separate stream so sources are identical across noise settings.
        noise_rng = substream(seed, stream + "/noise")
        pairs = []
        for _ in range(count):
            n = int(rng.integers(lo, hi + 1))
            src = rng.choice(ids, size=n).tolist()
            tgt = translate(src, noise_rng)
            pairs.append(ParallelPair([BOS] + src + [EOS], [BOS] + tgt + [EOS]))
        return pairs

    return SyntheticTask(
        vocab=vocab,
        train=draw(n_pairs, "lexmap/train"),
        test=draw(n_test, "lexmap/test"),
        substitution=subst,
    )


# ---------------------------------------------------------------------------
# parallel files
# ---------------------------------------------------------------------------


def save_parallel(pairs: list[ParallelPair], vocab: Vocabulary, src_path, tgt_path) -> None:
    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft:
        for p in pairs:
            fs.write(vocab.decode(p.src) + "\n")
            ft.write(vocab.decode(p.tgt) + "\n")


def load_parallel_file(src_path, tgt_path, vocab: Vocabulary, l_max: int = DEFAULT_L_MAX) -> list[ParallelPair]:
    """Pair up line i of each file; overlength lines are dropped and counted."""
    with open(src_path, encoding="utf-8") as f:
        src_lines = f.read().splitlines()
    with open(tgt_path, encoding="utf-8") as f:
        tgt_lines = f.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"line count mismatch: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}")
    pairs = []
    dropped = 0
    for s, t in zip(src_lines, tgt_lines):
        ps, pt = vocab.encode(s), vocab.encode(t)
        if len(ps) > l_max or len(pt) > l_max:
            dropped += 1
            continue
        pairs.append(ParallelPair(ps, pt))
    if dropped:
        log.warning("dropped %d pairs longer than %d tokens", dropped, l_max)
    return pairs


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def pad_matrix(seqs: list[list[int]], width: int | None = None) -> np.ndarray:
    width = width or max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batches(pairs: list[ParallelPair], max_tokens: int, seed: int | np.random.Generator = 0) -> list[PaddedBatch]:
    """Shuffle, bucket by target length, and greedily pack into batches.

    A batch is closed once rows x widest-row would exceed max_tokens, where
    a pair's width is max(|src|, |tgt|). Every pair lands in exactly one
    batch per call.
    """
    if not pairs:
        return []
    widths = [max(len(p.src), len(p.tgt)) for p in pairs]
    if max(widths) > max_tokens:
        raise ValueError(f"a pair of width {max(widths)} cannot fit in max_tokens={max_tokens}")
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "batches")
    order = rng.permutation(len(pairs))
    order = sorted(order.tolist(), key=lambda i: len(pairs[i].tgt))

    batches: list[PaddedBatch] = []
    group: list[int] = []
    group_width = 0
    for i in order:
        w = max(group_width, widths[i])
        if group and (len(group) + 1) * w > max_tokens:
            batches.append(_finish_batch([pairs[j] for j in group]))
            group, group_width = [], 0
        group.append(i)
        group_width = max(group_width, widths[i])
    if group:
        batches.append(_finish_batch([pairs[j] for j in group]))
    return batches


def _finish_batch(pairs: list[ParallelPair]) -> PaddedBatch:
    return PaddedBatch(
        src=pad_matrix([p.src for p in pairs]),
        tgt=pad_matrix([p.tgt for p in pairs]),
        src_len=np.array([len(p.src) for p in pairs], dtype=np.int64),
        tgt_len=np.array([len(p.tgt) for p in pairs], dtype=np.int64),
    )
