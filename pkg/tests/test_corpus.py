import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diformer import corpus
from diformer.corpus import (
    BOS,
    EOS,
    PAD,
    UNK,
    ParallelPair,
    Vocabulary,
    build_vocab,
    gen_lexmap_task,
    load_parallel_file,
    make_batches,
    save_parallel,
)


class TestVocabulary:
    def test_build_min_count_one(self):
        v = build_vocab(["a a b"], min_count=1)
        assert v.token_to_id["a"] == 5
        assert v.token_to_id["b"] == 6

    def test_build_min_count_two_maps_rare_to_unk(self):
        v = build_vocab(["a a b"], min_count=2)
        assert "b" not in v.token_to_id
        assert v.encode("b") == [BOS, UNK, EOS]

    def test_empty_corpus_raises(self):
        with pytest.raises(ValueError, match="empty corpus"):
            build_vocab([])

    def test_encode_empty_line(self):
        v = build_vocab(["x y"])
        assert v.encode("") == [BOS, EOS]

    def test_encode_known_tokens(self):
        v = build_vocab(["x y"])
        assert v.encode("x y") == [BOS, v.token_to_id["x"], v.token_to_id["y"], EOS]

    def test_fifty_type_round_trip(self):
        task = gen_lexmap_task(0, vocab_size=50, seed=3)
        v = task.vocab
        for tok in v.id_to_token[corpus.N_RESERVED :]:
            assert v.decode(v.encode(tok)) == tok

    @given(st.lists(st.sampled_from(["aa", "bb", "cc", "dd"]), max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, toks):
        v = build_vocab(["aa bb cc dd"])
        line = " ".join(toks)
        assert v.decode(v.encode(line)) == line

    def test_save_load(self, tmp_path):
        v = build_vocab(["foo bar baz foo"])
        v.save(tmp_path / "vocab.txt")
        v2 = Vocabulary.load(tmp_path / "vocab.txt")
        assert v2.id_to_token == v.id_to_token


class TestSyntheticTasks:
    def test_copy_mode(self):
        task = gen_lexmap_task(20, mode="copy", seed=1)
        for p in task.train:
            assert p.tgt == p.src

    def test_reverse_mode(self):
        task = gen_lexmap_task(20, mode="reverse", seed=1)
        for p in task.train:
            assert p.tgt[1:-1] == list(reversed(p.src[1:-1]))

    def test_lexmap_no_swap_matches_table(self):
        task = gen_lexmap_task(50, swap_prob=0.0, seed=5)
        for p in task.train:
            assert p.tgt[1:-1] == [task.substitution[t] for t in p.src[1:-1]]

    def test_lexmap_is_function_of_source(self):
        a = gen_lexmap_task(200, swap_prob=0.5, seed=9)
        seen = {}
        for p in a.train:
            key = tuple(p.src)
            assert seen.setdefault(key, tuple(p.tgt)) == tuple(p.tgt)

    def test_regeneration_is_identical(self):
        a = gen_lexmap_task(30, seed=11, n_test=5)
        b = gen_lexmap_task(30, seed=11, n_test=5)
        assert [(p.src, p.tgt) for p in a.train] == [(p.src, p.tgt) for p in b.train]
        assert [(p.src, p.tgt) for p in a.test] == [(p.src, p.tgt) for p in b.test]

    def test_wrapping_and_lengths(self):
        task = gen_lexmap_task(30, len_range=(3, 7), seed=2)
        for p in task.train:
            assert p.src[0] == BOS and p.src[-1] == EOS
            assert p.tgt[0] == BOS and p.tgt[-1] == EOS
            assert 5 <= len(p.src) <= 9

    def test_bad_ranges(self):
        with pytest.raises(ValueError):
            gen_lexmap_task(1, len_range=(1, 5))
        with pytest.raises(ValueError):
            gen_lexmap_task(1, vocab_size=4)

    def test_noise_changes_some_targets(self):
        clean = gen_lexmap_task(100, seed=4, noise_prob=0.0)
        noisy = gen_lexmap_task(100, seed=4, noise_prob=0.1)
        diffs = sum(c.tgt != n.tgt for c, n in zip(clean.train, noisy.train))
        assert diffs > 10
        for c, n in zip(clean.train, noisy.train):
            assert c.src == n.src


class TestParallelFiles:
    def test_one_line_files(self, tmp_path):
        v = build_vocab(["p q"])
        (tmp_path / "d.src").write_text("p\n")
        (tmp_path / "d.tgt").write_text("q\n")
        pairs = load_parallel_file(tmp_path / "d.src", tmp_path / "d.tgt", v)
        assert len(pairs) == 1
        assert pairs[0].src == [BOS, v.token_to_id["p"], EOS]

    def test_mismatched_counts(self, tmp_path):
        v = build_vocab(["p"])
        (tmp_path / "d.src").write_text("p\np\np\n")
        (tmp_path / "d.tgt").write_text("p\np\n")
        with pytest.raises(ValueError, match="mismatch"):
            load_parallel_file(tmp_path / "d.src", tmp_path / "d.tgt", v)

    def test_unreadable_file(self, tmp_path):
        v = build_vocab(["p"])
        with pytest.raises(OSError):
            load_parallel_file(tmp_path / "nope.src", tmp_path / "nope.tgt", v)

    def test_write_read_round_trip(self, tmp_path):
        task = gen_lexmap_task(25, seed=6)
        save_parallel(task.train, task.vocab, tmp_path / "t.src", tmp_path / "t.tgt")
        again = load_parallel_file(tmp_path / "t.src", tmp_path / "t.tgt", task.vocab)
        assert [(p.src, p.tgt) for p in again] == [(p.src, p.tgt) for p in task.train]

    def test_overlength_dropped(self, tmp_path):
        v = build_vocab(["p"])
        (tmp_path / "d.src").write_text("p\n" + " ".join(["p"] * 80) + "\n")
        (tmp_path / "d.tgt").write_text("p\np\n")
        pairs = load_parallel_file(tmp_path / "d.src", tmp_path / "d.tgt", v, l_max=64)
        assert len(pairs) == 1


def mkpair(n_src, n_tgt):
    return ParallelPair([BOS] + [5] * (n_src - 2) + [EOS], [BOS] + [6] * (n_tgt - 2) + [EOS])


class TestBatching:
    def test_single_pair_single_batch(self):
        batches = make_batches([mkpair(4, 4)], max_tokens=64)
        assert len(batches) == 1
        assert batches[0].src.shape == (1, 4)

    def test_length_bucketing_packs_equal_lengths(self):
        pairs = [mkpair(4, 4), mkpair(5, 5), mkpair(4, 4)]
        batches = make_batches(pairs, max_tokens=10)
        sizes = sorted(tuple(b.tgt_len.tolist()) for b in batches)
        assert sizes == [(4, 4), (5,)]

    def test_pair_too_long_raises(self):
        with pytest.raises(ValueError, match="max_tokens"):
            make_batches([mkpair(30, 30)], max_tokens=10)

    def test_epoch_coverage_multiset(self):
        rng = np.random.default_rng(0)
        pairs = [mkpair(int(rng.integers(3, 12)), int(rng.integers(3, 12))) for _ in range(1000)]
        batches = make_batches(pairs, max_tokens=128, seed=7)
        got = []
        for b in batches:
            for r in range(b.src.shape[0]):
                got.append(
                    (tuple(b.src[r, : b.src_len[r]].tolist()), tuple(b.tgt[r, : b.tgt_len[r]].tolist()))
                )
        want = [(tuple(p.src), tuple(p.tgt)) for p in pairs]
        assert sorted(got) == sorted(want)

    def test_pad_only_after_eos(self):
        pairs = [mkpair(4, 6), mkpair(4, 3)]
        b = make_batches(pairs, max_tokens=64)[0]
        for row, n in zip(b.tgt, b.tgt_len):
            assert (row[:n] != PAD).all()
            assert (row[n:] == PAD).all()

    def test_budget_respected(self):
        rng = np.random.default_rng(1)
        pairs = [mkpair(int(rng.integers(3, 12)), int(rng.integers(3, 12))) for _ in range(300)]
        for b in make_batches(pairs, max_tokens=48, seed=3):
            assert b.src.shape[0] * max(b.src.shape[1], b.tgt.shape[1]) <= 48
