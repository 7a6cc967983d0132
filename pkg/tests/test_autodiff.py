import math

import numpy as np
import pytest

from _gradcheck import fd_check
from diformer import autodiff as ad
from diformer.autodiff import AdamState, Tape, Tensor, adam_step, backward
from diformer.rng import substream


def rand(shape, rng, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2, dtype=np.float32))
        b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
        assert np.array_equal(ad.matmul(a, b).data, b.data)

    def test_selector_row(self):
        a = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
        b = Tensor(np.array([[5.0], [7.0]]))
        assert np.array_equal(ad.matmul(a, b).data, np.array([[5.0], [0.0]], dtype=np.float32))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="inner dims"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_matches_finite_differences(self):
        rng = substream(7, "test/matmul")
        a = rand((3, 4), rng)
        b = rand((4, 2), rng)
        fd_check(lambda x, y: ad.ssum(ad.matmul(x, y)), [a, b])

    def test_grad_batched(self):
        rng = substream(8, "test/matmul-batched")
        a = rand((2, 3, 3, 4), rng)
        b = rand((2, 3, 4, 2), rng)
        fd_check(lambda x, y: ad.ssum(ad.matmul(x, y)), [a, b])

    def test_grad_shared_weight(self):
        rng = substream(9, "test/matmul-weight")
        a = rand((2, 3, 4), rng)
        w = rand((4, 5), rng)
        fd_check(lambda x, y: ad.ssum(ad.matmul(x, y)), [a, w])


class TestMaskedSoftmax:
    def test_uniform(self):
        out = ad.masked_softmax(Tensor(np.zeros(3)), np.zeros(3, dtype=bool))
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-7)

    def test_two_way_hand_value(self):
        out = ad.masked_softmax(Tensor(np.array([5.0, 1.0, 9.0])), np.array([False, True, False]))
        assert out.data[1] == 0.0
        assert out.data[0] == pytest.approx(0.01799, abs=1e-5)
        assert out.data[2] == pytest.approx(0.98201, abs=1e-5)

    def test_singleton(self):
        out = ad.masked_softmax(Tensor(np.array([3.7])), np.array([False]))
        assert out.data[0] == 1.0

    def test_fully_masked_row_raises(self):
        with pytest.raises(ValueError, match="empty context"):
            ad.masked_softmax(Tensor(np.zeros((2, 3))), np.array([[False] * 3, [True] * 3]))

    def test_masked_entries_bitwise_zero(self):
        rng = substream(3, "test/softmax-zero")
        logits = rand((4, 9), rng)
        mask = rng.random((4, 9)) < 0.4
        mask[:, 0] = False
        out = ad.masked_softmax(Tensor(logits), mask)
        assert (out.data[mask] == 0.0).all()
        sums = out.data.sum(axis=-1)
        assert np.allclose(sums, 1.0, atol=1e-6)

    def test_grad_matches_finite_differences(self):
        rng = substream(4, "test/softmax-grad")
        logits = rand((3, 6), rng)
        mask = np.zeros((3, 6), dtype=bool)
        mask[0, 2] = mask[1, 4] = mask[1, 5] = True
        w = rand((3, 6), rng)  # random linear functional to get a scalar

        def f(x):
            return ad.ssum(ad.mul(ad.masked_softmax(x, mask), Tensor(w.astype(x.dtype))))

        fd_check(f, [logits])


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = Tensor(np.full((4,), 2.5))
        out = ad.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0, atol=1e-6)

    def test_symmetric_pair(self):
        out = ad.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [1.0, -1.0], atol=1e-2)

    def test_row_statistics(self):
        rng = substream(5, "test/ln-stats")
        x = rand((64,), rng)
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(64)), Tensor(np.zeros(64))).data
        assert abs(out.mean()) < 1e-6
        assert 1 - 1e-3 < out.var() < 1 + 1e-3

    def test_grad_matches_finite_differences(self):
        rng = substream(6, "test/ln-grad")
        x = rand((3, 5), rng)
        g = rand((5,), rng)
        b = rand((5,), rng)
        w = rand((3, 5), rng)

        def f(xx, gg, bb):
            return ad.ssum(ad.mul(ad.layer_norm(xx, gg, bb), Tensor(w.astype(xx.dtype))))

        fd_check(f, [x, g, b])


class TestCrossEntropy:
    def test_confident_correct_is_near_zero(self):
        logits = np.full((2, 5), -50.0)
        logits[0, 3] = 50.0
        logits[1, 1] = 50.0
        loss = ad.cross_entropy(Tensor(logits), np.array([3, 1]))
        assert loss.item() < 1e-6

    def test_uniform_is_log_vocab(self):
        loss = ad.cross_entropy(Tensor(np.zeros((4, 8))), np.array([0, 1, 2, 3]))
        assert loss.item() == pytest.approx(math.log(8), abs=1e-6)

    def test_all_ignored_raises(self):
        with pytest.raises(ValueError, match="no loss targets"):
            ad.cross_entropy(Tensor(np.zeros((2, 4))), np.array([9, 9]), ignore=9)

    def test_ignored_rows_get_zero_grad(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = ad.cross_entropy(logits, np.array([1, 0, 2]), ignore=0)
        backward(loss, tape)
        assert np.array_equal(logits.grad[1], np.zeros(4))
        assert not np.array_equal(logits.grad[0], np.zeros(4))

    def test_grad_matches_finite_differences(self):
        rng = substream(11, "test/ce-grad")
        logits = rand((5, 7), rng)
        targets = np.array([2, 0, 6, 3, 1])
        fd_check(lambda x: ad.cross_entropy(x, targets), [logits])

    def test_grad_is_softmax_minus_onehot_over_count(self):
        rng = substream(12, "test/ce-analytic")
        x = rand((4, 6), rng).astype(np.float64)
        targets = np.array([1, 5, 5, 0])
        t = Tensor(x, requires_grad=True)
        with Tape() as tape:
            loss = ad.cross_entropy(t, targets, ignore=5)
        backward(loss, tape)
        soft = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
        expect = soft.copy()
        expect[0, 1] -= 1
        expect[3, 0] -= 1
        expect[[1, 2]] = 0.0
        assert np.allclose(t.grad, expect / 2, atol=1e-9)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.ssum(ad.mul(x, x))
        backward(loss, tape)
        assert np.allclose(x.grad, [6.0])

    def test_unused_parameter_grad_is_zero(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        unused = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.ssum(ad.mul(x, x))
        backward(loss, tape)
        assert np.array_equal(unused.grad, np.zeros(2))

    def test_non_scalar_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            backward(y, tape)

    def test_grad_accumulates_across_uses(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.add(ad.ssum(ad.mul(x, x)), ad.ssum(ad.scale(x, 3.0)))
        backward(loss, tape)
        assert np.allclose(x.grad, [2 * 2.0 + 3.0])


class TestSmallOps:
    def test_embed_gathers_and_scatters(self):
        table = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3), requires_grad=True)
        ids = np.array([[0, 2], [2, 2]])
        with Tape() as tape:
            out = ad.embed(table, ids)
            loss = ad.ssum(out)
        assert out.data.shape == (2, 2, 3)
        backward(loss, tape)
        assert np.array_equal(table.grad[:, 0], [1.0, 0.0, 3.0, 0.0])

    def test_masked_mean(self):
        x = Tensor(np.arange(12, dtype=np.float64).reshape(2, 3, 2))
        keep = np.array([[True, True, False], [False, True, True]])
        out = ad.masked_mean(x, keep)
        assert np.allclose(out.data[0], [(0 + 2) / 2, (1 + 3) / 2])
        assert np.allclose(out.data[1], [(8 + 10) / 2, (9 + 11) / 2])

    def test_masked_mean_grad(self):
        rng = substream(17, "test/mmean")
        x = rand((2, 4, 3), rng)
        keep = np.array([[True, False, True, True], [True, True, False, False]])
        w = rand((2, 3), rng)

        def f(xx):
            return ad.ssum(ad.mul(ad.masked_mean(xx, keep), Tensor(w.astype(xx.dtype))))

        fd_check(f, [x])

    def test_rel_ops_grads(self):
        rng = substream(18, "test/rel")
        q = rand((2, 2, 4, 3), rng)
        table = rand((5, 3), rng)
        rel_idx = rng.integers(0, 5, size=(4, 4))
        fd_check(lambda qq, tt: ad.ssum(ad.rel_scores(qq, tt, rel_idx)), [q, table])

        alpha = rand((2, 2, 4, 4), rng)
        v = rand((2, 2, 4, 3), rng)
        fd_check(lambda aa, vv, tt: ad.ssum(ad.attend(aa, vv, tt, rel_idx)), [alpha, v, table])

    def test_attend_plain_grads(self):
        rng = substream(19, "test/attend-plain")
        alpha = rand((2, 2, 3, 5), rng)
        v = rand((2, 2, 5, 4), rng)
        fd_check(lambda aa, vv: ad.ssum(ad.attend(aa, vv)), [alpha, v])

    def test_dropout_scales_and_masks(self):
        rng = substream(20, "test/dropout")
        x = Tensor(np.ones((1000,)))
        out = ad.dropout(x, 0.25, rng)
        kept = out.data != 0
        assert np.allclose(out.data[kept], 1 / 0.75)
        assert 0.70 < kept.mean() < 0.80
        assert ad.dropout(x, 0.0, rng) is x

    def test_relu_transpose_reshape_grads(self):
        rng = substream(21, "test/misc")
        x = rand((3, 4), rng)

        def f(xx):
            y = ad.relu(xx)
            y = ad.transpose(y, (1, 0))
            y = ad.reshape(y, (12,))
            return ad.ssum(ad.mul(y, y))

        fd_check(f, [x])


class TestAdam:
    def make(self, value):
        p = {"w": Tensor(np.array([value]), requires_grad=True)}
        return p, AdamState(p)

    def test_zero_grad_leaves_parameter(self):
        params, state = self.make(1.5)
        adam_step(params, state, lr=0.1)
        assert params["w"].data[0] == 1.5

    def test_first_step_is_signed_lr(self):
        params, state = self.make(0.0)
        params["w"].grad[...] = 0.37
        adam_step(params, state, lr=0.01)
        assert params["w"].data[0] == pytest.approx(-0.01, rel=1e-4)
        assert np.array_equal(params["w"].grad, [0.0])

    def test_quadratic_converges(self):
        params, state = self.make(0.0)
        for _ in range(100):
            w = params["w"].data[0]
            params["w"].grad[...] = 2 * (w - 2.0)
            adam_step(params, state, lr=0.1)
        assert abs(params["w"].data[0] - 2.0) < 0.1

    def test_nan_grad_aborts(self):
        params, state = self.make(0.0)
        params["w"].grad[...] = np.nan
        with pytest.raises(FloatingPointError, match="'w'"):
            adam_step(params, state, lr=0.1)

    def test_step_counter_increments(self):
        params, state = self.make(0.0)
        for i in range(3):
            params["w"].grad[...] = 1.0
            adam_step(params, state, lr=0.1)
            assert state.step == i + 1


class TestDeterminism:
    def test_substream_reproducible_and_distinct(self):
        a = substream(42, "init").random(5)
        b = substream(42, "init").random(5)
        c = substream(42, "dropout").random(5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_pairsum_reversal_invariant(self):
        rng = substream(1, "test/pairsum")
        for n in (1, 2, 3, 8, 17, 33):
            x = rng.standard_normal((5, n)).astype(np.float32)
            rev = np.ascontiguousarray(x[:, ::-1])
            assert np.array_equal(ad.pairsum(x), ad.pairsum(rev))
