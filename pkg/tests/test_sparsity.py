import numpy as np
import pytest

from monotts import sparsity as sp
from monotts.errors import ConfigError, ContractError, DimensionError
from monotts.tensor_core.ops import lstm_gates


def _masked_dense_lstm(kernel, bias, mask, x, h, c):
    z = (kernel * mask).astype(np.float64) @ np.concatenate([x, h]).astype(np.float64) + bias
    h2, c2, _ = lstm_gates(z, c.astype(np.float64))
    return h2, c2


class TestSchedule:
    def test_before_start(self):
        s = sp.PruneSchedule()
        assert s.sparsity_at(0) == 0.0 and s.sparsity_at(19_999) == 0.0

    def test_end_is_target(self):
        s = sp.PruneSchedule()
        assert s.sparsity_at(200_000) == 0.9
        assert s.sparsity_at(10**7) == 0.9

    def test_cubic_midpoint(self):
        s = sp.PruneSchedule()
        assert s.sparsity_at(110_000) == pytest.approx(0.875 * 0.9, rel=1e-15)
        scaled = sp.PruneSchedule.scaled()
        assert (scaled.start_step, scaled.interval, scaled.end_step) == (2000, 50, 20000)
        assert scaled.sparsity_at(11_000) == pytest.approx(0.7875, rel=1e-15)

    def test_linear_curve(self):
        s = sp.PruneSchedule(curve="linear")
        assert s.sparsity_at(110_000) == pytest.approx(0.45)

    def test_quantized_between_events(self):
        s = sp.PruneSchedule.scaled()
        assert s.sparsity_at(2049) == s.sparsity_at(2000) == 0.0
        assert s.sparsity_at(2099) == s.sparsity_at(2050) > 0

    def test_non_decreasing(self):
        s = sp.PruneSchedule.scaled()
        vals = [s.sparsity_at(t) for t in range(0, 25_000, 7)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_events(self):
        s = sp.PruneSchedule(start_step=10, interval=7, end_step=30)
        assert [t for t in range(40) if s.is_event(t)] == [10, 17, 24, 30]

    @pytest.mark.parametrize(
        "kwargs",
        [dict(start_step=5, end_step=5), dict(interval=0), dict(target_sparsity=1.0), dict(curve="exp"), dict(block_rows=0)],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            sp.PruneSchedule(**kwargs)

    def test_negative_step(self):
        with pytest.raises(ContractError):
            sp.sparsity_at(sp.PruneSchedule(), -1)


class TestPrune:
    def test_elementwise_matches_sort_oracle(self):
        for seed in range(20):
            w = np.random.default_rng(seed).normal(size=(4, 4))
            m = sp.prune_to(w, None, 0.5, (1, 1))
            order = sorted(range(16), key=lambda k: abs(w.flat[k]))
            expect = np.ones(16, dtype=bool)
            expect[order[:8]] = False
            np.testing.assert_array_equal(m.dense_mask().ravel(), expect)
            np.testing.assert_array_equal(m.to_dense(), w * expect.reshape(4, 4))

    def test_zero_target_unchanged(self):
        w = np.random.default_rng(0).normal(size=(8, 4))
        m = sp.prune_to(w, None, 0.0, (4, 1))
        assert m.block_mask.all()
        np.testing.assert_array_equal(m.to_dense(), w)

    def test_masks_nest(self):
        for seed in range(20):
            w = np.random.default_rng(seed).normal(size=(32, 12))
            m1 = sp.prune_mask(w, None, 0.5, (4, 2))
            m2 = sp.prune_mask(w * np.kron(m1, np.ones((4, 2))), m1, 0.9, (4, 2))
            assert np.all(~m1 <= ~m2)
            # also when the weights moved in between
            w2 = np.random.default_rng(seed + 100).normal(size=(32, 12))
            m3 = sp.prune_mask(w2, m1, 0.9, (4, 2))
            assert np.all(~m1 <= ~m3)

    def test_ceil_count(self):
        w = np.random.default_rng(1).normal(size=(16, 10))
        m = sp.prune_mask(w, None, 0.33, (16, 1))
        assert (~m).sum() == 4  # ceil(3.3)
        assert (~sp.prune_mask(w, None, 0.3, (16, 1))).sum() == 3  # not ceil(3.0000000000000004)

    def test_ties_lexicographic(self):
        w = np.ones((4, 4))
        m = sp.prune_mask(w, None, 0.25, (2, 2))
        np.testing.assert_array_equal(m, [[False, True], [True, True]])

    def test_shrinking_rejected(self):
        w = np.random.default_rng(2).normal(size=(4, 4))
        m = sp.prune_mask(w, None, 0.5, (1, 1))
        with pytest.raises(ContractError):
            sp.prune_mask(w, m, 0.25, (1, 1))

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            sp.prune_to(np.zeros((10, 4)), None, 0.5, (16, 1))


class TestMatvec:
    def test_all_masked(self):
        m = sp.BlockSparseMatrix.from_dense(np.ones((8, 4)), (4, 1), np.zeros((2, 4), dtype=bool))
        np.testing.assert_array_equal(m.matvec(np.ones(4)), np.zeros(8))

    @pytest.mark.parametrize("block", [(16, 1), (4, 4), (1, 1), (2, 3)])
    def test_density_one_bit_exact(self, block):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(48, 24))
        v = rng.normal(size=24)
        m = sp.BlockSparseMatrix.from_dense(w, block)
        ref, _ = sp.ordered_dense_matvec(w, v)
        assert m.matvec(v).tobytes() == ref.tobytes()

    def test_random_256_at_90(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(256, 256)).astype(np.float32)
        v = rng.normal(size=256).astype(np.float32)
        m = sp.prune_to(w, None, 0.9, (16, 1))
        oracle = (w * m.dense_mask()).astype(np.float64) @ v.astype(np.float64)
        np.testing.assert_allclose(m.matvec(v), oracle, atol=1e-6 * max(1.0, np.abs(oracle).max()))
        assert m.sparsity == pytest.approx(0.9, abs=16 / (256 * 256))

    def test_float64_tolerance(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            w = rng.normal(size=(32, 16))
            v = rng.normal(size=16)
            m = sp.prune_to(w, None, rng.uniform(0, 0.95), (4, 2))
            np.testing.assert_allclose(m.matvec(v), (w * m.dense_mask()) @ v, atol=1e-12)

    def test_batched(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(16, 8))
        m = sp.prune_to(w, None, 0.5, (4, 1))
        vs = rng.normal(size=(3, 8))
        np.testing.assert_allclose(m.matvec(vs), vs @ (w * m.dense_mask()).T, atol=1e-12)

    def test_dim_mismatch(self):
        m = sp.BlockSparseMatrix.from_dense(np.ones((4, 4)), (1, 1))
        with pytest.raises(DimensionError):
            m.matvec(np.ones(5))

    def test_immutable(self):
        m = sp.BlockSparseMatrix.from_dense(np.ones((4, 4)), (1, 1))
        with pytest.raises(ValueError):
            m.values[0, 0, 0] = 2.0

    def test_counts_stored_values(self):
        w = np.random.default_rng(7).normal(size=(64, 32))
        m = sp.prune_to(w, None, 0.75, (16, 1))
        counter = sp.OpCounter()
        m.matvec(np.ones(32), counter)
        assert counter.multiplies == m.nnz == (64 * 32) // 4


class TestLSTM:
    def _weights(self, rng, I, H, S, block=(16, 1), dtype=np.float32):
        kernel = rng.normal(scale=0.3, size=(4 * H, I + H)).astype(dtype)
        bias = rng.normal(scale=0.3, size=4 * H).astype(dtype)
        m = sp.prune_to(kernel, None, S, block)
        return kernel, bias, m

    def test_zero_weights(self):
        w = sp.SparseLSTMWeights(sp.BlockSparseMatrix.from_dense(np.zeros((16, 7)), (4, 1)), np.zeros(16))
        h, c = sp.sparse_lstm_step(w, np.ones(3), np.zeros(4), np.zeros(4))
        np.testing.assert_array_equal(h, 0)
        np.testing.assert_array_equal(c, 0)

    def test_density_one_matches_dense(self):
        rng = np.random.default_rng(8)
        kernel, bias, m = self._weights(rng, 8, 16, 0.0)
        x, h, c = (rng.normal(size=n).astype(np.float32) for n in (8, 16, 16))
        hs, cs = sp.sparse_lstm_step(sp.SparseLSTMWeights(m, bias), x, h, c)
        hd, cd = sp.dense_lstm_step(kernel, bias, x, h, c)
        np.testing.assert_allclose(hs, hd, atol=1e-6)
        np.testing.assert_allclose(cs, cd, atol=1e-6)

    def test_sparse_matches_masked_dense(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            kernel, bias, m = self._weights(rng, 16, 32, 0.9)
            x, h, c = (rng.normal(size=n).astype(np.float32) for n in (16, 32, 32))
            hs, cs = sp.sparse_lstm_step(sp.SparseLSTMWeights(m, bias), x, h, c)
            ho, co = _masked_dense_lstm(kernel, bias, m.dense_mask(), x, h, c)
            np.testing.assert_allclose(hs, ho, atol=1e-5)
            np.testing.assert_allclose(cs, co, atol=1e-5)

    def test_dims(self):
        w = sp.SparseLSTMWeights(sp.BlockSparseMatrix.from_dense(np.zeros((16, 7)), (4, 1)), np.zeros(16))
        with pytest.raises(DimensionError):
            sp.sparse_lstm_step(w, np.ones(4), np.zeros(4), np.zeros(4))


class TestCountOps:
    def test_half(self):
        assert sp.count_ops(256, 256, 0.5) == 262144

    def test_full_prune(self):
        assert sp.count_ops(256, 256, 1.0) == 0

    def test_dense_matches_instrumented(self):
        rng = np.random.default_rng(10)
        counter = sp.OpCounter()
        kernel = rng.normal(size=(1024, 512)).astype(np.float32)
        sp.dense_lstm_step(kernel, np.zeros(1024, np.float32), np.zeros(256, np.float32), np.zeros(256, np.float32),
                           np.zeros(256, np.float32), counter)
        assert counter.multiplies == sp.count_ops(256, 256, 0.0) == 524288

    def test_invalid(self):
        with pytest.raises(ConfigError):
            sp.count_ops(0, 4, 0.5)
        with pytest.raises(ConfigError):
            sp.count_ops(4, 4, 1.5)


class TestPruner:
    def test_mask_monotone_and_weights_zero(self):
        rng = np.random.default_rng(11)
        sched = sp.PruneSchedule(start_step=5, interval=3, end_step=50, target_sparsity=0.8, block_rows=4)
        weights = {"a": rng.normal(size=(16, 8)), "b": rng.normal(size=(8, 4))}
        pruner = sp.Pruner(sched, {k: v.shape for k, v in weights.items()})
        prev = {k: m.copy() for k, m in pruner.masks.items()}
        for t in range(60):
            grads = {k: rng.normal(size=v.shape) for k, v in weights.items()}
            pruner.mask_gradients(grads)
            for k in weights:
                weights[k] -= 0.1 * grads[k]
            pruner.step(t, weights)
            for k in weights:
                assert np.all(~prev[k] <= ~pruner.masks[k])
                assert np.all(weights[k][~pruner.dense_mask(k)] == 0.0)
                n = pruner.masks[k].size
                assert abs(sp.achieved_sparsity(pruner.masks[k]) - sched.sparsity_at(t)) <= 1.0 / n
            prev = {k: m.copy() for k, m in pruner.masks.items()}
        assert sp.achieved_sparsity(pruner.masks["a"]) == pytest.approx(0.8, abs=1 / 8)
