import math

import numpy as np
import pytest

from monotts import tensor_core as tc
from monotts.bench.data import ToyTaskSpec, generate_toy_dataset
from monotts.errors import BundleFormatError, ConfigError, ContractError, DimensionError, InputError
from monotts.model import ModelConfig, Seq2Seq, TrainConfig, attentive_stop_loss, total_loss, train_toy
from monotts.model.bundle import load_bundle, save_bundle
from monotts.model.losses import trace_stop_loss
from monotts.model.train import loss_for_batch, read_metrics_csv, write_metrics_csv
from monotts.sparsity import PruneSchedule

TINY = dict(vocab_size=6, embed_dim=4, encoder_dim=4, attention_rnn_dim=8, decoder_rnn_dim=8, postnet_dim=8,
            mel_dim=3, reduction_factor=2, delay_frames=2)


def tiny(**kw):
    return ModelConfig(**{**TINY, **kw})


def _force_delta(model, pre_softplus):
    """Zero the query weights and set the step bias so every step advances by softplus(b)."""
    w, b = model.params["attention.weight"], model.params["attention.bias"]
    w.data = np.zeros_like(w.data)
    b.data = np.zeros_like(b.data)
    b.data[0] = pre_softplus


class TestConfig:
    def test_round_trip(self):
        c = ModelConfig(stop_lambda=0.001)
        assert ModelConfig.from_dict(c.to_dict()) == c
        assert c.stop_lambda == 0.001

    @pytest.mark.parametrize("kw", [dict(encoder_dim=3), dict(mechanism="content"), dict(precision="float16"),
                                    dict(delay_frames=-1), dict(mel_dim=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"stop_token": True})


class TestShapes:
    def test_encode(self):
        m = Seq2Seq(tiny())
        out = m.encode(np.array([[1, 2, 3], [0, 4, 5]]))
        assert out.shape == (2, 3, 4)

    def test_encode_deterministic(self):
        a = Seq2Seq(tiny()).encode(np.array([1, 2, 3])).data
        b = Seq2Seq(tiny()).encode(np.array([1, 2, 3])).data
        assert a.tobytes() == b.tobytes()

    def test_decode_step_emits_r_frames(self):
        m = Seq2Seq(tiny(reduction_factor=3))
        enc = m.encode(np.array([[1, 2]]))
        y, _, align = m.decode_step(m.initial_decoder_state(1), tc.constant(np.zeros((1, 9), np.float32)), enc)
        assert y.shape == (1, 9) and align.weights.shape == (1, 2)

    def test_teacher_steps_ceil(self):
        m = Seq2Seq(tiny())
        for T in (6, 7, 8, 9):
            out = m.teacher_forward(np.array([1, 2, 3]), np.zeros((T, 3), np.float32))
            assert out.positions.shape == (1, math.ceil(T / 2))
            assert out.y_pre.shape == out.y_post.shape == (1, T, 3)

    def test_postnet_shape(self):
        m = Seq2Seq(tiny())
        assert m.postnet(tc.constant(np.zeros((2, 7, 3), np.float32))).shape == (2, 7, 3)
        with pytest.raises(DimensionError):
            m.postnet(tc.constant(np.zeros((2, 7, 4), np.float32)))

    def test_bad_ids(self):
        m = Seq2Seq(tiny())
        with pytest.raises(InputError):
            m.encode(np.array([1, 6]))
        with pytest.raises(InputError):
            m.encode(np.array([1.0, 2.0]))
        with pytest.raises(InputError):
            m.encode(np.zeros(0, dtype=np.int64))

    def test_no_stop_token_parameters(self):
        names = Seq2Seq(ModelConfig()).named_parameters()
        assert not any("stop" in n or "gate" in n for n in names)


class TestLosses:
    def test_stop_loss_values(self):
        assert attentive_stop_loss(np.array([[11.0]]), 10).item() == 0.0
        assert attentive_stop_loss(np.array([[9.0]]), 10).item() == 2.0

    def test_stop_loss_gradient_sign(self):
        for v, sign in ((3.0, 1.0), (8.0, -1.0)):
            mu = tc.parameter(np.array([[v]]))
            tape = tc.GradTape()
            with tape:
                loss = attentive_stop_loss(mu, 5)
            (g,) = tape.gradient(loss, [mu])
            assert g[0, 0] == -sign

    def test_trace_stop_loss_empty(self):
        class Empty:
            steps, mu, J = 0, np.zeros(0), 3

        with pytest.raises(ContractError):
            trace_stop_loss(Empty())

    def test_perfect_prediction(self):
        y = np.random.default_rng(0).normal(size=(1, 8, 4))
        parts = total_loss(y, tc.constant(y), tc.constant(np.concatenate([np.zeros((1, 3, 4)), y[:, :5]], axis=1)),
                           np.array([[6.0]]), 5, 3, 0.001)
        assert parts.total.item() == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        T, d, M, J, lam = 8, 3, 4, 5, 0.001
        y, yp, yq = rng.normal(size=(3, T, M))
        mu = 4.3
        pre = sum(abs(yp[i, k] - y[i, k]) for i in range(T) for k in range(M)) / (T * M)
        post = sum(abs(yq[i + d, k] - y[i, k]) for i in range(T - d) for k in range(M)) / ((T - d) * M)
        expect = pre + post + lam * abs(mu - (J + 1))
        parts = total_loss(y[None], tc.constant(yp[None]), tc.constant(yq[None]), np.array([[mu]]), J, d, lam)
        assert parts.total.item() == pytest.approx(expect, abs=1e-6)

    def test_lambda_zero_drops_stop(self):
        rng = np.random.default_rng(2)
        y, yp, yq = rng.normal(size=(3, 1, 8, 4))
        a = total_loss(y, tc.constant(yp), tc.constant(yq), np.array([[100.0]]), 5, 3, 0.0)
        assert a.total.item() == pytest.approx(a.l1_pre + a.l1_post, abs=1e-12)

    def test_short_sequence(self):
        y = np.zeros((1, 3, 2))
        with pytest.raises(ConfigError):
            total_loss(y, tc.constant(y), tc.constant(y), np.array([[1.0]]), 1, 3, 0.001)


class TestGradients:
    @pytest.mark.parametrize("mechanism", ["gaussian", "gmmv2b"])
    def test_full_model_finite_differences(self, mechanism):
        with tc.precision("float64"):
            cfg = tiny(precision="float64", mechanism=mechanism, K=2, gmm_sigma_init=2.0, stop_lambda=0.5)
            m = Seq2Seq(cfg)
            rng = np.random.default_rng(0)
            ids = np.array([[1, 4, 2, 5]])
            mels = rng.uniform(size=(1, 9, 3))

            def fn():
                out = m.teacher_forward(ids, mels)
                return total_loss(mels, out.y_pre, out.y_post, out.mu_last, 4, cfg.delay_frames, cfg.stop_lambda).total

            params = m.named_parameters()
            errs = tc.check_gradients(fn, list(params.values()), h=1e-3, names=list(params), order=4)
            assert max(errs.values()) < 1e-4, errs


class TestInference:
    def test_forced_step_count(self):
        m = Seq2Seq(tiny(precision="float64"))
        _force_delta(m, 50.0)  # softplus(50) == 50
        for J in (1, 3, 5):
            tr = m.infer(np.arange(J) % 6, max_steps=100)
            expected = math.ceil((J + 1) / 50.0)
            assert tr.stop_step == expected and not tr.truncated

    def test_single_symbol_stops_once_cumulative_delta_reaches_two(self):
        m = Seq2Seq(tiny(precision="float64"))
        _force_delta(m, float(np.log(np.expm1(0.3))))  # delta = 0.3 per step
        tr = m.infer(np.array([2]), max_steps=100)
        assert tr.stop_step == 7  # 6 * 0.3 < 2 <= 7 * 0.3
        assert tr.mu[-2] < 2.0 <= tr.mu[-1]
        assert tr.y_pre.shape == (14, 3)

    def test_truncation_flag(self):
        m = Seq2Seq(tiny())
        _force_delta(m, -30.0)
        tr = m.infer(np.array([1, 2, 3]), max_steps=5)
        assert tr.truncated and tr.stop_step is None and tr.steps == 5

    def test_random_models_terminate_at_first_crossing(self):
        for seed in range(100):
            m = Seq2Seq(tiny(seed=seed, max_decode_steps=40))
            J = 1 + seed % 5
            tr = m.infer(np.arange(J) % 6)
            assert tr.steps <= 40
            if tr.truncated:
                assert tr.steps == 40 and np.all(tr.mu < J + 1)
            else:
                assert tr.mu[-1] >= J + 1 and np.all(tr.mu[:-1] < J + 1)

    def test_deterministic(self):
        a = Seq2Seq(tiny()).infer(np.array([1, 2, 3]), max_steps=20)
        b = Seq2Seq(tiny()).infer(np.array([1, 2, 3]), max_steps=20)
        assert a.y_post.tobytes() == b.y_post.tobytes() and a.mu.tobytes() == b.mu.tobytes()

    def test_refined_drops_delay(self):
        tr = Seq2Seq(tiny()).infer(np.array([1, 2]), max_steps=10)
        assert len(tr.refined()) == len(tr.y_post) - 2

    def test_batch_rejected(self):
        with pytest.raises(InputError):
            Seq2Seq(tiny()).infer(np.array([[1, 2], [3, 4]]))


class TestSparseModel:
    def test_sparse_path_matches_masked_dense(self):
        m = Seq2Seq(ModelConfig(attention_rnn_dim=32, decoder_rnn_dim=32, postnet_dim=16))
        m.prune(0.5)
        ids = np.array([1, 2, 3, 4])
        sparse = m.infer(ids, max_steps=15)
        m.densify()
        dense = m.infer(ids, max_steps=15)
        np.testing.assert_allclose(sparse.y_pre, dense.y_pre, atol=1e-5)
        np.testing.assert_allclose(sparse.mu, dense.mu, atol=1e-5)

    def test_only_decoder_layers(self):
        with pytest.raises(ConfigError):
            Seq2Seq(tiny()).prune(0.5, block_shape=(1, 1), layers=("postnet_rnn",))


class TestBundle:
    def test_round_trip_byte_identical(self, tmp_path):
        m = Seq2Seq(tiny(stop_lambda=0.001))
        save_bundle(m, tmp_path / "a")
        back = load_bundle(tmp_path / "a")
        assert back.config == m.config and back.config.stop_lambda == 0.001
        for k, v in m.state_dict().items():
            assert back.state_dict()[k].tobytes() == v.tobytes()
        save_bundle(back, tmp_path / "b")
        for name in ("manifest.json", "weights.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_sparse_round_trip(self, tmp_path):
        m = Seq2Seq(tiny())
        m.prune(0.6, block_shape=(4, 1))
        save_bundle(m, tmp_path / "s")
        back = load_bundle(tmp_path / "s")
        assert set(back.sparse) == set(m.sparse)
        for layer in m.sparse:
            np.testing.assert_array_equal(back.sparse[layer].kernel.block_mask, m.sparse[layer].kernel.block_mask)
        ids = np.array([1, 2, 3])
        assert back.infer(ids, max_steps=10).y_post.tobytes() == m.infer(ids, max_steps=10).y_post.tobytes()

    def test_float64(self, tmp_path):
        m = Seq2Seq(tiny(precision="float64"))
        save_bundle(m, tmp_path / "d")
        assert load_bundle(tmp_path / "d").params["output.weight"].dtype == np.float64

    def test_corrupt(self, tmp_path):
        save_bundle(Seq2Seq(tiny()), tmp_path / "c")
        blob = tmp_path / "c" / "weights.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(BundleFormatError):
            load_bundle(tmp_path / "c")

    def test_missing(self, tmp_path):
        with pytest.raises(BundleFormatError):
            load_bundle(tmp_path)


class TestTraining:
    def test_overfit_single_example(self):
        spec = ToyTaskSpec(vocab_size=6, mel_dim=3, j_min=4, j_max=4, count=1, frames_per_symbol=3)
        ds = generate_toy_dataset(spec)
        res = train_toy(ds, tiny(encoder_dim=8, attention_rnn_dim=16, decoder_rnn_dim=16, postnet_dim=16),
                        TrainConfig(steps=1000, batch_size=1, learning_rate=0.2, log_every=50))
        parts, _ = loss_for_batch(res.model, ds[0].ids[None], ds[0].mel[None])
        assert parts.total.item() < 0.05

    def test_metrics_csv(self, tmp_path):
        ds = generate_toy_dataset(ToyTaskSpec(vocab_size=6, mel_dim=3, j_min=3, j_max=4, count=8))
        res = train_toy(ds, tiny(), TrainConfig(steps=5, batch_size=2, log_every=2))
        assert [r["step"] for r in res.metrics] == [0, 2, 4]
        path = tmp_path / "m.csv"
        write_metrics_csv(res.metrics, path)
        assert path.read_text().splitlines()[0] == "step,total_loss,l1_pre,l1_post,stop_loss,mean_mu_T"
        back = read_metrics_csv(path)
        assert back[1]["total_loss"] == res.metrics[1]["total_loss"]

    def test_reproducible(self):
        ds = generate_toy_dataset(ToyTaskSpec(vocab_size=6, mel_dim=3, j_min=3, j_max=4, count=8))
        a = train_toy(ds, tiny(), TrainConfig(steps=4, batch_size=2, log_every=1))
        b = train_toy(ds, tiny(), TrainConfig(steps=4, batch_size=2, log_every=1))
        assert a.metrics == b.metrics

    def test_pruning_hooks(self):
        ds = generate_toy_dataset(ToyTaskSpec(vocab_size=6, mel_dim=3, j_min=3, j_max=4, count=8))
        sched = PruneSchedule(start_step=2, interval=2, end_step=8, target_sparsity=0.5, block_rows=4)
        seen = []

        def cb(step, model, pruner):
            for name, mask in pruner.masks.items():
                w = model.params[name].data
                assert np.all(w[~pruner.dense_mask(name)] == 0.0)
            seen.append(step)

        res = train_toy(ds, tiny(), TrainConfig(steps=10, batch_size=2, prune=sched), callback=cb)
        assert seen == list(range(1, 11))
        for mask in res.pruner.masks.values():
            assert (~mask).mean() == pytest.approx(0.5, abs=1 / mask.size)

    def test_mismatched_dataset(self):
        ds = generate_toy_dataset(ToyTaskSpec(count=2))
        with pytest.raises(ConfigError):
            train_toy(ds, tiny(), TrainConfig(steps=1))

    def test_bad_train_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(prune_layers=("encoder",))
