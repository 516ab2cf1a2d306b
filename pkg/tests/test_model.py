import math

import numpy as np
import pytest

from fedlaser import tensor as tn
from fedlaser.adam import Adam
from fedlaser.model import (PAPER_PARAM_COUNT, Batch, ModelConfig, ParamSet, attention,
                            forward, gru_cell, init_params, layout, param_count, predict,
                            train_epoch, zero_params)

TINY = ModelConfig(gru1=3, gru2=2, attention=2, stat_dense=3, head1=3, head2=2,
                   dropout_rate=0.0)


def _batch(rng, n=2):
    return Batch(rng.uniform(0, 1, (n, 9)), rng.uniform(0, 1, (n, 4)), rng.uniform(0, 1, n))


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


class TestParams:
    def test_paper_architecture_count(self):
        assert param_count(ModelConfig()) == PAPER_PARAM_COUNT == 31681

    def test_layout_shapes(self):
        shapes = dict(layout(ModelConfig()))
        assert shapes["gru1.W"] == (1, 192) and shapes["gru2.U"] == (32, 96)
        assert shapes["attn.W"] == (32, 32) and shapes["attn.w"] == (32,)
        assert shapes["stat.W"] == (4, 64) and shapes["head1.W"] == (96, 64)
        assert shapes["head2.W"] == (64, 32) and shapes["out.W"] == (32, 1)

    def test_flatten_round_trip(self):
        p = init_params(ModelConfig(), np.random.default_rng(0))
        v = p.flatten()
        q = ParamSet.unflatten(v, p.layout)
        assert q.flatten().tobytes() == v.tobytes()
        assert q.infer_config(0.2) == ModelConfig()

    def test_unflatten_wrong_length(self):
        p = zero_params(TINY)
        with pytest.raises(ValueError):
            ParamSet.unflatten(np.zeros(p.size + 1), p.layout)

    def test_seeded_init(self):
        a = init_params(TINY, np.random.default_rng(4)).flatten()
        b = init_params(TINY, np.random.default_rng(4)).flatten()
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_dropout_range(self, rate):
        with pytest.raises(ValueError):
            ModelConfig(dropout_rate=rate)


class TestGRUCell:
    def test_zero_weights_zero_state(self):
        h = gru_cell(np.ones((1, 1)), np.zeros((1, 2)), np.zeros((1, 6)), np.zeros((2, 6)), np.zeros(6))
        assert np.array_equal(h.data, np.zeros((1, 2)))

    def test_zero_weights_halves_state(self):
        v = np.array([[0.4, -0.8]])
        h = gru_cell(np.ones((1, 1)), v, np.zeros((1, 6)), np.zeros((2, 6)), np.zeros(6))
        assert np.array_equal(h.data, 0.5 * v)

    def test_matches_scripted_reference(self):
        rng = np.random.default_rng(12)
        x, hp = rng.normal(size=3), rng.normal(size=2)
        W, U, b = rng.normal(size=(3, 6)), rng.normal(size=(2, 6)), rng.normal(size=6)
        # scalar-loop reference, gate blocks ordered z, r, n
        H = 2

        def pre(g, j, hvec):
            col = g * H + j
            return (sum(x[i] * W[i, col] for i in range(3))
                    + sum(hvec[k] * U[k, col] for k in range(H)) + b[col])

        r = [_sig(pre(1, k, hp)) for k in range(H)]
        rh = [r[k] * hp[k] for k in range(H)]
        ref = []
        for j in range(H):
            z = _sig(pre(0, j, hp))
            n = math.tanh(pre(2, j, rh))
            ref.append((1 - z) * hp[j] + z * n)
        h = gru_cell(x[None], hp[None], W, U, b).data[0]
        assert np.max(np.abs(h - np.array(ref))) < 1e-14

    def test_dimension_mismatch(self):
        with pytest.raises(tn.ShapeError):
            gru_cell(np.ones((1, 1)), np.zeros((1, 3)), np.zeros((1, 6)), np.zeros((2, 6)), np.zeros(6))


class TestAttention:
    def test_identical_states(self):
        h = np.tile(np.array([0.3, -0.2, 0.9]), (9, 1))
        rng = np.random.default_rng(0)
        alphas, c = attention(h, rng.normal(size=(3, 3)), rng.normal(size=3))
        assert np.allclose(alphas.data, 1 / 9, atol=1e-15)
        assert np.allclose(c.data, h[0], atol=1e-15)

    def test_saturation(self):
        # identity projection: every score is 0 except index 4, which scores 40
        h = np.zeros((9, 2))
        h[4] = [30.0, 30.0]
        alphas, c = attention(h, np.eye(2), np.array([20.0, 20.0]))
        assert alphas.data[4] > 0.999
        assert np.allclose(c.data, h[4], rtol=1e-3)

    def test_matches_scripted_reference(self):
        rng = np.random.default_rng(3)
        h, W, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 3)), rng.normal(size=3)
        scores = [sum(w[k] * math.tanh(sum(h[i, m] * W[m, k] for m in range(3))) for k in range(3))
                  for i in range(4)]
        mx = max(scores)
        e = [math.exp(s - mx) for s in scores]
        a = [v / sum(e) for v in e]
        c = [sum(a[i] * h[i, j] for i in range(4)) for j in range(3)]
        alphas, ctx = attention(h, W, w)
        assert np.max(np.abs(alphas.data - a)) < 1e-14
        assert np.max(np.abs(ctx.data - c)) < 1e-14
        assert abs(alphas.data.sum() - 1) < 1e-12

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        h, W, w = rng.normal(size=(9, 4)), rng.normal(size=(4, 4)), rng.normal(size=4)
        perm = rng.permutation(9)
        a1, c1 = attention(h, W, w)
        a2, c2 = attention(h[perm], W, w)
        assert np.allclose(a2.data, a1.data[perm], atol=1e-15)
        assert np.allclose(c2.data, c1.data, atol=1e-14)

    def test_empty(self):
        with pytest.raises(tn.ShapeError):
            attention(np.zeros((0, 3)), np.eye(3), np.ones(3))


class TestForward:
    def test_zero_params_output_bias(self):
        p = zero_params(ModelConfig())
        out = forward(_batch(np.random.default_rng(0), 5), p.tensors)
        assert np.array_equal(out.data, np.zeros(5))

    def test_eval_deterministic(self):
        p = init_params(ModelConfig(), np.random.default_rng(1))
        b = _batch(np.random.default_rng(2), 7)
        assert predict(p, b).tobytes() == predict(p, b).tobytes()

    def test_train_without_dropout_is_eval(self):
        p = init_params(ModelConfig(), np.random.default_rng(1))
        b = _batch(np.random.default_rng(2), 7)
        tr = forward(b, p.tensors, mode="train", rng=np.random.default_rng(0), dropout_rate=0.0)
        assert tr.data.tobytes() == predict(p, b).tobytes()

    def test_dropout_changes_train_output(self):
        p = init_params(ModelConfig(), np.random.default_rng(1))
        b = _batch(np.random.default_rng(2), 7)
        tr = forward(b, p.tensors, mode="train", rng=np.random.default_rng(0), dropout_rate=0.2)
        assert not np.array_equal(tr.data, predict(p, b))

    def test_fused_equals_unfused(self):
        p = init_params(ModelConfig(), np.random.default_rng(5))
        b = _batch(np.random.default_rng(6), 4)
        a = forward(b, p.tensors, fused=True).data
        c = forward(b, p.tensors, fused=False).data
        assert np.max(np.abs(a - c)) < 1e-12

    def test_unnormalized_warning(self):
        p = zero_params(TINY)
        b = _batch(np.random.default_rng(0))
        b.stats[:, 2] = 120.0
        with pytest.warns(RuntimeWarning, match="un-normalized"):
            forward(b, p.tensors)


@pytest.mark.parametrize("fused", [True, False])
def test_end_to_end_gradient_check(fused):
    rng = np.random.default_rng(21)
    params = init_params(TINY, rng).tensors
    batch = _batch(rng, 2)

    def loss(p):
        return tn.mse_loss(forward(batch, p, mode="eval", fused=fused), batch.target)

    assert tn.finite_diff_check(loss, params) < 1e-4


class TestTraining:
    def test_zero_lr_leaves_params(self):
        p = init_params(TINY, np.random.default_rng(0))
        out, loss = train_epoch(_batch(np.random.default_rng(1), 10), p, Adam(lr=0.0), 4,
                                np.random.default_rng(2))
        assert out.flatten().tobytes() == p.flatten().tobytes()
        assert math.isfinite(loss)

    def test_memorize_single_sample(self):
        cfg = ModelConfig(gru1=8, gru2=4, attention=4, stat_dense=8, head1=8, head2=4, dropout_rate=0.0)
        p = init_params(cfg, np.random.default_rng(0))
        one = _batch(np.random.default_rng(3), 1)
        opt = Adam(lr=1e-2)
        rng = np.random.default_rng(0)
        for _ in range(200):
            p, loss = train_epoch(one, p, opt, 1, rng)
        assert float(np.mean((predict(p, one) - one.target) ** 2)) < 1e-4

    def test_seeded_training_is_bit_identical(self):
        def run():
            p = init_params(TINY, np.random.default_rng(0))
            p, _ = train_epoch(_batch(np.random.default_rng(1), 20), p, Adam(lr=1e-2), 4,
                               np.random.default_rng(9), dropout_rate=0.2)
            return p.flatten().tobytes()

        assert run() == run()

    def test_smoothed_loss_non_increasing(self):
        rng = np.random.default_rng(4)
        data = _batch(rng, 64)
        data.target[:] = 0.3 + 0.5 * data.stats[:, 2] - 0.2 * data.p_seq[:, 4]
        cfg = ModelConfig(gru1=8, gru2=4, attention=4, stat_dense=8, head1=8, head2=4, dropout_rate=0.0)
        p = init_params(cfg, np.random.default_rng(0))
        opt = Adam(lr=3e-3)
        losses = []
        for _ in range(40):
            p, loss = train_epoch(data, p, opt, 16, rng)
            losses.append(loss)
        smooth = np.convolve(losses[5:], np.ones(3) / 3, mode="valid")
        assert (np.diff(smooth) <= 1e-12).all(), smooth

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train_epoch(Batch(np.zeros((0, 9)), np.zeros((0, 4)), np.zeros(0)),
                        zero_params(TINY), Adam(), 4, np.random.default_rng(0))
