import math

import numpy as np
import pytest

from dstreader.nncore import (
    Adam,
    CheckpointError,
    LSTMCell,
    Parameter,
    ShapeError,
    affine_backward,
    affine_forward,
    bilinear,
    bilinear_backward,
    grad_check,
    init_param,
    load_checkpoint,
    load_into,
    relative_error,
    save_checkpoint,
    sigmoid_bce_loss,
    softmax,
    softmax_ce_batch,
    softmax_ce_loss,
    zero_grads,
)


class TestAffine:
    def test_zero_input_zero_bias(self):
        x = np.zeros(3)
        W = np.arange(12.0).reshape(3, 4)
        b = np.zeros(4)
        assert np.array_equal(affine_forward(x, W, b), np.zeros(4))

    def test_identity_plus_bias(self):
        y = affine_forward(np.array([1.0, 2.0]), np.eye(2), np.array([1.0, 1.0]))
        assert np.array_equal(y, np.array([2.0, 3.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            affine_forward(np.zeros(3), np.zeros((4, 2)), np.zeros(2))

    def test_gradients_match_finite_differences(self, rng):
        for _ in range(5):
            x = Parameter("x", rng.uniform(-1, 1, size=(2, 3)))
            W = Parameter("W", rng.uniform(-1, 1, size=(3, 4)))
            b = Parameter("b", rng.uniform(-1, 1, size=4))
            R = rng.uniform(-1, 1, size=(2, 4))

            def loss_fn():
                return float((affine_forward(x.value, W.value, b.value) * R).sum())

            zero_grads([x, W, b])
            dx, dW, db = affine_backward(R, x.value, W.value)
            x.grad += dx
            W.grad += dW
            b.grad += db
            report = grad_check(loss_fn, [x, W, b], tolerance=1e-6)
            assert report.ok, report.per_param


class TestBilinear:
    def test_identity_basis(self):
        e1 = np.array([1.0, 0.0, 0.0])
        assert bilinear(e1, np.eye(3), e1) == 1.0

    def test_zero_matrix(self, rng):
        d = rng.uniform(-1, 1, 4)
        q = rng.uniform(-1, 1, 4)
        assert bilinear(d, np.zeros((4, 4)), q) == 0.0

    def test_matches_double_loop(self, rng):
        d = rng.uniform(-1, 1, 5)
        theta = rng.uniform(-1, 1, (5, 3))
        q = rng.uniform(-1, 1, 3)
        expected = sum(
            d[a] * theta[a, b] * q[b] for a in range(5) for b in range(3)
        )
        assert math.isclose(bilinear(d, theta, q), expected, rel_tol=1e-12)

    def test_gradients(self, rng):
        d = Parameter("d", rng.uniform(-1, 1, 4))
        theta = Parameter("theta", rng.uniform(-1, 1, (4, 4)))
        q = Parameter("q", rng.uniform(-1, 1, 4))

        def loss_fn():
            return bilinear(d.value, theta.value, q.value)

        dd, dtheta, dq = bilinear_backward(1.0, d.value, theta.value, q.value)
        d.grad, theta.grad, q.grad = dd, dtheta, dq
        report = grad_check(loss_fn, [d, theta, q], tolerance=1e-6)
        assert report.ok, report.per_param

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bilinear(np.zeros(3), np.zeros((4, 4)), np.zeros(4))


class TestLSTM:
    def test_zero_weights_zero_state(self, rng):
        cell = LSTMCell("t", 3, 4, rng)
        for p in cell.parameters():
            p.value[:] = 0.0
        h, c, _ = cell.step(np.zeros((1, 3)), np.zeros((1, 4)), np.zeros((1, 4)))
        assert np.array_equal(h, np.zeros((1, 4)))
        assert np.array_equal(c, np.zeros((1, 4)))

    def test_forget_gate_saturation(self, rng):
        # Zero weights except a huge forget bias: i=0.5, g=0, f=1, so the
        # cell state passes through unchanged and h = 0.5 * tanh(c_prev).
        cell = LSTMCell("t", 3, 4, rng)
        for p in cell.parameters():
            p.value[:] = 0.0
        cell.b.value[4:8] = 50.0
        c_prev = rng.uniform(-1, 1, size=(1, 4))
        h, c, _ = cell.step(rng.uniform(-1, 1, size=(1, 3)) * 0, np.zeros((1, 4)), c_prev)
        assert np.allclose(c, c_prev, atol=1e-12)
        assert np.allclose(h, 0.5 * np.tanh(c_prev), atol=1e-12)

    def test_sequence_gradients(self, rng):
        cell = LSTMCell("t", 3, 4, rng)
        X = Parameter("X", rng.uniform(-1, 1, size=(2, 5, 3)))
        R = rng.uniform(-1, 1, size=(2, 5, 4))

        def loss_fn():
            H, _ = cell.forward(X.value)
            return float((H * R).sum())

        zero_grads(cell.parameters() + [X])
        H, caches = cell.forward(X.value)
        X.grad += cell.backward(R, caches)
        report = grad_check(loss_fn, cell.parameters() + [X], tolerance=1e-4)
        assert report.ok, report.per_param

    def test_shape_mismatch(self, rng):
        cell = LSTMCell("t", 3, 4, rng)
        with pytest.raises(ShapeError):
            cell.step(np.zeros((1, 2)), np.zeros((1, 4)), np.zeros((1, 4)))


class TestLosses:
    def test_bce_logit_zero(self):
        loss, grad = sigmoid_bce_loss(np.array([0.0]), np.array([1.0]))
        assert math.isclose(loss, math.log(2.0), rel_tol=1e-12)
        assert math.isclose(grad[0], -0.5, rel_tol=1e-12)

    def test_bce_extreme_logits_stable(self):
        loss, grad = sigmoid_bce_loss(np.array([1000.0, -1000.0]), np.array([1.0, 0.0]))
        assert np.isfinite(loss) and loss >= 0.0
        assert np.all(np.isfinite(grad))

    def test_bce_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            sigmoid_bce_loss(np.zeros(2), np.array([0.5, 1.0]))

    def test_uniform_softmax_loss(self):
        loss, _ = softmax_ce_loss(np.zeros(4), 2)
        assert math.isclose(loss, math.log(4.0), rel_tol=1e-12)

    def test_softmax_gradient_is_probs_minus_onehot(self, rng):
        logits = rng.uniform(-2, 2, size=6)
        _, grad = softmax_ce_loss(logits, 3)
        probs = softmax(logits)
        expected = probs.copy()
        expected[3] -= 1.0
        assert np.allclose(grad, expected, atol=1e-12)

    def test_softmax_gradient_finite_differences(self, rng):
        logits = Parameter("z", rng.uniform(-1, 1, size=5))

        def loss_fn():
            return softmax_ce_loss(logits.value, 1)[0]

        _, logits.grad = softmax_ce_loss(logits.value, 1)
        report = grad_check(loss_fn, [logits], tolerance=1e-6)
        assert report.ok, report.per_param

    def test_bce_gradient_finite_differences(self, rng):
        logits = Parameter("z", rng.uniform(-2, 2, size=(3, 4)))
        labels = (rng.uniform(size=(3, 4)) < 0.5).astype(float)

        def loss_fn():
            return sigmoid_bce_loss(logits.value, labels)[0]

        _, logits.grad = sigmoid_bce_loss(logits.value, labels)
        report = grad_check(loss_fn, [logits], tolerance=1e-6)
        assert report.ok, report.per_param

    def test_softmax_sums_to_one(self, rng):
        probs = softmax(rng.uniform(-5, 5, size=(10, 7)))
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_masked_batch_ce(self, rng):
        logits = rng.uniform(-1, 1, size=(2, 5))
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        loss, grad = softmax_ce_batch(logits, np.array([0, 4]), mask)
        assert loss > 0.0
        assert np.all(grad[0, 3:] == 0.0)
        # gradient rows sum to zero (softmax minus one-hot)
        assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_masked_label_rejected(self):
        logits = np.zeros((1, 3))
        mask = np.array([[True, True, False]])
        with pytest.raises(ValueError):
            softmax_ce_batch(logits, np.array([2]), mask)

    def test_losses_non_negative(self, rng):
        for _ in range(20):
            z = rng.uniform(-4, 4, size=5)
            y = (rng.uniform(size=5) < 0.5).astype(float)
            assert sigmoid_bce_loss(z, y)[0] >= 0.0
            assert softmax_ce_loss(z, int(rng.integers(5)))[0] >= 0.0


class TestAdam:
    def test_zero_gradient_no_change(self, rng):
        p = init_param(rng, "p", (3,))
        before = p.value.copy()
        Adam([p]).step()
        assert np.array_equal(p.value, before)

    def test_first_step_magnitude(self):
        p = Parameter("p", np.array([1.0]))
        p.grad = np.array([0.37])
        Adam([p], lr=0.001).step()
        delta = 1.0 - p.value[0]
        assert abs(delta - 0.001) < 1e-9  # bias correction makes |step| = lr

    def test_two_steps_match_hand_trace(self):
        lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
        grads = [0.5, -0.25]
        # scripted reference trace
        x, m, v = 2.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            x -= lr * m_hat / (math.sqrt(v_hat) + eps)
        p = Parameter("p", np.array([2.0]))
        adam = Adam([p], lr=lr)
        for g in grads:
            p.grad = np.array([g])
            adam.step()
        assert math.isclose(p.value[0], x, rel_tol=1e-14)

    def test_deterministic_across_runs(self, rng):
        def run():
            r = np.random.default_rng(7)
            p = init_param(r, "p", (4, 4))
            adam = Adam([p])
            for _ in range(5):
                p.grad = r.normal(size=(4, 4))
                adam.step()
            return p.value

        assert np.array_equal(run(), run())


class TestGradCheck:
    def test_linear_loss_exact(self):
        p = Parameter("p", np.array([1.0, -2.0, 3.0]))
        w = np.array([0.5, 1.5, -0.25])

        def loss_fn():
            return float(p.value @ w)

        p.grad = w.copy()
        report = grad_check(loss_fn, [p], tolerance=1e-9)
        assert report.ok

    def test_corrupted_gradient_detected(self):
        p = Parameter("p", np.array([1.0, -2.0]))
        w = np.array([0.5, 1.5])

        def loss_fn():
            return float(p.value @ w)

        p.grad = w + np.array([0.1, 0.0])  # deliberately wrong
        report = grad_check(loss_fn, [p], tolerance=1e-4)
        assert not report.ok

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-9) < 1e-4


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        params = [
            init_param(rng, "a.W", (3, 4)),
            init_param(rng, "b", (7,)),
            init_param(rng, "scalarish", (1,)),
        ]
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        table = load_checkpoint(path)
        assert set(table) == {"a.W", "b", "scalarish"}
        for p in params:
            assert table[p.name].tobytes() == p.value.tobytes()

    def test_save_load_into(self, rng, tmp_path):
        params = [init_param(rng, "x", (2, 2))]
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params)
        fresh = [Parameter("x", np.zeros((2, 2)))]
        load_into(fresh, load_checkpoint(path))
        assert np.array_equal(fresh[0].value, params[0].value)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, [init_param(rng, "x", (4, 4))])
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_name_mismatch(self, rng, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, [init_param(rng, "x", (2,))])
        with pytest.raises(CheckpointError, match="mismatch"):
            load_into([Parameter("y", np.zeros(2))], load_checkpoint(path))
