"""Reverse-mode autodiff, Adam and the checkpoint format."""

import struct

import numpy as np
import pytest

from conftest import central_difference
from mahacal import checkpoint
from mahacal import tensor as tt
from mahacal.optim import Adam
from mahacal.tensor import ShapeError, Tensor


def grad_check(build, *arrays, tol=1e-6, h=1e-6):
    """Compare autodiff gradients of ``build(*tensors)`` with central differences."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*leaves)
    tt.backward(out)
    for leaf in leaves:
        numeric = central_difference(lambda: build(*[Tensor(l.data) for l in leaves]).item(), leaf.data, h)
        grad = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        np.testing.assert_allclose(grad, numeric, rtol=tol, atol=tol)


class TestElementwiseGradients:
    def test_arithmetic_with_broadcasting(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        grad_check(lambda x, y: tt.sum((x + y) * (x - y) / (y * y + 1.0)), a, b)

    def test_unary_ops(self, rng):
        a = rng.normal(size=(5,))
        grad_check(lambda x: tt.sum(tt.exp(x) + tt.sigmoid(x) * tt.softplus(x) + tt.log(x * x + 1.0)), a)

    def test_relu_and_clamp_away_from_kinks(self, rng):
        a = rng.normal(size=(6,))
        a[np.abs(a) < 0.1] = 0.5
        grad_check(lambda x: tt.sum(tt.relu(x) * x + tt.clamp_min(x, 0.05) * x), a)

    def test_clamp_min_blocks_gradient_below_floor(self):
        x = Tensor(np.array([-1.0, 0.5]), requires_grad=True)
        tt.backward(tt.sum(tt.clamp_min(x, 0.1)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_stable_sigmoid_extremes(self):
        out = tt.sigmoid(Tensor([-800.0, 800.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])


class TestReductionsAndShapes:
    def test_logsumexp_and_softmax(self, rng):
        a = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        grad_check(lambda x: tt.sum(tt.logsumexp(x, axis=1)) + tt.sum(tt.softmax(x, axis=0) * w), a)

    def test_logsumexp_is_stable(self):
        out = tt.logsumexp(Tensor([1000.0, 1000.0])).item()
        assert out == pytest.approx(1000.0 + np.log(2.0), abs=1e-12)

    def test_batched_matmul(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        grad_check(lambda x, y: tt.sum(tt.matmul(x, y) * tt.matmul(x, y)), a, b)

    def test_vector_matmul(self, rng):
        a, b = rng.normal(size=(4,)), rng.normal(size=(4, 3))
        grad_check(lambda x, y: tt.sum(tt.exp(x @ y)), a, b)
        grad_check(lambda x, y: tt.sum(tt.exp(y.T @ x)), a, b)

    def test_transpose_reshape_concat_index(self, rng):
        a = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 6))

        def build(x):
            t = tt.transpose(x, (2, 0, 1))
            r = tt.reshape(t, (4, 6)) * w
            c = tt.concat([r, r * 2.0], axis=0)
            s = tt.index_select(c, [0, 3, 3, 7], axis=0)
            return tt.sum(s * s) + tt.sum(x[:, 1:, ::2] * 3.0)

        grad_check(build, a)

    def test_mean_and_broadcast_to(self, rng):
        a = rng.normal(size=(3, 1))
        grad_check(lambda x: tt.sum(tt.broadcast_to(x, (2, 3, 4)) * tt.mean(x, axis=0)), a)

    def test_shape_errors_name_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            tt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.ones(3)) + Tensor(np.ones(4))


class TestTape:
    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            tt.backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x
        tt.backward(y + y * x)  # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad == pytest.approx(2 * 3 + 3 * 9)

    def test_tape_is_consumed(self):
        x = Tensor(2.0, requires_grad=True)
        loss = x * x
        tt.backward(loss)
        assert loss._parents == () and not loss.requires_grad
        with pytest.raises(RuntimeError):
            tt.backward(loss)

    def test_creation_order_is_topological(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        a = tt.exp(x)
        b = a * x
        loss = tt.sum(b + a)
        nodes = tt.Tape.collect(loss).nodes
        seqs = [n._seq for n in nodes]
        assert seqs == sorted(seqs) and nodes[-1] is loss

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with tt.no_grad():
            y = x * 3.0
        assert not y.requires_grad and y._parents == ()
        assert (x * 3.0).requires_grad


OPS_UNARY = [
    lambda x: tt.exp(x * 0.3),
    lambda x: tt.sigmoid(x),
    lambda x: tt.softplus(x),
    lambda x: tt.log(x * x + 1.0),
    lambda x: x * x,
    lambda x: -x,
    lambda x: tt.transpose(x),
]
OPS_BINARY = [
    lambda x, y: x + y,
    lambda x, y: x - y,
    lambda x, y: x * y,
    lambda x, y: x / (y * y + 1.0),
    lambda x, y: tt.matmul(x, tt.transpose(y)) @ y * 0.1,
]


class TestRandomGraphs:
    """Finite-difference agreement on 100 randomly composed graphs."""

    @pytest.mark.parametrize("seed", range(100))
    def test_random_graph(self, seed):
        rng = np.random.default_rng(seed)
        inputs = [rng.normal(size=(3, 3)) for _ in range(3)]
        plan = [(int(rng.integers(2)), int(rng.integers(7)), int(rng.integers(5)), rng.integers(0, 3, 2))
                for _ in range(int(rng.integers(2, 7)))]

        def build(*leaves):
            pool = list(leaves)
            for kind, u, b, (i, j) in plan:
                a1, a2 = pool[i % len(pool)], pool[-1 - j % len(pool)]
                pool.append(OPS_UNARY[u](a1) if kind == 0 else OPS_BINARY[b](a1, a2))
            return tt.sum(tt.logsumexp(pool[-1], axis=-1)) + tt.mean(pool[-1] * pool[0])

        grad_check(build, *inputs, tol=1e-5)


class TestAdam:
    def test_single_step_matches_hand_computation(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.array([0.5, -4.0])
        assert opt.step()
        # first step: m_hat = g, v_hat = g^2, so update = lr * g / (|g| + eps)
        expected = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -4.0]) / (np.array([0.5, 4.0]) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-14)

    def test_minimizes_quadratic(self):
        p = Tensor(np.array([3.0, -1.0]), requires_grad=True)
        opt = Adam([p], lr=0.05)
        for _ in range(2000):
            opt.zero_grad()
            tt.backward(tt.sum((p - 1.0) * (p - 1.0)))
            opt.step()
        np.testing.assert_allclose(p.data, [1.0, 1.0], atol=1e-4)

    def test_non_finite_gradient_skips_step(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.array([np.nan])
        assert not opt.step()
        assert opt.skipped == 1 and opt.step_count == 0
        np.testing.assert_array_equal(p.data, [1.0])

    def test_missing_gradient_counts_as_zero(self):
        p, q = Tensor(np.ones(1), requires_grad=True), Tensor(np.ones(1), requires_grad=True)
        opt = Adam([p, q], lr=0.1)
        p.grad = np.ones(1)
        opt.step()
        np.testing.assert_array_equal(q.data, [1.0])


class TestCheckpoint:
    def test_round_trip_is_exact(self, rng):
        state = {"a.weight": rng.normal(size=(3, 2)), "b": np.array(2.5), "ünï": rng.normal(size=(1, 2, 3))}
        loaded = checkpoint.loads(checkpoint.dumps(state))
        assert list(loaded) == list(state)
        for k in state:
            np.testing.assert_array_equal(loaded[k], state[k])
            assert loaded[k].shape == np.asarray(state[k]).shape

    def test_layout(self):
        raw = checkpoint.dumps({"w": np.array([1.0, 2.0])})
        assert raw[:4] == b"MMC1"
        assert struct.unpack("<I", raw[4:8]) == (1,)
        assert struct.unpack("<I", raw[8:12]) == (1,) and raw[12:13] == b"w"
        assert struct.unpack("<II", raw[13:21]) == (1, 2)
        assert struct.unpack("<2d", raw[21:]) == (1.0, 2.0)

    def test_bad_magic(self):
        raw = bytearray(checkpoint.dumps({"w": np.ones(2)}))
        raw[0:4] = b"XXXX"
        with pytest.raises(checkpoint.CheckpointError, match="magic"):
            checkpoint.loads(bytes(raw))

    @pytest.mark.parametrize("cut", [1, 5, 9])
    def test_truncated(self, cut):
        raw = checkpoint.dumps({"w": np.ones(2)})
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(raw[:-cut])

    def test_trailing_bytes(self):
        raw = checkpoint.dumps({"w": np.ones(2)})
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(raw + b"\x00")
