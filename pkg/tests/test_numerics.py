import numpy as np
import pytest

from mmembed import numerics as nm
from mmembed.errors import (
    DegenerateEmbeddingError,
    DimensionError,
    GradientCheckError,
    TrainingDivergenceError,
)
from mmembed.numerics import ParamBlock, Tensor, adam_step, finite_difference_check


def triple_loop_matmul(a, b):
    """Independent O(n^3) product used as the matmul oracle."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = nm.matmul(np.eye(2), np.array([[3.0], [4.0]]))
        assert np.array_equal(out.value, [[3.0], [4.0]])

    def test_small_product(self):
        out = nm.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert np.array_equal(out.value, [[11.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 2))
        assert np.abs(nm.matmul(a, b).value - triple_loop_matmul(a, b)).max() < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nm.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(5)
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        left = nm.matmul(nm.matmul(a, b), c).value
        right = nm.matmul(a, nm.matmul(b, c)).value
        assert np.abs(left - right).max() < 1e-9

    def test_backward_accumulates_to_both_inputs(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.normal(size=(4, 2)))
        out = nm.matmul(a, b)
        g = rng.normal(size=out.shape)
        out.backward(g)
        assert np.allclose(a.grad, g @ b.value.T)
        assert np.allclose(b.grad, a.value.T @ g)


class TestL2NormalizeRows:
    def test_three_four_five(self):
        out = nm.l2_normalize_rows(np.array([[3.0, 4.0]]))
        assert np.allclose(out.value, [[0.6, 0.8]])

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(6, 8))
        once = nm.l2_normalize_rows(m).value
        twice = nm.l2_normalize_rows(once).value
        assert np.abs(once - twice).max() < 1e-6

    def test_unit_norms(self):
        rng = np.random.default_rng(1)
        out = nm.l2_normalize_rows(rng.normal(size=(6, 8))).value
        assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() < 1e-6

    def test_zero_row_raises(self):
        m = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(DegenerateEmbeddingError):
            nm.l2_normalize_rows(m)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))  # fixed projection so the loss is scalar

        def loss_of(x):
            return float((nm.l2_normalize_rows(x).value * w).sum())

        x = Tensor(x0.copy())
        out = nm.l2_normalize_rows(x)
        out.backward(w.astype(out.value.dtype))
        h = 1e-6
        for i in range(3):
            for j in range(4):
                xp, xm = x0.copy(), x0.copy()
                xp[i, j] += h
                xm[i, j] -= h
                numeric = (loss_of(xp) - loss_of(xm)) / (2 * h)
                assert abs(x.grad[i, j] - numeric) < 1e-6


class TestCosineSimilarityMatrix:
    def test_orthonormal_self_similarity_is_identity(self):
        a = np.eye(3)
        s = nm.cosine_similarity_matrix(a, a).value
        assert np.array_equal(s, np.eye(3))

    def test_antipodal_rows(self):
        a = np.array([[1.0, 0.0]])
        b = np.array([[-1.0, 0.0]])
        assert nm.cosine_similarity_matrix(a, b).value[0, 0] == -1.0

    def test_matches_pairwise_dot_oracle(self):
        rng = np.random.default_rng(7)
        a = nm.l2_normalize_rows(rng.normal(size=(3, 4))).value
        b = nm.l2_normalize_rows(rng.normal(size=(5, 4))).value
        s = nm.cosine_similarity_matrix(a, b).value
        for i in range(3):
            for j in range(5):
                assert abs(s[i, j] - float(np.dot(a[i], b[j]))) < 1e-6
        assert s.max() <= 1 + 1e-6 and s.min() >= -1 - 1e-6

    def test_column_mismatch(self):
        with pytest.raises(DimensionError):
            nm.cosine_similarity_matrix(np.zeros((2, 3)), np.zeros((2, 4)))


class TestElementwiseOps:
    def test_sigmoid_stable_at_extremes(self):
        out = nm.sigmoid(np.array([[-800.0, 0.0, 800.0]]))
        assert np.all(np.isfinite(out.value))
        assert np.allclose(out.value, [[0.0, 0.5, 1.0]])

    def test_where_rows_selects_and_routes_gradient(self):
        a = Tensor(np.ones((3, 2)))
        b = Tensor(np.zeros((3, 2)))
        mask = np.array([True, False, True])
        out = nm.where_rows(mask, a, b)
        assert np.array_equal(out.value, [[1, 1], [0, 0], [1, 1]])
        out.backward(np.full((3, 2), 2.0))
        assert np.array_equal(a.grad, [[2, 2], [0, 0], [2, 2]])
        assert np.array_equal(b.grad, [[0, 0], [2, 2], [0, 0]])

    def test_gather_rows_scatter_adds(self):
        table = Tensor(np.arange(6, dtype=float).reshape(3, 2))
        out = nm.gather_rows(table, [1, 1, 2])
        assert np.array_equal(out.value, [[2, 3], [2, 3], [4, 5]])
        out.backward(np.ones((3, 2)))
        assert np.array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])

    def test_add_bias_sums_gradient_over_rows(self):
        x = Tensor(np.zeros((4, 3)))
        b = Tensor(np.ones((1, 3)))
        out = nm.add_bias(x, b)
        out.backward(np.ones((4, 3)))
        assert np.array_equal(b.grad, [[4, 4, 4]])

    def test_shared_leaf_accumulates_across_branches(self):
        # The same leaf used in two branches of one graph receives both
        # gradient contributions in one backward sweep.
        x = Tensor(np.full((2, 2), 3.0))
        out = nm.add(nm.mul(x, x), x)  # x^2 + x, d/dx = 2x + 1
        out.backward(np.ones((2, 2)))
        assert np.allclose(x.grad, 2 * 3.0 + 1)


class TestAdam:
    def test_zero_gradient_value_unchanged_step_incremented(self):
        block = ParamBlock.create("w", np.array([[1.0, -2.0]]))
        before = block.value.copy()
        adam_step(block)
        assert np.array_equal(block.value, before)
        assert block.step == 1

    def test_first_step_closed_form(self):
        # With g=1 the bias corrections give m_hat = sqrt(v_hat) = 1, so the
        # update is -lr / (1 + eps).
        block = ParamBlock.create("w", np.array([[0.0]], dtype=np.float64))
        block.grad[:] = 1.0
        lr = 2e-4
        adam_step(block, lr=lr)
        expected = -lr / (1.0 + 1e-8)
        assert abs(block.value[0, 0] - expected) < 1e-8
        assert abs(block.value[0, 0] + 2.0e-4) < 1e-8

    def test_two_steps_match_hand_unrolled_recurrence(self):
        lr, b1, b2, eps = 2e-4, 0.9, 0.999, 1e-8
        block = ParamBlock.create("w", np.array([[0.5]], dtype=np.float64))
        for _ in range(2):
            block.grad[:] = 1.0
            adam_step(block, lr=lr, beta1=b1, beta2=b2, eps=eps)
        # Hand unrolling with constant g=1.
        theta, m, v = 0.5, 0.0, 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
        assert abs(block.value[0, 0] - theta) < 1e-10

    def test_lr_zero_is_identity_on_value(self):
        rng = np.random.default_rng(4)
        block = ParamBlock.create("w", rng.normal(size=(3, 3)))
        block.grad[:] = rng.normal(size=(3, 3))
        before = block.value.copy()
        adam_step(block, lr=0.0)
        assert np.array_equal(block.value, before)

    def test_nonfinite_gradient_raises_with_block_name(self):
        block = ParamBlock.create("theta", np.zeros((1, 2)))
        block.grad[0, 0] = np.nan
        with pytest.raises(TrainingDivergenceError, match="theta"):
            adam_step(block)

    def test_grad_zeroed_after_step(self):
        block = ParamBlock.create("w", np.ones((2, 2)))
        block.grad[:] = 1.0
        adam_step(block)
        assert np.array_equal(block.grad, np.zeros((2, 2)))


class TestFiniteDifferenceCheck:
    def test_quadratic_loss(self):
        rng = np.random.default_rng(11)
        block = ParamBlock.create("theta", rng.normal(size=(4, 3)))

        def loss_fn(params):
            (b,) = params
            b.grad += b.value
            return 0.5 * float((b.value ** 2).sum())

        report = finite_difference_check(loss_fn, [block], tolerance=1e-9)
        assert report.passed
        assert report.max_rel_error["theta"] < 1e-9

    def test_corrupted_gradient_fails(self):
        rng = np.random.default_rng(13)
        block = ParamBlock.create("theta", rng.normal(size=(2, 2)))

        def loss_fn(params):
            (b,) = params
            b.grad += b.value
            b.grad[0, 0] += 0.1  # deliberate corruption
            return 0.5 * float((b.value ** 2).sum())

        report = finite_difference_check(loss_fn, [block], tolerance=1e-6)
        assert not report.passed

    def test_nonfinite_loss_aborts(self):
        block = ParamBlock.create("theta", np.zeros((1, 1)))

        def loss_fn(params):
            return float("nan")

        with pytest.raises(GradientCheckError):
            finite_difference_check(loss_fn, [block])

    def test_subsampling_large_block_is_seeded(self):
        rng = np.random.default_rng(21)
        block = ParamBlock.create("theta", rng.normal(size=(30, 30)))

        calls = []

        def loss_fn(params):
            (b,) = params
            calls.append(1)
            b.grad += b.value
            return 0.5 * float((b.value ** 2).sum())

        report = finite_difference_check(loss_fn, [block], max_entries_per_block=200, seed=9)
        assert report.passed
        # 1 analytic call + 2 per sampled entry
        assert len(calls) == 1 + 2 * 200


def test_backward_composition_matches_finite_differences():
    # Composition of primitives: normalize(sigmoid(x @ w) + b) scored against
    # a fixed matrix; gradient of every input checked numerically.
    rng = np.random.default_rng(33)
    w0 = rng.normal(size=(4, 3))
    b0 = rng.normal(size=(1, 3))
    x0 = rng.normal(size=(5, 4))
    score = rng.normal(size=(5, 3))

    def forward(xv, wv, bv):
        x, w, b = Tensor(xv), Tensor(wv), Tensor(bv)
        out = nm.l2_normalize_rows(nm.add_bias(nm.sigmoid(nm.matmul(x, w)), b))
        return x, w, b, out

    x, w, b, out = forward(x0, w0, b0)
    out.backward(score)

    h = 1e-6
    for target, grad in ((x0, x.grad), (w0, w.grad), (b0, b.grad)):
        flat = target.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float((forward(x0, w0, b0)[3].value * score).sum())
            flat[i] = orig - h
            fm = float((forward(x0, w0, b0)[3].value * score).sum())
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            rel = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            assert rel < 1e-4
