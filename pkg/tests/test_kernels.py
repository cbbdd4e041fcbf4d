import itertools
import math

import numpy as np
import pytest

from se2gcnn import autograd as ag
from se2gcnn.autograd import Tensor, finite_difference_gradient
from se2gcnn.kernels import build_disk_mask, build_rotation_operator, masked_to_dense, rotate_kernel_stack

from conftest import max_relative_error


def _count_disk(n):
    c = (n - 1) / 2
    return sum(1 for r, s in itertools.product(range(n), repeat=2) if math.hypot(r - c, s - c) <= n / 2)


class TestDiskMask:
    @pytest.mark.parametrize("n,expected", [(1, 1), (3, 9), (5, 21)])
    def test_cardinality(self, n, expected):
        assert len(build_disk_mask(n)) == expected == _count_disk(n)

    def test_corners_excluded_for_5(self):
        m = build_disk_mask(5).array
        assert not m[0, 0] and not m[0, 4] and not m[4, 0] and not m[4, 4]
        assert m.sum() == 21

    @pytest.mark.parametrize("n", [1, 3, 5, 7])
    def test_rotation_invariant(self, n):
        m = build_disk_mask(n).array
        np.testing.assert_array_equal(m, np.rot90(m))
        np.testing.assert_array_equal(m, m.T)

    def test_even_rejected(self):
        with pytest.raises(ValueError):
            build_disk_mask(4)


class TestRotationOperator:
    def test_single_orientation_is_identity(self):
        op = build_rotation_operator(5, 1)
        np.testing.assert_array_equal(op.matrix.toarray(), np.eye(21))

    @pytest.mark.parametrize("n", [3, 5])
    def test_quarter_turn_blocks_are_permutations(self, n):
        op = build_rotation_operator(n, 4)
        for i in range(4):
            b = op.block(i)
            assert set(np.unique(b)) <= {0.0, 1.0}
            np.testing.assert_array_equal(b.sum(0), 1)
            np.testing.assert_array_equal(b.sum(1), 1)

    @pytest.mark.parametrize("N", [8, 12, 16])
    def test_structure(self, N):
        op = build_rotation_operator(5, N)
        dense = op.matrix.toarray()
        assert dense.shape == (N * 21, 21)
        assert op.values.size <= 4 * N * 21
        assert np.all((op.matrix != 0).sum(axis=1) <= 4)
        assert np.all(dense >= 0) and np.all(dense.sum(1) <= 1 + 1e-12)
        np.testing.assert_array_equal(op.block(0), np.eye(21))
        if N % 4 == 0:
            for i in (N // 4, N // 2, 3 * N // 4):
                b = op.block(i)
                np.testing.assert_array_equal(b.sum(1), 1)
                assert set(np.unique(b)) <= {0.0, 1.0}
        # triplets sorted row-major
        key = op.rows * op.shape[1] + op.cols
        assert np.all(np.diff(key) > 0)

    def test_rows_with_full_bilinear_cell_sum_to_one(self):
        op = build_rotation_operator(5, 8)
        dense = op.matrix.toarray()
        # the center and its 4-neighbors rotate into cells fully inside the mask
        mask = build_disk_mask(5)
        inner = [k for k, (r, c) in enumerate(mask.positions) if abs(r - 2) + abs(c - 2) <= 1]
        for i in range(8):
            np.testing.assert_allclose(dense[i * 21 + np.array(inner)].sum(1), 1, atol=1e-12)

    def test_radially_symmetric_kernel_is_invariant(self):
        op = build_rotation_operator(5, 8)
        mask = build_disk_mask(5)
        # radius sqrt(5) positions get mixed with the excluded corners, so keep the
        # profile supported where 45 degree rotations stay inside the mask
        r2 = np.array([(r - 2) ** 2 + (c - 2) ** 2 for r, c in mask.positions], dtype=float)
        base = np.where(r2 <= 1, np.exp(-r2 / 2.0), 0.0)
        # bilinear weights of the 45 degree rotation sum to one on this support
        stack = rotate_kernel_stack(Tensor(base), op).data
        ref = masked_to_dense(base, mask)
        for i in (0, 2, 4, 6):
            np.testing.assert_allclose(stack[:, :, i], ref, atol=1e-12)
        for i in (1, 3, 5, 7):
            # only the centre and its ring of 4 survive; check the centre exactly and
            # the 4-ring within bilinear error of a unit-radius circle
            assert stack[2, 2, i] == pytest.approx(1.0)
            np.testing.assert_allclose(stack[:, :, i], stack[:, :, i].T, atol=1e-12)

    def test_triplets_text(self):
        text = build_rotation_operator(3, 2).triplets_text()
        first = text.splitlines()[0].split()
        assert len(first) == 3 and int(first[0]) == 0


class TestRotateKernelStack:
    def test_center_delta_fixed(self):
        op = build_rotation_operator(5, 8)
        base = np.zeros(21)
        base[10] = 1.0  # (2, 2) is the 11th masked position
        assert build_disk_mask(5).positions[10] == (2, 2)
        stack = rotate_kernel_stack(Tensor(base), op).data
        expect = np.zeros((5, 5))
        expect[2, 2] = 1
        for i in (0, 2, 4, 6):
            np.testing.assert_array_equal(stack[:, :, i], expect)
        # at odd multiples of 45 degrees the 4-neighbours sample the centre bilinearly
        leak = (1 - 1 / math.sqrt(2)) ** 2
        for i in (1, 3, 5, 7):
            assert stack[2, 2, i] == 1.0
            for r, c in [(1, 2), (3, 2), (2, 1), (2, 3)]:
                assert stack[r, c, i] == pytest.approx(leak)
            assert stack[:, :, i].sum() == pytest.approx(1 + 4 * leak)

    def test_quarter_turn_delta(self):
        op = build_rotation_operator(5, 4)
        mask = build_disk_mask(5)
        base = np.zeros(21)
        base[mask.positions.index((2, 3))] = 1.0  # offset (x=1, y=0)
        stack = rotate_kernel_stack(Tensor(base), op).data
        expected = [(2, 3), (1, 2), (2, 1), (3, 2)]  # right, up, left, down
        for i, (r, c) in enumerate(expected):
            assert stack[r, c, i] == 1.0 and stack[:, :, i].sum() == 1.0

    def test_zero_outside_mask(self, rng):
        stack = rotate_kernel_stack(Tensor(rng.standard_normal((2, 21))), build_rotation_operator(5, 8)).data
        assert stack.shape == (5, 5, 8, 2)
        assert np.all(stack[0, 0] == 0) and np.all(stack[4, 4] == 0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rotate_kernel_stack(Tensor(np.zeros(20)), build_rotation_operator(5, 4))

    def test_adjoint(self, rng):
        op = build_rotation_operator(5, 8)
        b = rng.standard_normal((3, 21))
        T = rng.standard_normal((5, 5, 8, 3))
        bt = Tensor(b, requires_grad=True)
        out = rotate_kernel_stack(bt, op)
        ag.backward(ag.dot(out, T))
        # <rotate(b), T> = <b, rotate^T(T)>
        assert float(np.sum(out.data * T)) == pytest.approx(float(np.sum(b * bt.grad)), abs=1e-12)

    def test_gradient(self, rng):
        op = build_rotation_operator(5, 8)
        b = rng.uniform(-1, 1, (2, 21))
        w = rng.uniform(-1, 1, (5, 5, 8, 2))
        bt = Tensor(b, requires_grad=True)
        ag.backward(ag.dot(ag.relu(rotate_kernel_stack(bt, op)), w))
        num = finite_difference_gradient(lambda v: ag.dot(ag.relu(rotate_kernel_stack(Tensor(v), op)), w).data, b)
        assert max_relative_error(bt.grad, num) < 1e-6

    def test_linear(self, rng):
        op = build_rotation_operator(3, 6)
        a, b = rng.standard_normal((2, 4, 9))
        lhs = rotate_kernel_stack(Tensor(2 * a - b), op).data
        rhs = 2 * rotate_kernel_stack(Tensor(a), op).data - rotate_kernel_stack(Tensor(b), op).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
