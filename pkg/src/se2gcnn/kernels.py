"""Disk-masked kernels and the sparse operator that rotates them.

A kernel of size ``n`` keeps only the grid positions within distance
``n/2`` of its center. The rotation operator maps the masked base weights
to all ``N`` rotated copies in one sparse matrix product: block ``i`` holds
the base kernel sampled bilinearly at ``R(theta_i)^-1 (p - center)``, so
slice ``i`` is the kernel rotated counterclockwise by ``theta_i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy import sparse

from .autograd import Function, Tensor
from .geometry import TWO_PI, bilinear_triplets, grid_to_plane, plane_to_grid, rotation_matrix


@dataclass(frozen=True)
class DiskMask:
    n: int
    positions: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def array(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        for r, c in self.positions:
            m[r, c] = True
        return m

    @property
    def flat_indices(self) -> np.ndarray:
        return np.array([r * self.n + c for r, c in self.positions], dtype=np.intp)


@lru_cache(maxsize=None)
def build_disk_mask(n: int) -> DiskMask:
    if n < 1 or n % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {n}")
    center = (n - 1) / 2
    pos = tuple((r, c) for r in range(n) for c in range(n)
                if (r - center) ** 2 + (c - center) ** 2 <= (n / 2) ** 2)
    return DiskMask(n, pos)


@dataclass(frozen=True, eq=False)
class RotationOperator:
    """Sparse ``(N*|mask|) x |mask|`` matrix; rows ordered (orientation, target)."""

    n: int
    N: int
    mask: DiskMask
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    @property
    def size(self) -> int:
        return len(self.mask)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.N * self.size, self.size)

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.values, (self.rows, self.cols)), shape=self.shape)

    def block(self, i: int) -> np.ndarray:
        """Dense ``|mask| x |mask|`` block for orientation ``i``."""
        m = self.size
        return self.matrix[i * m:(i + 1) * m].toarray()

    def triplets_text(self) -> str:
        return "".join(f"{r} {c} {v:.17g}\n" for r, c, v in zip(self.rows, self.cols, self.values))


@lru_cache(maxsize=None)
def build_rotation_operator(n: int, N: int) -> RotationOperator:
    if N < 1:
        raise ValueError("number of orientations must be positive")
    mask = build_disk_mask(n)
    valid = mask.array
    grid_to_masked = np.full(n * n, -1, dtype=np.intp)
    grid_to_masked[mask.flat_indices] = np.arange(len(mask))
    tr = np.array([p[0] for p in mask.positions], dtype=float)
    tc = np.array([p[1] for p in mask.positions], dtype=float)
    px, py = grid_to_plane(tr, tc, (n, n))
    rows, cols, vals = [], [], []
    for i in range(N):
        rinv = rotation_matrix(TWO_PI * i / N).T
        qx = rinv[0, 0] * px + rinv[0, 1] * py
        qy = rinv[1, 0] * px + rinv[1, 1] * py
        sr, sc = plane_to_grid(qx, qy, (n, n))
        t, s, w = bilinear_triplets(sr, sc, (n, n), valid=valid)
        rows.append(t + i * len(mask))
        cols.append(grid_to_masked[s])
        vals.append(w)
    return RotationOperator(n, N, mask, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


class RotateKernelStack(Function):
    """``[..., |mask|]`` base weights to a dense ``[n, n, N, ...]`` stack."""

    def forward(self, base, op: RotationOperator):
        m = op.size
        if base.shape[-1] != m:
            raise ValueError(f"base weights have trailing length {base.shape[-1]}, mask has {m}")
        self.op = op
        self.lead = base.shape[:-1]
        p = int(np.prod(self.lead))
        rotated = op.matrix @ base.reshape(p, m).T.astype(np.float64)  # (N*m, p)
        dense = np.zeros((op.n * op.n, op.N, p), dtype=base.dtype)
        dense[op.mask.flat_indices] = rotated.reshape(op.N, m, p).transpose(1, 0, 2)
        return dense.reshape((op.n, op.n, op.N) + self.lead)

    def backward(self, grad):
        op = self.op
        m = op.size
        p = int(np.prod(self.lead))
        g = grad.reshape(op.n * op.n, op.N, p)[op.mask.flat_indices]  # (m, N, p)
        g = g.transpose(1, 0, 2).reshape(op.N * m, p)
        gb = (op.matrix.T @ g.astype(np.float64)).T
        return (gb.reshape(self.lead + (m,)).astype(grad.dtype),)


def rotate_kernel_stack(base: Tensor, op: RotationOperator) -> Tensor:
    """All ``N`` rotations of masked base kernels, zeros outside the mask.

    Differentiable in ``base``; the backward pass applies the transposed
    operator.
    """
    return RotateKernelStack.apply(base, op=op)


def masked_to_dense(base: np.ndarray, mask: DiskMask) -> np.ndarray:
    """Scatter ``[..., |mask|]`` weights into ``[..., n, n]`` (no rotation)."""
    base = np.asarray(base)
    out = np.zeros(base.shape[:-1] + (mask.n * mask.n,), dtype=base.dtype)
    out[..., mask.flat_indices] = base
    return out.reshape(base.shape[:-1] + (mask.n, mask.n))
