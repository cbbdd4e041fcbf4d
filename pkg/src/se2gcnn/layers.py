"""Lifting, group correlation and orientation projection layers on SE(2,N).

SE(2) images are ``[B, H, W, N, C]`` tensors: two spatial axes, one
orientation axis sampled at ``2*pi*i/N``, channels last.

Both correlation layers are lowered to a single :func:`correlate2d` call:
the rotated (and, for group kernels, orientation-twisted) kernel stack is
flattened into an ordinary ``[n, n, C_in', N*C_out]`` kernel whose output
channels run orientation-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .kernels import RotationOperator, build_rotation_operator, rotate_kernel_stack


@dataclass(eq=False)
class LiftingKernelSet:
    """Base weights ``[C_out, C_in, |mask|]`` shared by all N rotations."""

    base: Tensor
    n: int
    N: int
    op: RotationOperator = field(init=False)

    def __post_init__(self):
        self.op = build_rotation_operator(self.n, self.N)
        if self.base.ndim != 3 or self.base.shape[-1] != self.op.size:
            raise ValueError(f"lifting base weights must be [C_out, C_in, {self.op.size}], got {self.base.shape}")
        c_out, c_in, _ = self.base.shape
        idx = np.arange(self.n * self.n * self.N * c_out * c_in).reshape(self.n, self.n, self.N, c_out, c_in)
        self._gather = idx.transpose(0, 1, 4, 2, 3)  # -> [n, n, C_in, N, C_out]

    @classmethod
    def zeros(cls, c_in: int, c_out: int, n: int, N: int, dtype=np.float32) -> "LiftingKernelSet":
        m = build_rotation_operator(n, N).size
        return cls(Tensor(np.zeros((c_out, c_in, m), dtype=dtype), requires_grad=True), n, N)

    @property
    def c_in(self) -> int:
        return self.base.shape[1]

    @property
    def c_out(self) -> int:
        return self.base.shape[0]

    def rotated(self) -> Tensor:
        """Dense stack ``[n, n, N, C_out, C_in]``; slice i is rotated by theta_i."""
        return rotate_kernel_stack(self.base, self.op)

    def correlation_kernel(self) -> Tensor:
        stack = ag.take_indices(self.rotated(), self._gather)
        return ag.reshape(stack, (self.n, self.n, self.c_in, self.N * self.c_out))


@dataclass(eq=False)
class GroupKernelSet:
    """Base weights ``[C_out, C_in, N, |mask|]``; axis 2 is the kernel's own orientation."""

    base: Tensor
    n: int
    N: int
    op: RotationOperator = field(init=False)

    def __post_init__(self):
        self.op = build_rotation_operator(self.n, self.N)
        if self.base.ndim != 4 or self.base.shape[2] != self.N or self.base.shape[-1] != self.op.size:
            raise ValueError(
                f"group base weights must be [C_out, C_in, {self.N}, {self.op.size}], got {self.base.shape}")
        c_out, c_in = self.base.shape[:2]
        N = self.N
        idx = np.arange(self.n * self.n * N * c_out * c_in * N).reshape(self.n, self.n, N, c_out, c_in, N)
        m = np.arange(N)[:, None, None, None]
        c = np.arange(c_in)[None, :, None, None]
        i = np.arange(N)[None, None, :, None]
        o = np.arange(c_out)[None, None, None, :]
        # input orientation m, output orientation i reads kernel slice (m - i) mod N rotated by theta_i
        self._gather = idx[:, :, i, o, c, (m - i) % N]  # -> [n, n, N_in, C_in, N_out, C_out]

    @classmethod
    def zeros(cls, c_in: int, c_out: int, n: int, N: int, dtype=np.float32) -> "GroupKernelSet":
        m = build_rotation_operator(n, N).size
        return cls(Tensor(np.zeros((c_out, c_in, N, m), dtype=dtype), requires_grad=True), n, N)

    @property
    def c_in(self) -> int:
        return self.base.shape[1]

    @property
    def c_out(self) -> int:
        return self.base.shape[0]

    def rotated(self) -> Tensor:
        """Dense stack ``[n, n, N_rot, C_out, C_in, N_kernel]``."""
        return rotate_kernel_stack(self.base, self.op)

    def correlation_kernel(self) -> Tensor:
        stack = ag.take_indices(self.rotated(), self._gather)
        return ag.reshape(stack, (self.n, self.n, self.N * self.c_in, self.N * self.c_out))


def lift_correlate(f: Tensor, kernels: LiftingKernelSet, padding: str = "same") -> Tensor:
    """Correlate a 2D image with every rotated kernel: ``[B,H,W,C]`` to ``[B,H,W,N,C_out]``."""
    f = ag.as_tensor(f)
    if f.shape[-1] != kernels.c_in:
        raise ValueError(f"image has {f.shape[-1]} channels, kernels expect {kernels.c_in}")
    out = ag.correlate2d(f, kernels.correlation_kernel(), padding=padding)
    return ag.reshape(out, out.shape[:-1] + (kernels.N, kernels.c_out))


def group_correlate(F: Tensor, kernels: GroupKernelSet, padding: str = "same") -> Tensor:
    """Group correlation of an SE(2) image with shift-twisted kernels."""
    F = ag.as_tensor(F)
    if F.ndim != 5:
        raise ValueError("group_correlate expects [B, H, W, N, C]")
    b, h, w, N, c = F.shape
    if N != kernels.N:
        raise ValueError(f"image has {N} orientations, kernels have {kernels.N}")
    if c != kernels.c_in:
        raise ValueError(f"image has {c} channels, kernels expect {kernels.c_in}")
    flat = ag.reshape(F, (b, h, w, N * c))
    out = ag.correlate2d(flat, kernels.correlation_kernel(), padding=padding)
    return ag.reshape(out, out.shape[:-1] + (N, kernels.c_out))


def project_max_theta(F: Tensor, mode: str = "max") -> Tensor:
    """Collapse the orientation axis of ``[B,H,W,N,C]`` by max (or mean)."""
    if mode == "max":
        return ag.max_over_axis(F, axis=-2)
    if mode == "mean":
        return ag.mean_over_axis(F, axis=-2)
    raise ValueError(f"unknown projection mode {mode!r}")


def se2_max_pool(F: Tensor, window: int) -> Tensor:
    """Spatial max pooling applied to every orientation and channel slice."""
    return ag.max_pool2d(F, window)
