"""The roto-translation group SE(2), its discretization SE(2,N), and its
left-regular actions on sampled 2D images and SE(2) images.

Coordinate convention
---------------------
Group math uses x pointing right and y pointing up, with the origin at the
continuous grid center ``((H-1)/2, (W-1)/2)``. Storage uses (row, col) with
rows growing downward. The conversion lives only in :func:`grid_to_plane`
and :func:`plane_to_grid`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

TWO_PI = 2.0 * math.pi
_SNAP = 1e-9


def _wrap(theta: float) -> float:
    t = math.fmod(theta, TWO_PI)
    if t < 0:
        t += TWO_PI
    # fmod can return 2*pi - tiny for -tiny inputs
    if t >= TWO_PI:
        t -= TWO_PI
    return t


@dataclass(frozen=True)
class GroupElement:
    """g = (x, theta): translate by ``x`` (pixels, y up) after rotating by ``theta``."""

    x: tuple[float, float] = (0.0, 0.0)
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", (float(self.x[0]), float(self.x[1])))
        object.__setattr__(self, "theta", _wrap(float(self.theta)))

    @classmethod
    def identity(cls) -> "GroupElement":
        return cls((0.0, 0.0), 0.0)

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        return group_product(self, other)

    def inverse(self) -> "GroupElement":
        return group_inverse(self)


@dataclass(frozen=True)
class OrientationSampling:
    """N equally spaced orientations ``2*pi*i/N``."""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"number of orientations must be a positive integer, got {self.N}")

    @property
    def angles(self) -> np.ndarray:
        return TWO_PI * np.arange(self.N) / self.N

    def index_of(self, theta: float) -> int:
        """Orientation index of a sampled angle; raises for off-grid angles."""
        pos = _wrap(theta) * self.N / TWO_PI
        j = round(pos)
        if abs(pos - j) > 1e-9:
            raise ValueError(f"angle {theta} is not one of the {self.N} sampled orientations")
        return j % self.N


@dataclass(frozen=True)
class DiscreteGroupElement:
    """An element of SE(2,N): integer translation and orientation index."""

    x: tuple[int, int]
    index: int
    sampling: OrientationSampling = field(default_factory=lambda: OrientationSampling(1))

    def __post_init__(self):
        object.__setattr__(self, "x", (int(self.x[0]), int(self.x[1])))
        object.__setattr__(self, "index", int(self.index) % self.sampling.N)

    @property
    def theta(self) -> float:
        return TWO_PI * self.index / self.sampling.N

    def to_continuous(self) -> GroupElement:
        return GroupElement(self.x, self.theta)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def group_product(g: GroupElement, h: GroupElement) -> GroupElement:
    x = rotation_matrix(g.theta) @ np.asarray(h.x) + np.asarray(g.x)
    return GroupElement((x[0], x[1]), g.theta + h.theta)


def group_inverse(g: GroupElement) -> GroupElement:
    x = -(rotation_matrix(g.theta).T @ np.asarray(g.x))
    return GroupElement((x[0], x[1]), -g.theta)


def group_action_point(g: GroupElement, point, angle: float = 0.0) -> tuple[np.ndarray, float]:
    """Act with ``g`` on a position-orientation pair."""
    p = rotation_matrix(g.theta) @ np.asarray(point, dtype=float) + np.asarray(g.x)
    return p, _wrap(g.theta + angle)


# ---------------------------------------------------------------------------
# Sampled grids


def grid_to_plane(rows, cols, shape: tuple[int, int]):
    """(row, col) indices to centered plane coordinates (x right, y up)."""
    cy, cx = (shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0
    return np.asarray(cols, dtype=float) - cx, cy - np.asarray(rows, dtype=float)


def plane_to_grid(x, y, shape: tuple[int, int]):
    cy, cx = (shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0
    return cy - np.asarray(y, dtype=float), np.asarray(x, dtype=float) + cx


def bilinear_triplets(src_rows: np.ndarray, src_cols: np.ndarray, shape: tuple[int, int],
                      valid: np.ndarray | None = None):
    """Bilinear sampling weights as (target, source, weight) triplets.

    Target ``t`` samples the grid of ``shape`` at ``(src_rows[t], src_cols[t])``.
    Sources outside the grid, or outside ``valid`` (a boolean mask over the
    grid), contribute nothing; rows are not renormalized. Coordinates within
    1e-9 of an integer are snapped so grid-aligned rotations are exact.
    """
    h, w = shape
    r = np.asarray(src_rows, dtype=float).ravel()
    c = np.asarray(src_cols, dtype=float).ravel()
    r = np.where(np.abs(r - np.round(r)) < _SNAP, np.round(r), r)
    c = np.where(np.abs(c - np.round(c)) < _SNAP, np.round(c), c)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0
    targets = np.arange(r.size)
    t_all, s_all, w_all = [], [], []
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w) & (wt > 0)
        if valid is not None:
            ok[ok] &= valid[rr[ok], cc[ok]]
        t_all.append(targets[ok])
        s_all.append(rr[ok] * w + cc[ok])
        w_all.append(wt[ok])
    t = np.concatenate(t_all)
    s = np.concatenate(s_all)
    wv = np.concatenate(w_all)
    order = np.lexsort((s, t))
    return t[order], s[order], wv[order]


def resampling_matrix(g: GroupElement, shape: tuple[int, int]) -> sparse.csr_matrix:
    """Sparse matrix M with ``vec(U_g f) = M @ vec(f)`` on a grid of ``shape``."""
    h, w = shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px, py = grid_to_plane(rows.ravel(), cols.ravel(), shape)
    rinv = rotation_matrix(g.theta).T
    qx = rinv[0, 0] * (px - g.x[0]) + rinv[0, 1] * (py - g.x[1])
    qy = rinv[1, 0] * (px - g.x[0]) + rinv[1, 1] * (py - g.x[1])
    sr, sc = plane_to_grid(qx, qy, shape)
    t, s, wv = bilinear_triplets(sr, sc, shape)
    return sparse.csr_matrix((wv, (t, s)), shape=(h * w, h * w))


def _resample_spatial(arr: np.ndarray, g: GroupElement, spatial_axis: int) -> np.ndarray:
    if g.theta == 0.0 and g.x == (0.0, 0.0):
        return arr.copy()
    moved = np.moveaxis(arr, (spatial_axis, spatial_axis + 1), (0, 1))
    h, w = moved.shape[:2]
    m = resampling_matrix(g, (h, w))
    flat = moved.reshape(h * w, -1)
    out = (m @ flat.astype(np.float64)).astype(arr.dtype).reshape(moved.shape)
    return np.moveaxis(out, (0, 1), (spatial_axis, spatial_axis + 1))


def apply_U(g: GroupElement, image: np.ndarray) -> np.ndarray:
    """Roto-translate a 2D image: ``out(x') = f(R^-1 (x' - x))``.

    ``image`` is ``[H, W]``, ``[H, W, C]`` or batched ``[B, H, W, C]``.
    Bilinear sampling about the grid center, zero outside the domain.
    """
    image = np.asarray(image)
    axis = 1 if image.ndim == 4 else 0
    return _resample_spatial(image, g, axis)


def apply_L(g: GroupElement, F: np.ndarray, sampling: OrientationSampling | int | None = None) -> np.ndarray:
    """Shift-twist an SE(2) image: ``out(x', th') = F(R^-1 (x' - x), th' - th)``.

    ``F`` is ``[H, W, N, C]`` or batched ``[B, H, W, N, C]``. The angle of
    ``g`` must be a sampled orientation so that the twist is an exact cyclic
    shift of the orientation axis.
    """
    F = np.asarray(F)
    if F.ndim not in (4, 5):
        raise ValueError("SE(2) image must be [H,W,N,C] or [B,H,W,N,C]")
    spatial = 1 if F.ndim == 5 else 0
    n_axis = spatial + 2
    N = F.shape[n_axis]
    if sampling is None:
        sampling = OrientationSampling(N)
    elif isinstance(sampling, int):
        sampling = OrientationSampling(sampling)
    if sampling.N != N:
        raise ValueError(f"orientation axis has length {N}, sampling has {sampling.N}")
    j = sampling.index_of(g.theta)
    shifted = np.roll(F, j, axis=n_axis)
    return _resample_spatial(shifted, g, spatial)
