"""Executable checks of layer covariance, chain invariance and gradients.

Every check returns an :class:`EquivarianceReport` (or a list of
:class:`GradientReport`) rather than asserting, so the same code backs the
test-suite, the acceptance run and ``se2gcnn verify``.

Errors are relative L2 norms over an interior crop: zero padding and
zero-filled resampling contaminate a band of ``margin`` pixels at the border.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import DiscreteGroupElement, GroupElement, OrientationSampling, apply_L, apply_U
from .kernels import build_disk_mask
from .layers import GroupKernelSet, LiftingKernelSet, group_correlate, lift_correlate, project_max_theta
from .network import Model, NetworkConfig, build_network, forward, init_weights

GRID_EXACT_TOL = 1e-5
INTERPOLATED_TOL = 5e-2
CHAIN_TOL = 1e-4
GRADIENT_TOL = 1e-6


@dataclass
class EquivarianceReport:
    name: str
    transform: DiscreteGroupElement
    margin: int
    abs_error: float
    rel_error: float
    exactness: str  # "grid-exact" or "interpolated"
    tolerance: float | None = None
    expect_fail: bool = False

    def __post_init__(self):
        if self.abs_error < 0 or self.rel_error < 0:
            raise ValueError("errors are nonnegative")

    @property
    def passed(self) -> bool:
        if self.tolerance is None:
            return True
        ok = self.rel_error <= self.tolerance
        return not ok if self.expect_fail else ok

    def key_values(self) -> str:
        g = self.transform
        return (f"check={self.name} N={g.sampling.N} theta_index={g.index} tx={g.x[0]:g} ty={g.x[1]:g} "
                f"margin={self.margin} abs_error={self.abs_error:.6e} rel_error={self.rel_error:.6e} "
                f"exactness={self.exactness} tolerance={self.tolerance if self.tolerance is not None else 'none'} "
                f"expect_fail={int(self.expect_fail)} passed={int(self.passed)}")


@dataclass
class GradientReport:
    name: str
    block: str
    max_rel_error: float
    checked: int
    skipped: int = 0
    tolerance: float = GRADIENT_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def key_values(self) -> str:
        return (f"check=gradient layer={self.name} block={self.block} checked={self.checked} "
                f"skipped={self.skipped} max_rel_error={self.max_rel_error:.3e} passed={int(self.passed)}")


def _exactness(g: GroupElement) -> str:
    quarter = g.theta / (math.pi / 2)
    on_grid = abs(quarter - round(quarter)) < 1e-12 and all(float(t).is_integer() for t in g.x)
    return "grid-exact" if on_grid else "interpolated"


def _interior_errors(a: np.ndarray, b: np.ndarray, margin: int) -> tuple[float, float]:
    """Relative L2 of ``a - b`` on spatial axes 1, 2 (batched layout), cropped by ``margin``."""
    h, w = a.shape[1:3]
    if 2 * margin >= min(h, w):
        raise ValueError(f"margin {margin} leaves no interior in a {h}x{w} image")
    sl = (slice(None), slice(margin, h - margin), slice(margin, w - margin))
    diff = float(np.linalg.norm((a[sl] - b[sl]).astype(np.float64)))
    ref = float(np.linalg.norm(b[sl].astype(np.float64)))
    return diff, diff / ref if ref > 0 else diff


def _as_discrete(g: GroupElement, N: int) -> DiscreteGroupElement:
    sampling = OrientationSampling(N)
    return DiscreteGroupElement(g.x, sampling.index_of(g.theta), sampling)


def _margin(radius: int, g: GroupElement) -> int:
    return radius + int(math.ceil(max(abs(g.x[0]), abs(g.x[1]))))


def smooth_image(shape, seed: int, sigma: float = 2.0, blobs: int = 6) -> np.ndarray:
    """Seeded mixture of isotropic Gaussians, ``[B, H, W, C]`` or ``[B, H, W, N, C]``.

    Each (batch, orientation, channel) slice gets its own random blob centres
    and signed amplitudes; the width ``sigma`` keeps bilinear resampling
    error second order.
    """
    rng = np.random.default_rng(seed)
    h, w = shape[1:3]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    lead = (shape[0],) + tuple(shape[3:])
    out = np.zeros(lead + (h, w))
    for idx in np.ndindex(*lead):
        for _ in range(blobs):
            cy, cx = rng.uniform(0.2, 0.8) * (h - 1), rng.uniform(0.2, 0.8) * (w - 1)
            out[idx] += rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return np.moveaxis(out, (-2, -1), (1, 2))


def smooth_kernel_base(shape_lead, n: int, seed: int, sigma: float = 1.0) -> np.ndarray:
    """Band-limited base weights: one random Gaussian bump per kernel, sampled on the disk mask."""
    rng = np.random.default_rng(seed)
    pos = np.array(build_disk_mask(n).positions, dtype=np.float64) - (n - 1) / 2
    out = np.empty(tuple(shape_lead) + (len(pos),))
    for idx in np.ndindex(*shape_lead):
        c = rng.uniform(-0.5, 0.5, size=2)
        out[idx] = rng.uniform(-1, 1) * np.exp(-((pos - c) ** 2).sum(1) / (2 * sigma ** 2))
    return out


def lifting_covariance_error(f, kernels: LiftingKernelSet, g: GroupElement,
                             margin: int | None = None) -> EquivarianceReport:
    """Interior error of ``lift(U_g f)`` against ``L_g lift(f)``."""
    dg = _as_discrete(g, kernels.N)
    f = np.asarray(f.data if isinstance(f, Tensor) else f)
    if f.ndim == 3:
        f = f[None]
    if margin is None:
        margin = _margin(kernels.n // 2, g)
    with_dtype = kernels.base.dtype
    lhs = lift_correlate(Tensor(apply_U(g, f).astype(with_dtype)), kernels).data
    rhs = apply_L(g, lift_correlate(Tensor(f.astype(with_dtype)), kernels).data)
    abs_err, rel_err = _interior_errors(lhs, rhs, margin)
    kind = _exactness(g)
    return EquivarianceReport("lifting", dg, margin, abs_err, rel_err, kind,
                              GRID_EXACT_TOL if kind == "grid-exact" else INTERPOLATED_TOL)


def gconv_covariance_error(F, kernels: GroupKernelSet, g: GroupElement,
                           margin: int | None = None) -> EquivarianceReport:
    """Interior error of ``gconv(L_g F)`` against ``L_g gconv(F)``."""
    dg = _as_discrete(g, kernels.N)
    F = np.asarray(F.data if isinstance(F, Tensor) else F)
    if F.ndim == 4:
        F = F[None]
    if margin is None:
        margin = _margin(kernels.n // 2, g)
    dt = kernels.base.dtype
    lhs = group_correlate(Tensor(apply_L(g, F).astype(dt)), kernels).data
    rhs = apply_L(g, group_correlate(Tensor(F.astype(dt)), kernels).data)
    abs_err, rel_err = _interior_errors(lhs, rhs, margin)
    kind = _exactness(g)
    return EquivarianceReport("group_conv", dg, margin, abs_err, rel_err, kind,
                              GRID_EXACT_TOL if kind == "grid-exact" else INTERPOLATED_TOL)


def projection_invariance_error(F, g: GroupElement, margin: int = 0) -> EquivarianceReport:
    """Error of ``project(L_g F)`` against ``U_g project(F)``; bit-exact for any shift."""
    F = np.asarray(F.data if isinstance(F, Tensor) else F)
    if F.ndim == 4:
        F = F[None]
    dg = _as_discrete(g, F.shape[3])
    lhs = project_max_theta(Tensor(apply_L(g, F))).data
    rhs = apply_U(g, project_max_theta(Tensor(F)).data)
    abs_err, rel_err = _interior_errors(lhs, rhs, margin)
    kind = _exactness(g)
    return EquivarianceReport("projection", dg, margin, abs_err, rel_err, kind,
                              GRID_EXACT_TOL if kind == "grid-exact" else INTERPOLATED_TOL)


def receptive_radius(config: NetworkConfig) -> int:
    """Pixels of border influenced by zero padding, in input resolution."""
    radius, stride = 0, 1
    for layer, n in enumerate(config.kernel_sizes, start=1):
        radius += (n // 2) * stride
        if layer in config.pool_layers:
            radius += stride
            stride *= 2
    return radius


def chain_invariance_check(model: Model, f, g: GroupElement, expect_invariant: bool | None = None,
                           margin: int | None = None) -> EquivarianceReport:
    """Compare the network response to ``U_g f`` with the transformed response to ``f``.

    The patch head compares scalar logits; the pixel head compares logit maps
    after applying ``U_g`` to the original map. BN runs on running statistics
    so both forward passes use the same affine maps. A scalar logit is only
    translation invariant when ``f`` is supported away from the border,
    since a shift of a finite image drops content at one edge.
    """
    cfg = model.config
    f = np.asarray(f.data if isinstance(f, Tensor) else f)
    if f.ndim == 3:
        f = f[None]
    scale = 2 ** len(cfg.pool_layers)
    if any(not float(t / scale).is_integer() for t in g.x):
        raise ValueError(f"translation {g.x} is not a multiple of the total pooling stride {scale}")
    # the input rotation need not lie in the model's own sampling (N=1 baselines)
    sampling = OrientationSampling(math.lcm(cfg.N, 4))
    dg = DiscreteGroupElement(g.x, sampling.index_of(g.theta), sampling)
    dt = cfg.dtype
    out = forward(model, Tensor(f.astype(dt)), mode="inference").data
    out_g = forward(model, Tensor(apply_U(g, f).astype(dt)), mode="inference").data
    if cfg.head == "patch":
        margin = 0
        abs_err = float(np.linalg.norm((out_g - out).astype(np.float64)))
        ref = float(np.linalg.norm(out.astype(np.float64)))
        rel_err = abs_err / ref if ref > 0 else abs_err
    else:
        if margin is None:
            margin = receptive_radius(cfg) + int(math.ceil(max(abs(g.x[0]), abs(g.x[1]))))
        # spatial transform acts on the pooled grid
        g_small = GroupElement((g.x[0] / scale, g.x[1] / scale), g.theta)
        if out.ndim == 3:  # single-channel map [B, H, W]; give apply_U a channel axis
            expected = apply_U(g_small, out[..., None])[..., 0]
        else:
            expected = apply_U(g_small, out)
        abs_err, rel_err = _interior_errors(out_g, expected, max(margin // scale, 0))
    kind = _exactness(g)
    if expect_invariant is None:
        expect_invariant = cfg.N % 4 == 0 if kind == "grid-exact" else cfg.N > 1
    if kind == "interpolated":
        tol = INTERPOLATED_TOL
    else:
        # pooling-free logit maps meet the layer tolerance; pooled scalar logits the looser chain one
        tol = GRID_EXACT_TOL if cfg.head == "pixel" and not cfg.pool_layers else CHAIN_TOL
    return EquivarianceReport(f"chain[N={cfg.N},{cfg.head}]", dg, margin, abs_err, rel_err, kind, tol,
                              expect_fail=not expect_invariant)


# ---------------------------------------------------------------------------
# Gradient audit


def _fd_check(loss_fn, params: dict[str, Tensor], coords_per_block: int | None, rng, eps=1e-5):
    """Compare backward() with central differences on every parameter block.

    A coordinate whose stencil changes any ReLU mask or max choice straddles a
    kink, where the difference quotient is meaningless; it is replaced by a
    freshly drawn coordinate and counted in ``skipped``.
    """
    for p in params.values():
        p.grad = None
    root = loss_fn()
    ag.backward(root)
    base_sig = ag.branch_signature(root)
    out = []
    for name, p in params.items():
        analytic = p.grad.ravel()
        flat = p.data.reshape(-1)
        want = flat.size if coords_per_block is None else min(coords_per_block, flat.size)
        order = np.arange(flat.size) if want == flat.size else rng.permutation(flat.size)
        a_sel, n_sel, skipped = [], [], 0
        for i in order:
            if len(a_sel) == want:
                break
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            if ag.branch_signature(up) != base_sig or ag.branch_signature(down) != base_sig:
                skipped += 1
                continue
            a_sel.append(analytic[i])
            n_sel.append((float(up.data) - float(down.data)) / (2 * eps))
        a = np.array(a_sel)
        n = np.array(n_sel)
        mag = np.maximum(np.abs(a), np.abs(n))
        keep = mag > 1e-8
        err = float(np.max(np.abs(a - n)[keep] / mag[keep])) if np.any(keep) else 0.0
        out.append((name, err, len(a_sel), skipped))
    return out


def gradient_audit(layer: str, seed: int = 0, N: int = 4, coords_per_block: int | None = None) -> list[GradientReport]:
    """Finite-difference audit of one layer type in float64.

    ``layer`` is one of :data:`AUDITED_LAYERS`. The chain is a network at the
    tabulated widths, so only a random subset of coordinates per block (12 by
    default) is differenced there; the single layers are checked in full.
    """
    rng = np.random.default_rng(seed)
    reports = []
    if layer == "lifting":
        k = LiftingKernelSet(Tensor(rng.uniform(-1, 1, (3, 2, 9)), requires_grad=True), 3, N)
        x = Tensor(rng.uniform(-1, 1, (2, 6, 6, 2)), requires_grad=True)
        w = rng.uniform(-1, 1, (2, 6, 6, N, 3))
        params = {"weight": k.base, "input": x}
        results = _fd_check(lambda: ag.dot(lift_correlate(x, k), w), params, coords_per_block, rng)
    elif layer == "group_conv":
        k = GroupKernelSet(Tensor(rng.uniform(-1, 1, (2, 2, N, 9)), requires_grad=True), 3, N)
        x = Tensor(rng.uniform(-1, 1, (2, 5, 5, N, 2)), requires_grad=True)
        w = rng.uniform(-1, 1, (2, 5, 5, N, 2))
        params = {"weight": k.base, "input": x}
        results = _fd_check(lambda: ag.dot(group_correlate(x, k), w), params, coords_per_block, rng)
    elif layer == "projection_loss":
        x = Tensor(rng.uniform(-1, 1, (3, 4, 4, N, 2)), requires_grad=True)
        wt = Tensor(rng.uniform(-1, 1, (1, 1, 2, 1)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 1), requires_grad=True)
        y = Tensor(np.array([0.0, 1.0, 1.0]))

        def loss():
            h = ag.correlate2d(project_max_theta(x), wt)
            h = ag.global_spatial_max(ag.add_channel_bias(h, b))
            return ag.logistic_loss(ag.reshape(h, (3,)), y)

        params = {"input": x, "layer6.weight": wt, "layer6.bias": b}
        results = _fd_check(loss, params, coords_per_block, rng)
    elif layer == "batch_norm":
        x = Tensor(rng.uniform(-1, 1, (2, 3, 3, N, 2)), requires_grad=True)
        s = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        t = Tensor(rng.uniform(-1, 1, 2), requires_grad=True)
        w = rng.uniform(-1, 1, x.shape)
        rm, rv = np.zeros(2), np.ones(2)
        results = _fd_check(lambda: ag.dot(ag.batch_norm(x, s, t, running_mean=rm.copy(), running_var=rv.copy()), w),
                            {"input": x, "scale": s, "shift": t}, coords_per_block, rng)
    elif layer == "chain":
        cfg = NetworkConfig(N=N, precision="float64", pool_layers=(1, 2))
        model = init_weights(build_network(cfg), seed)
        x = rng.uniform(0, 1, (4, 12, 12, cfg.input_channels))
        y = Tensor(np.array([0.0, 1.0, 0.0, 1.0]))
        model.params["layer6.bias"].data = np.array([0.1])

        def loss():
            # running statistics are not part of the loss; keep them fixed across evaluations
            buffers = {k: v.copy() for k, v in model.buffers.items()}
            out = ag.logistic_loss(forward(model, Tensor(x), mode="train"), y)
            for k, v in buffers.items():
                model.buffers[k][...] = v
            return out

        results = _fd_check(loss, dict(model.params), coords_per_block if coords_per_block else 12, rng)
    else:
        raise ValueError(f"unknown layer {layer!r}")
    for name, err, count, skipped in results:
        reports.append(GradientReport(layer, name, err, count, skipped))
    return reports


AUDITED_LAYERS = ("lifting", "group_conv", "batch_norm", "projection_loss", "chain")


# ---------------------------------------------------------------------------
# Suites


def _seeded_kernels(N: int, n: int, c_in: int, c_out: int, seed: int, dtype, group: bool, smooth: bool):
    lead = (c_out, c_in, N) if group else (c_out, c_in)
    if smooth:
        base = smooth_kernel_base(lead, n, seed)
    else:
        base = np.random.default_rng(seed).standard_normal(lead + (len(build_disk_mask(n)),))
    cls = GroupKernelSet if group else LiftingKernelSet
    return cls(Tensor(base.astype(dtype)), n, N)


def layer_suite(N: int, seed: int = 0, size: int = 21, dtype=np.float32) -> list[EquivarianceReport]:
    """Lifting, group conv and projection checks at every quarter turn in the sampled set.

    For N divisible by 8 the eighth-turn interpolated case is reported as well.
    """
    f = smooth_image((1, size, size, 2), seed)
    F = smooth_image((1, size, size, N, 2), seed + 1)
    lift_k = _seeded_kernels(N, 5, 2, 3, seed, dtype, group=False, smooth=True)
    group_k = _seeded_kernels(N, 5, 2, 3, seed + 1, dtype, group=True, smooth=True)
    angles = [k * 2 * math.pi / N for k in range(N) if (4 * k) % N == 0 and k > 0]
    transforms = [GroupElement((0, 0), t) for t in angles]
    if angles:
        transforms.append(GroupElement((2, -1), angles[0]))
    if N % 8 == 0:
        transforms.append(GroupElement((0, 0), math.pi / 4))
    transforms.append(GroupElement((1, 3), 0.0))
    reports = []
    for g in transforms:
        reports.append(lifting_covariance_error(f, lift_k, g))
        reports.append(gconv_covariance_error(F, group_k, g))
        reports.append(projection_invariance_error(F, g, margin=_margin(0, g)))
    return reports


def chain_suite(seed: int = 0, size: int = 24) -> list[EquivarianceReport]:
    """Pooling-free full chains (pixel head) and pooled patch-head chains under a quarter turn."""
    reports = []
    q = GroupElement((0, 0), math.pi / 2)
    f = smooth_image((1, size, size, 3), seed)
    for N, head, pools in [(4, "pixel", ()), (4, "patch", (1, 2, 3)), (1, "patch", (1, 2, 3)), (8, "pixel", ())]:
        cfg = NetworkConfig(N=N, head=head, pool_layers=pools)
        model = init_weights(build_network(cfg), seed)
        _randomize_bn(model, seed)
        reports.append(chain_invariance_check(model, f, q))
    return reports


def between_samples_residual(N: int, seed: int = 0, size: int = 25) -> EquivarianceReport:
    """Projected lifting output under a rotation halfway between two sampled angles.

    ``project(lift(U_g f))`` is compared with ``U_g project(lift(f))`` for
    theta = pi/N, an angle the network never samples. This residual shrinks
    as N grows but has no contract, so the report carries no tolerance.
    """
    f = smooth_image((1, size, size, 2), seed)
    kernels = _seeded_kernels(N, 5, 2, 3, seed, np.float64, group=False, smooth=True)
    g = GroupElement((0, 0), math.pi / N)
    a = project_max_theta(lift_correlate(Tensor(apply_U(g, f)), kernels)).data
    b = apply_U(g, project_max_theta(lift_correlate(Tensor(f), kernels)).data)
    margin = _margin(2, g) + 1
    abs_err, rel_err = _interior_errors(a, b, margin)
    return EquivarianceReport(f"between_samples[N={N}]", _as_discrete(g, 2 * N), margin, abs_err, rel_err,
                              _exactness(g))


def _randomize_bn(model: Model, seed: int) -> None:
    """Give the BN layers nontrivial affine maps so inference mode is not near-identity."""
    rng = np.random.default_rng(seed + 7)
    for name, buf in model.buffers.items():
        if name.endswith("running_mean"):
            buf[...] = rng.normal(0, 0.1, buf.shape)
        else:
            buf[...] = rng.uniform(0.5, 2.0, buf.shape)
    model.params["layer6.bias"].data[...] = 0.1


def format_reports(reports) -> str:
    return "\n".join(r.key_values() for r in reports)
