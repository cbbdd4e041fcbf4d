import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_correlate(f, k, pad):
    """Direct summation of out[x] = sum_c sum_z k[z, c, o] f[x + z - pad, c] (zero outside)."""
    h, w, c = f.shape
    n = k.shape[0]
    ho, wo = h + 2 * pad - n + 1, w + 2 * pad - n + 1
    out = np.zeros((ho, wo, k.shape[3]))
    for r in range(ho):
        for s in range(wo):
            for a in range(n):
                for b in range(n):
                    rr, ss = r + a - pad, s + b - pad
                    if 0 <= rr < h and 0 <= ss < w:
                        out[r, s] += f[rr, ss] @ k[a, b]
    return out


def _rotated_dense(base_vec, n, N, i):
    """Kernel ``base_vec`` (masked weights) rotated by theta_i, as a dense [n, n] array."""
    from se2gcnn.kernels import build_disk_mask, build_rotation_operator, masked_to_dense

    op = build_rotation_operator(n, N)
    return masked_to_dense(op.block(i) @ base_vec, build_disk_mask(n))


def brute_lift(f, base, n, N):
    """out[x, i, o] = sum_c sum_z rot_i(k[o, c])(z) f(x + z, c), zero padded."""
    h, w, c_in = f.shape
    c_out = base.shape[0]
    r = n // 2
    out = np.zeros((h, w, N, c_out))
    for i in range(N):
        for o in range(c_out):
            for c in range(c_in):
                k = _rotated_dense(base[o, c], n, N, i)
                for y in range(h):
                    for x in range(w):
                        for a in range(n):
                            for b in range(n):
                                yy, xx = y + a - r, x + b - r
                                if 0 <= yy < h and 0 <= xx < w:
                                    out[y, x, i, o] += k[a, b] * f[yy, xx, c]
    return out


def brute_group(F, base, n, N):
    """out[x, i, o] = sum_m sum_c sum_z rot_i(k[o, c, m - i])(z) F(x + z, m, c)."""
    h, w, _, c_in = F.shape
    c_out = base.shape[0]
    r = n // 2
    out = np.zeros((h, w, N, c_out))
    for i in range(N):
        for m in range(N):
            for o in range(c_out):
                for c in range(c_in):
                    k = _rotated_dense(base[o, c, (m - i) % N], n, N, i)
                    for y in range(h):
                        for x in range(w):
                            for a in range(n):
                                for b in range(n):
                                    yy, xx = y + a - r, x + b - r
                                    if 0 <= yy < h and 0 <= xx < w:
                                        out[y, x, i, o] += k[a, b] * F[yy, xx, m, c]
    return out


def max_relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    mag = np.maximum(np.abs(a), np.abs(n))
    sel = mag > floor
    if not np.any(sel):
        return 0.0
    return float(np.max(np.abs(a - n)[sel] / mag[sel]))


def plain_cnn_forward(model, x):
    """An ordinary 2D CNN built from an N=1 model's weights with scipy, no autograd.

    Mirrors the chain layer by layer: dense masked kernels, zero-padded
    correlation, batch-statistics normalization, ReLU, 2x2 max pooling,
    1x1 output conv with bias and a global spatial max for the patch head.
    """
    from scipy.signal import correlate2d

    from se2gcnn.kernels import build_disk_mask, masked_to_dense

    cfg = model.config
    assert cfg.N == 1
    h = np.asarray(x, dtype=np.float64)
    for layer in range(1, 6):
        n = cfg.kernel_sizes[layer - 1]
        mask = build_disk_mask(n)
        w = model.params[f"layer{layer}.weight"].data.astype(np.float64)
        if w.ndim == 4:
            w = w[:, :, 0]
        c_out, c_in, _ = w.shape
        out = np.zeros(h.shape[:3] + (c_out,))
        for b in range(h.shape[0]):
            for o in range(c_out):
                for c in range(c_in):
                    out[b, :, :, o] += correlate2d(h[b, :, :, c], masked_to_dense(w[o, c], mask), mode="same")
        mean = out.mean(axis=(0, 1, 2))
        var = out.var(axis=(0, 1, 2))
        scale = model.params[f"layer{layer}.bn.scale"].data
        shift = model.params[f"layer{layer}.bn.shift"].data
        h = np.maximum((out - mean) / np.sqrt(var + cfg.bn_eps) * scale + shift, 0.0)
        if layer in cfg.pool_layers:
            bsz, hh, ww, c = h.shape
            h = h.reshape(bsz, hh // 2, 2, ww // 2, 2, c).max(axis=(2, 4))
    w6 = model.params["layer6.weight"].data.astype(np.float64)[0, 0]
    logits = h @ w6 + model.params["layer6.bias"].data
    if cfg.head == "patch":
        logits = logits.max(axis=(1, 2))
    return logits[..., 0] if logits.shape[-1] == 1 else logits
