"""The six-layer SE(2,N) chain: lift, three group convs, a 1x1 group conv
followed by max projection over orientations, and a 1x1 output conv.

Layers 1-5 are followed by batch norm (scale and shift per channel) and a
ReLU; optional 2x2 max pooling follows any of them. Layer 6 carries a bias.
With the default channel widths the weight counts per layer are::

    N    layer1  layer2  layer3  layer4  layer5  layer6   total
    1     1040    5408    5408   21632    1056      17   34561
    2      845    7124    7124   17536    1056      17   33702
    4      650    8420    8420   13472    1056      17   32035
    8      520   10768   10768   10768    1056      17   33897
   16      390   12108   12108    8072    1056      17   33751
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .kernels import build_disk_mask
from .layers import GroupKernelSet, LiftingKernelSet, group_correlate, lift_correlate, project_max_theta, se2_max_pool
from .tensorio import TensorFormatError, atomic_write_bytes, read_tensor, write_tensor

MODEL_MAGIC = b"SE2M"
MODEL_VERSION = 1

TABLE_CHANNELS: dict[int, tuple[int, ...]] = {
    1: (16, 16, 16, 64, 16, 1),
    2: (13, 13, 13, 32, 16, 1),
    4: (10, 10, 10, 16, 16, 1),
    8: (8, 8, 8, 8, 16, 1),
    16: (6, 6, 6, 4, 16, 1),
}
TABLE_TOTALS = {1: 34561, 2: 33702, 4: 32035, 8: 33897, 16: 33751}
DEFAULT_KERNEL_SIZES = (5, 5, 5, 5, 1, 1)
_TARGET_TOTAL = 33589  # mean of the tabulated totals


class ModelFormatError(ValueError):
    pass


def _layer_counts(N: int, c_in: int, channels, kernel_sizes) -> list[int]:
    counts = []
    prev = c_in
    for layer, (c, n) in enumerate(zip(channels, kernel_sizes), start=1):
        m = len(build_disk_mask(n))
        if layer == 1:
            counts.append(c * (m * prev + 2))
        elif layer <= 5:
            counts.append(c * (m * N * prev + 2))
        else:
            counts.append(c * (n * n * prev + 1))
        prev = c
    return counts


def default_channels(N: int, input_channels: int = 3) -> tuple[int, ...]:
    """Table widths for tabulated N; otherwise a weight-matched extrapolation.

    For other N, layer 4 keeps ``N_4 * N`` near 64 and layers 1-3 share the
    width whose total weight count is closest to the tabulated mean.
    """
    if N in TABLE_CHANNELS:
        return TABLE_CHANNELS[N]
    n4 = max(1, round(64 / N))
    best = min(range(1, 65), key=lambda c: abs(
        sum(_layer_counts(N, input_channels, (c, c, c, n4, 16, 1), DEFAULT_KERNEL_SIZES)) - _TARGET_TOTAL))
    return (best, best, best, n4, 16, 1)


@dataclass(frozen=True)
class NetworkConfig:
    N: int = 4
    input_channels: int = 3
    channels: tuple[int, ...] | None = None
    kernel_sizes: tuple[int, ...] = DEFAULT_KERNEL_SIZES
    pool_layers: tuple[int, ...] = ()
    precision: str = "float32"
    head: str = "patch"
    projection: str = "max"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N}")
        if self.channels is None:
            object.__setattr__(self, "channels", default_channels(self.N, self.input_channels))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(n) for n in self.kernel_sizes))
        object.__setattr__(self, "pool_layers", tuple(sorted(int(p) for p in self.pool_layers)))
        if len(self.channels) != 6 or any(c < 1 for c in self.channels):
            raise ValueError("channels must be six positive integers")
        if len(self.kernel_sizes) != 6 or any(n < 1 or n % 2 == 0 for n in self.kernel_sizes):
            raise ValueError("kernel sizes must be six odd positive integers")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if any(p < 1 or p > 5 for p in self.pool_layers):
            raise ValueError("pooling may follow layers 1-5 only")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.head not in ("patch", "pixel"):
            raise ValueError("head must be 'patch' or 'pixel'")
        if self.projection not in ("max", "mean"):
            raise ValueError("projection must be 'max' or 'mean'")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_text(self) -> str:
        d = asdict(self)
        lines = []
        for key in sorted(d):
            v = d[key]
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        fields = {f for f in cls.__dataclass_fields__}
        kw: dict = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in fields:
                raise ModelFormatError(f"bad config line {line!r}")
            value = value.strip()
            if key in ("channels", "kernel_sizes", "pool_layers"):
                kw[key] = tuple(int(x) for x in value.split(",") if x)
            elif key in ("N", "input_channels"):
                kw[key] = int(value)
            elif key in ("bn_eps", "bn_momentum"):
                kw[key] = float(value)
            else:
                kw[key] = value
        return cls(**kw)


@dataclass(eq=False)
class Model:
    config: NetworkConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def kernel_sets(self) -> list[LiftingKernelSet | GroupKernelSet]:
        cfg = self.config
        sets: list = [LiftingKernelSet(self.params["layer1.weight"], cfg.kernel_sizes[0], cfg.N)]
        for layer in range(2, 6):
            sets.append(GroupKernelSet(self.params[f"layer{layer}.weight"], cfg.kernel_sizes[layer - 1], cfg.N))
        return sets

    def __call__(self, x, mode: str = "train") -> Tensor:
        return forward(self, x, mode=mode)


def build_network(config: NetworkConfig) -> Model:
    """Allocate all parameters (zeros) for the chain described by ``config``."""
    cfg = config
    dt = cfg.dtype
    model = Model(cfg)
    prev = cfg.input_channels
    for layer in range(1, 6):
        c = cfg.channels[layer - 1]
        m = len(build_disk_mask(cfg.kernel_sizes[layer - 1]))
        shape = (c, prev, m) if layer == 1 else (c, prev, cfg.N, m)
        model.params[f"layer{layer}.weight"] = Tensor(np.zeros(shape, dtype=dt), requires_grad=True,
                                                      name=f"layer{layer}.weight")
        model.params[f"layer{layer}.bn.scale"] = Tensor(np.ones(c, dtype=dt), requires_grad=True,
                                                        name=f"layer{layer}.bn.scale")
        model.params[f"layer{layer}.bn.shift"] = Tensor(np.zeros(c, dtype=dt), requires_grad=True,
                                                        name=f"layer{layer}.bn.shift")
        model.buffers[f"layer{layer}.bn.running_mean"] = np.zeros(c, dtype=dt)
        model.buffers[f"layer{layer}.bn.running_var"] = np.ones(c, dtype=dt)
        prev = c
    n6 = cfg.kernel_sizes[5]
    model.params["layer6.weight"] = Tensor(np.zeros((n6, n6, prev, cfg.channels[5]), dtype=dt),
                                           requires_grad=True, name="layer6.weight")
    model.params["layer6.bias"] = Tensor(np.zeros(cfg.channels[5], dtype=dt), requires_grad=True,
                                         name="layer6.bias")
    return model


def fan_in(model: Model, name: str) -> int:
    w = model.params[name].shape
    if name == "layer6.weight":
        return w[0] * w[1] * w[2]
    return int(np.prod(w[1:]))


def init_weights(model: Model, seed: int) -> Model:
    """He-normal base weights (fan-in over mask, orientations, channels); BN at identity."""
    rng = np.random.default_rng(seed)
    dt = model.config.dtype
    for name, p in model.params.items():
        if name.endswith(".weight"):
            std = np.sqrt(2.0 / fan_in(model, name))
            p.data = (rng.standard_normal(p.shape) * std).astype(dt)
        elif name.endswith(".scale"):
            p.data = np.ones(p.shape, dtype=dt)
        else:
            p.data = np.zeros(p.shape, dtype=dt)
        p.grad = None
    for name, b in model.buffers.items():
        b[...] = 0 if name.endswith("running_mean") else 1
    return model


def count_weights(model: Model) -> dict:
    """Trainable scalar count per layer (``layer1`` .. ``layer6``) and ``total``."""
    counts = {f"layer{i}": 0 for i in range(1, 7)}
    for name, p in model.params.items():
        counts[name.split(".")[0]] += p.data.size
    counts["total"] = sum(counts.values())
    return counts


def forward(model: Model, x, mode: str = "train", bn_momentum: float | None = None) -> Tensor:
    """Logits for a batch ``[B, H, W, C_in]``.

    The patch head returns ``[B]`` (global spatial max of the output map);
    the pixel head returns ``[B, H', W']``. With more than one output
    channel the channel axis is kept. ``bn_momentum`` overrides the
    configured running-statistics momentum for this call only.
    """
    cfg = model.config
    momentum = cfg.bn_momentum if bn_momentum is None else bn_momentum
    x = ag.as_tensor(x, dtype=cfg.dtype) if not isinstance(x, Tensor) else x
    if x.ndim == 3:
        x = ag.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[-1] != cfg.input_channels:
        raise ValueError(f"expected input [B, H, W, {cfg.input_channels}], got {x.shape}")
    if x.dtype != cfg.dtype:
        x = Tensor(x.data.astype(cfg.dtype), requires_grad=x.requires_grad)
    h = x
    for layer, kernels in enumerate(model.kernel_sets(), start=1):
        if layer == 1:
            h = lift_correlate(h, kernels)
        else:
            h = group_correlate(h, kernels)
        h = ag.batch_norm(h, model.params[f"layer{layer}.bn.scale"], model.params[f"layer{layer}.bn.shift"],
                          eps=cfg.bn_eps, mode=mode,
                          running_mean=model.buffers[f"layer{layer}.bn.running_mean"],
                          running_var=model.buffers[f"layer{layer}.bn.running_var"],
                          momentum=momentum)
        h = ag.relu(h)
        if layer in cfg.pool_layers:
            h = se2_max_pool(h, 2)
    h = project_max_theta(h, mode=cfg.projection)
    h = ag.correlate2d(h, model.params["layer6.weight"], padding="same")
    h = ag.add_channel_bias(h, model.params["layer6.bias"])
    if cfg.head == "patch":
        h = ag.global_spatial_max(h)
    if cfg.channels[5] == 1:
        h = ag.reshape(h, h.shape[:-1])
    return h


# ---------------------------------------------------------------------------
# Serialization


def model_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<B", MODEL_VERSION))
    cfg = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    blocks = [(n, p.data) for n, p in model.params.items()] + list(model.buffers.items())
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    return buf.getvalue()


def save_model(model: Model, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, model_bytes(model))


def _read_exact(stream, size: int) -> bytes:
    raw = stream.read(size)
    if len(raw) != size:
        raise ModelFormatError("truncated model file")
    return raw


def model_from_bytes(payload: bytes) -> Model:
    stream = io.BytesIO(payload)
    magic = stream.read(4)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad model magic {magic!r}")
    version = struct.unpack("<B", _read_exact(stream, 1))[0]
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    (clen,) = struct.unpack("<I", _read_exact(stream, 4))
    cfg = NetworkConfig.from_text(_read_exact(stream, clen).decode("utf-8"))
    model = build_network(cfg)
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(stream, 4))
        name = _read_exact(stream, nlen).decode("utf-8")
        try:
            arr = read_tensor(stream)
        except TensorFormatError as exc:
            raise ModelFormatError(str(exc)) from exc
        if name in model.params:
            target = model.params[name].data
        elif name in model.buffers:
            target = model.buffers[name]
        else:
            raise ModelFormatError(f"unknown tensor {name!r}")
        if arr.shape != target.shape or arr.dtype != target.dtype:
            raise ModelFormatError(f"tensor {name!r} has shape {arr.shape}/{arr.dtype}, expected "
                                   f"{target.shape}/{target.dtype}")
        target[...] = arr
        seen.add(name)
    missing = (set(model.params) | set(model.buffers)) - seen
    if missing:
        raise ModelFormatError(f"model file lacks tensors {sorted(missing)}")
    if stream.read(1):
        raise ModelFormatError("trailing bytes after model")
    return model


def load_model(path: str | os.PathLike) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def with_config(model: Model, **changes) -> Model:
    """A model sharing no state with ``model`` but carrying its parameters under a modified config."""
    out = build_network(replace(model.config, **changes))
    for name, p in model.params.items():
        out.params[name].data[...] = p.data
    for name, b in model.buffers.items():
        out.buffers[name][...] = b
    return out
