"""Seeded synthetic tasks and their on-disk form.

``synth_rotated_patterns`` is a patch classification task: class 1 patches
hold an L-shaped glyph (two strokes meeting at a right angle), class 0
patches hold distractors built from the same strokes (other joint angles,
a straight bar, a T junction). Everything is drawn at a uniformly random
orientation on smooth colored noise.

``synth_curve_segmentation`` draws smooth random curves with per-pixel
ground truth, standing in for vessel and membrane segmentation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensorio import load_tensor, save_tensor

PATCH_SIZE = 32


@dataclass
class LabeledPatchSet:
    patches: np.ndarray  # [count, H, W, C] float32
    labels: np.ndarray  # [count] or [count, H, W], values in {0, 1}
    seed: int
    generator: str = "custom"
    orientations: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.patches.shape[0]

    @property
    def per_pixel(self) -> bool:
        return self.labels.ndim == 3

    def subset(self, index) -> "LabeledPatchSet":
        ori = None if self.orientations is None else self.orientations[index]
        return LabeledPatchSet(self.patches[index], self.labels[index], self.seed, self.generator, ori)


def _segment_distance(xx, yy, p0, p1):
    d = p1 - p0
    L2 = float(d @ d)
    t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / L2, 0.0, 1.0)
    return np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))


def _stroke_image(segments, size: int, width: float) -> np.ndarray:
    """Anti-aliased union of line segments given in pixel (x, y) coordinates."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.full((size, size), np.inf)
    for p0, p1 in segments:
        dist = np.minimum(dist, _segment_distance(xx, yy, np.asarray(p0, float), np.asarray(p1, float)))
    return np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)


def _background(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    noise = rng.standard_normal((size, size, channels))
    smooth = np.stack([gaussian_filter(noise[..., c], 1.5, mode="wrap") for c in range(channels)], axis=-1)
    smooth /= smooth.std() + 1e-12
    fine = rng.standard_normal((size, size, channels))
    base = rng.uniform(0.3, 0.5, size=channels)
    return base + 0.08 * smooth + 0.03 * fine


def _glyph_segments(kind: str, corner, heading: float, arm1: float, arm2: float, angle: float):
    """Two strokes from ``corner``: one along ``heading``, one at ``heading + angle``."""
    c = np.asarray(corner, float)
    u = np.array([np.cos(heading), np.sin(heading)])
    v = np.array([np.cos(heading + angle), np.sin(heading + angle)])
    if kind == "tee":
        return [(c - u * arm1 / 2, c + u * arm1 / 2), (c, c + v * arm2)]
    return [(c, c + u * arm1), (c, c + v * arm2)]


DISTRACTOR_ANGLES = (np.pi / 4, 3 * np.pi / 4, np.pi)


def synth_rotated_patterns(count: int, seed: int, size: int = PATCH_SIZE, channels: int = 3) -> LabeledPatchSet:
    """Balanced L-glyph vs distractor patches at uniformly random orientations."""
    rng = np.random.default_rng(seed)
    labels = np.zeros(count, dtype=np.float32)
    labels[: count // 2] = 1
    labels = labels[rng.permutation(count)]
    patches = np.empty((count, size, size, channels), dtype=np.float32)
    orientations = rng.uniform(0, 2 * np.pi, size=count)
    for i in range(count):
        arm1, arm2 = rng.uniform(7.0, 10.0, size=2)
        if labels[i] == 1:
            kind, angle = "corner", np.pi / 2
        else:
            choice = rng.integers(0, len(DISTRACTOR_ANGLES) + 1)
            if choice == len(DISTRACTOR_ANGLES):
                kind, angle = "tee", np.pi / 2
            else:
                kind, angle = "corner", DISTRACTOR_ANGLES[choice]
        # place the glyph's bounding circle fully inside the patch
        reach = max(arm1, arm2)
        margin = reach + 2
        corner = rng.uniform(margin, size - 1 - margin, size=2) if size - 1 - 2 * margin > 0 \
            else np.full(2, (size - 1) / 2)
        # plane heading (y up) converted to pixel coords (rows down) by negating y
        heading = orientations[i]
        segs = _glyph_segments(kind, corner, -heading, arm1, arm2, -angle)
        ink = _stroke_image(segs, size, width=rng.uniform(2.0, 3.0))
        color = rng.uniform(0.4, 0.6, size=channels)
        img = _background(rng, size, channels) + ink[..., None] * color
        patches[i] = img.astype(np.float32)
    return LabeledPatchSet(patches, labels, seed, "rotated_patterns", orientations)


def _bezier(p, t):
    return ((1 - t) ** 3)[:, None] * p[0] + (3 * (1 - t) ** 2 * t)[:, None] * p[1] \
        + (3 * (1 - t) * t ** 2)[:, None] * p[2] + (t ** 3)[:, None] * p[3]


def synth_curve_segmentation(count: int, seed: int, size: int = PATCH_SIZE, channels: int = 3,
                             band: tuple[float, float] = (0.08, 0.30)) -> LabeledPatchSet:
    """Patches crossed by smooth random curves, with per-pixel curve masks.

    The curve-pixel fraction of every patch lies inside ``band``.
    """
    rng = np.random.default_rng(seed)
    patches = np.empty((count, size, size, channels), dtype=np.float32)
    labels = np.empty((count, size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.linspace(0, 1, 4 * size)
    for i in range(count):
        while True:
            n_curves = rng.integers(1, 4)
            dist = np.full((size, size), np.inf)
            for _ in range(n_curves):
                # endpoints on opposite-ish sides, control points inside
                a = rng.uniform(0, 2 * np.pi)
                mid = rng.uniform(size * 0.3, size * 0.7, size=2)
                span = size * 0.75
                p0 = mid + span * np.array([np.cos(a), np.sin(a)])
                p3 = mid - span * np.array([np.cos(a), np.sin(a)])
                p1 = mid + rng.normal(0, size * 0.25, size=2)
                p2 = mid + rng.normal(0, size * 0.25, size=2)
                pts = _bezier(np.array([p0, p1, p2, p3]), t)
                for q0, q1 in zip(pts[:-1], pts[1:]):
                    dist = np.minimum(dist, _segment_distance(xx, yy, q0, q1))
            width = rng.uniform(1.5, 3.0)
            mask = dist <= width / 2
            frac = mask.mean()
            if band[0] <= frac <= band[1]:
                break
        ink = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
        color = rng.uniform(0.3, 0.5, size=channels) * rng.choice([-1.0, 1.0])
        img = _background(rng, size, channels) + ink[..., None] * color
        patches[i] = img.astype(np.float32)
        labels[i] = mask
    return LabeledPatchSet(patches, labels, seed, "curve_segmentation")


GENERATORS = {
    "rotated_patterns": synth_rotated_patterns,
    "curve_segmentation": synth_curve_segmentation,
}


def save_dataset(data: LabeledPatchSet, directory: str | os.PathLike) -> None:
    """Write ``patches.se2t``, ``labels.se2t`` and ``manifest.txt`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "patches.se2t", np.asarray(data.patches, dtype=np.float32))
    save_tensor(d / "labels.se2t", np.asarray(data.labels, dtype=np.float32))
    manifest = (f"count={len(data)}\nshape={','.join(str(s) for s in data.patches.shape[1:])}\n"
                f"seed={data.seed}\ngenerator={data.generator}\n")
    tmp = d / "manifest.txt.tmp"
    tmp.write_text(manifest)
    os.replace(tmp, d / "manifest.txt")


def read_manifest(directory: str | os.PathLike) -> dict[str, str]:
    out = {}
    for line in (Path(directory) / "manifest.txt").read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_dataset(directory: str | os.PathLike) -> LabeledPatchSet:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    meta = read_manifest(d)
    patches = load_tensor(d / "patches.se2t")
    labels = load_tensor(d / "labels.se2t")
    if patches.shape[0] != int(meta["count"]) or labels.shape[0] != patches.shape[0]:
        raise ValueError("dataset manifest does not match tensor files")
    return LabeledPatchSet(patches, labels, int(meta["seed"]), meta.get("generator", "custom"))


def write_netpbm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write ``[H, W]``/``[H, W, 1]`` as PGM or ``[H, W, 3]`` as PPM, clipped to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    raw = (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)
    kind = b"P5" if raw.ndim == 2 else b"P6"
    header = kind + f"\n{raw.shape[1]} {raw.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + raw.tobytes())
