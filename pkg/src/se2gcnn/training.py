"""Training loop, dihedral augmentation and task evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .datasets import LabeledPatchSet
from .metrics import confusion_counts, f1_score, rand_score_sweep, roc_auc
from .network import Model, forward
from .optim import SGDMomentum

logger = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "transpose", "rot90")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    iterations: int = 2000
    augmentation: str = "none"
    seed: int = 0
    log_every: int = 50
    recalibration_batches: int = 20

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 0 or self.log_every < 1:
            raise ValueError("lr, batch_size and log_every must be positive, iterations nonnegative")
        if self.recalibration_batches < 0:
            raise ValueError("recalibration_batches must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}")


# ---------------------------------------------------------------------------
# Augmentation. Batches are [B, H, W, ...]; spatial axes are 1 and 2.


def _require_square(batch: np.ndarray) -> None:
    if batch.shape[1] != batch.shape[2]:
        raise ValueError(f"augmentation needs square patches, got {batch.shape[1]}x{batch.shape[2]}")


def dihedral(batch: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Transpose (if ``flip``) then rotate counterclockwise by ``k`` quarter turns."""
    out = np.swapaxes(batch, 1, 2) if flip else batch
    return np.rot90(out, k, axes=(1, 2))


def augment_transpose(batch: np.ndarray) -> np.ndarray:
    """``[2, B, ...]``: the batch and its transpose."""
    batch = np.asarray(batch)
    _require_square(batch)
    return np.stack([batch, dihedral(batch, 0, True)])


def augment_rot90(batch: np.ndarray) -> np.ndarray:
    """``[8, B, ...]``: all four quarter turns, each with and without transpose."""
    batch = np.asarray(batch)
    _require_square(batch)
    return np.stack([dihedral(batch, k, f) for k in range(4) for f in (False, True)])


def _variants(mode: str) -> list[tuple[int, bool]]:
    if mode == "none":
        return [(0, False)]
    if mode == "transpose":
        return [(0, False), (0, True)]
    return [(k, f) for k in range(4) for f in (False, True)]


def random_augment(patches: np.ndarray, labels: np.ndarray, mode: str, rng: np.random.Generator):
    """Apply one randomly drawn variant of ``mode`` to every sample."""
    variants = _variants(mode)
    if len(variants) == 1:
        return patches, labels
    _require_square(patches)
    choice = rng.integers(0, len(variants), size=patches.shape[0])
    out_p = np.empty_like(patches)
    out_l = np.empty_like(labels)
    for v, (k, f) in enumerate(variants):
        sel = np.flatnonzero(choice == v)
        if sel.size == 0:
            continue
        out_p[sel] = dihedral(patches[sel], k, f)
        out_l[sel] = dihedral(labels[sel], k, f) if labels.ndim == 3 else labels[sel]
    return out_p, out_l


# ---------------------------------------------------------------------------
# Training


def _batch_indices(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if labels.ndim == 1:
        pos = np.flatnonzero(labels == 1)
        neg = np.flatnonzero(labels == 0)
        if pos.size and neg.size:
            half = batch_size // 2
            return np.concatenate([rng.choice(pos, half, replace=pos.size < half),
                                   rng.choice(neg, batch_size - half, replace=neg.size < batch_size - half)])
    return rng.choice(labels.shape[0], batch_size, replace=labels.shape[0] < batch_size)


def train(model: Model, data: LabeledPatchSet, settings: TrainSettings,
          log: Callable[[str], None] | None = None) -> tuple[Model, list[tuple[int, float]]]:
    """Minimize the logistic loss with SGD + momentum on class-balanced batches.

    Returns the model (updated in place) and ``(iteration, loss)`` pairs
    recorded every ``settings.log_every`` iterations and at the end.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    rng = np.random.default_rng(settings.seed)
    opt = SGDMomentum(model.parameters(), lr=settings.lr, momentum=settings.momentum)
    dt = model.config.dtype
    curve: list[tuple[int, float]] = []
    for it in range(1, settings.iterations + 1):
        idx = _batch_indices(data.labels, settings.batch_size, rng)
        x, y = random_augment(data.patches[idx], data.labels[idx], settings.augmentation, rng)
        opt.zero_grad()
        try:
            logits = forward(model, x.astype(dt, copy=False), mode="train")
            y = y if model.config.head == "pixel" else y.reshape(logits.shape)
            loss = ag.logistic_loss(logits, y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError("non-finite loss")
            ag.backward(loss)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"training diverged at iteration {it}: {exc}") from exc
        opt.step()
        if it % settings.log_every == 0 or it == settings.iterations:
            curve.append((it, value))
            line = f"iter={it} loss={value:.6f}"
            logger.info(line)
            if log is not None:
                log(line)
    if settings.iterations > 0:
        recalibrate_batch_norm(model, data, settings.recalibration_batches, settings.batch_size,
                               settings.augmentation, rng)
    return model, curve


def recalibrate_batch_norm(model: Model, data: LabeledPatchSet, batches: int, batch_size: int,
                           augmentation: str, rng: np.random.Generator) -> Model:
    """Replace the BN running statistics with plain averages over ``batches`` batches.

    The momentum averages seen during training lag behind the weights; at a
    high learning rate that lag can shift inference-mode logits enough to
    wreck the 0.5 decision threshold while leaving the ranking intact.
    Batches are drawn and augmented exactly as in training.
    """
    dt = model.config.dtype
    for k in range(batches):
        idx = _batch_indices(data.labels, batch_size, rng)
        x, _ = random_augment(data.patches[idx], data.labels[idx], augmentation, rng)
        # momentum k/(k+1) turns the running update into a cumulative mean
        forward(model, x.astype(dt, copy=False), mode="train", bn_momentum=k / (k + 1))
    return model


# ---------------------------------------------------------------------------
# Inference and evaluation


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def predict(model: Model, patches: np.ndarray, tta: str = "none", batch_size: int = 100) -> np.ndarray:
    """Class-1 probabilities, averaged over the test-time variants of ``tta``.

    Per-pixel maps are mapped back to the input frame before averaging.
    """
    variants = _variants(tta)
    dt = model.config.dtype
    outputs = []
    for start in range(0, patches.shape[0], batch_size):
        chunk = np.asarray(patches[start:start + batch_size])
        acc = None
        for k, f in variants:
            z = forward(model, dihedral(chunk, k, f).astype(dt, copy=False), mode="inference").data
            p = _sigmoid(z.astype(np.float64))
            if p.ndim == 3:
                # undo: rotate back, then transpose back
                p = np.rot90(p, -k, axes=(1, 2))
                if f:
                    p = np.swapaxes(p, 1, 2)
            acc = p if acc is None else acc + p
        outputs.append(acc / len(variants))
    return np.concatenate(outputs)


def evaluate(model: Model, data: LabeledPatchSet, tta: str = "none") -> dict[str, float]:
    """Accuracy/F1/AUC for patch labels; AUC and best-threshold Rand for pixel labels."""
    probs = predict(model, data.patches, tta=tta)
    labels = data.labels
    if labels.ndim == 1:
        tp, fp, fn, tn = confusion_counts(probs, labels)
        out = {"accuracy": (tp + tn) / labels.size, "f1": f1_score(tp, fp, fn)}
        out["auc"] = roc_auc(probs, labels) if 0 < labels.sum() < labels.size else float("nan")
        return out
    out = {"auc": roc_auc(probs.ravel(), labels.ravel())}
    rands = [rand_score_sweep(p, l)[0] for p, l in zip(probs, labels)]
    out["rand"] = float(np.mean(rands))
    tp, fp, fn, tn = confusion_counts(probs.ravel(), labels.ravel())
    out["f1"] = f1_score(tp, fp, fn)
    out["accuracy"] = (tp + tn) / labels.size
    return out
