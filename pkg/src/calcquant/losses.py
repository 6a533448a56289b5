"""Segmentation training objectives restricted to candidate voxels.

Four scalar losses over a predicted probability patch, a binary target
patch, and a candidate mask (attenuation above the calcification
threshold): plain cross-entropy, scan-wise soft Dice, focal loss, and
lesion-size-weighted cross-entropy. Every sum runs over candidate
voxels only, predictions are clamped to [1e-7, 1 - 1e-7], and each loss
returns its value together with the analytic gradient with respect to
the prediction (zero outside the candidate mask).

`toy_fit` drives a per-voxel logistic model by gradient descent under
any of the four losses, demonstrating that each one trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lesions import LesionLabels, label_lesions
from .volgrid import Grid3, Mask, ProbMap

EPS = 1e-7

LOSS_NAMES = ("cross_entropy", "soft_dice", "focal", "weighted_cross_entropy")


@dataclass(frozen=True)
class LossInput:
    """Aligned prediction / target / candidate patches."""

    pred: ProbMap
    target: Mask
    candidates: Mask

    def __post_init__(self):
        if not (self.pred.grid == self.target.grid == self.candidates.grid):
            raise ValueError("pred, target, and candidates must share one grid")
        if not self.candidates.data.any():
            raise ValueError("candidate mask is empty")


@dataclass(frozen=True)
class LossValueGrad:
    """A loss value with d(value)/d(pred) per voxel (zero off-candidates)."""

    value: float
    grad: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("loss value is not finite")


def _prepare(x: LossInput):
    """Candidate selector, clamped predictions, targets, and clamp mask."""
    cand = x.candidates.bool_data
    raw = x.pred.data[cand]
    p = np.clip(raw, EPS, 1.0 - EPS)
    t = x.target.data[cand].astype(np.float64)
    active = (raw > EPS) & (raw < 1.0 - EPS)
    return cand, p, t, active


def _scatter(grid_shape, cand, grad_cand) -> np.ndarray:
    grad = np.zeros(grid_shape, dtype=np.float64)
    grad[cand] = grad_cand
    return grad


def cross_entropy(x: LossInput) -> LossValueGrad:
    """Mean binary cross-entropy over candidate voxels."""
    cand, p, t, active = _prepare(x)
    n = p.size
    value = -np.sum(t * np.log(p) + (1.0 - t) * np.log1p(-p)) / n
    grad_cand = -(t / p - (1.0 - t) / (1.0 - p)) / n
    return LossValueGrad(float(value), _scatter(x.pred.data.shape, cand, grad_cand * active))


def soft_dice(x: LossInput, epsilon: float = 1.0) -> LossValueGrad:
    """Soft Dice loss 1 - (2 Σpt + ε)/(Σp + Σt + ε) over candidate voxels."""
    cand, p, t, active = _prepare(x)
    numer = 2.0 * np.sum(p * t) + epsilon
    denom = np.sum(p) + np.sum(t) + epsilon
    value = 1.0 - numer / denom
    grad_cand = -(2.0 * t * denom - numer) / (denom * denom)
    return LossValueGrad(float(value), _scatter(x.pred.data.shape, cand, grad_cand * active))


def focal(x: LossInput, gamma: float = 2.0) -> LossValueGrad:
    """Focal loss: cross-entropy with confident voxels down-weighted by
    (1-p)^gamma (positives) or p^gamma (negatives). gamma=0 reduces to
    plain cross-entropy."""
    cand, p, t, active = _prepare(x)
    n = p.size
    log_p = np.log(p)
    log_q = np.log1p(-p)
    q = 1.0 - p
    value = -np.sum(t * q**gamma * log_p + (1.0 - t) * p**gamma * log_q) / n
    grad_pos = gamma * q ** (gamma - 1.0) * log_p - q**gamma / p
    grad_neg = -gamma * p ** (gamma - 1.0) * log_q + p**gamma / q
    if gamma == 0.0:
        # x**(-1) is finite here, but 0 * anything must be exactly 0
        grad_pos = -q**gamma / p
        grad_neg = p**gamma / q
    grad_cand = (t * grad_pos + (1.0 - t) * grad_neg) / n
    return LossValueGrad(float(value), _scatter(x.pred.data.shape, cand, grad_cand * active))


def lesion_size_weights(target: Mask, connectivity: int = 26) -> np.ndarray:
    """Per-voxel weights from the size of the target lesion a voxel is in.

    Lesions of s ≤ 10 voxels weigh 10; 10 < s < 100 weighs 10 - (s-10)/10
    (linear from 10 down to 1); s ≥ 100 weighs 1. Voxels outside every
    lesion weigh 1.
    """
    labeled = label_lesions(target, connectivity)
    weights = np.ones(target.data.shape, dtype=np.float64)
    if labeled.count == 0:
        return weights
    sizes = np.bincount(labeled.labels.ravel(), minlength=labeled.count + 1)
    per_label = np.ones(labeled.count + 1, dtype=np.float64)
    for lesion_id in range(1, labeled.count + 1):
        s = sizes[lesion_id]
        if s <= 10:
            per_label[lesion_id] = 10.0
        elif s < 100:
            per_label[lesion_id] = 10.0 - (s - 10) / 10.0
        else:
            per_label[lesion_id] = 1.0
    inside = labeled.labels > 0
    weights[inside] = per_label[labeled.labels[inside]]
    return weights


def weighted_cross_entropy(
    x: LossInput, ref_components: LesionLabels | None = None
) -> LossValueGrad:
    """Cross-entropy with voxels of small target lesions up-weighted.

    `ref_components` is an optional precomputed labeling of the target
    mask (26-connectivity is used when omitted). The value is normalized
    by the total candidate weight, so all-ones weights reduce to plain
    cross-entropy.
    """
    cand, p, t, active = _prepare(x)
    if ref_components is None:
        weights = lesion_size_weights(x.target)
    else:
        if ref_components.grid != x.target.grid:
            raise ValueError("ref_components labeling is on a different grid")
        sizes = np.bincount(
            ref_components.labels.ravel(), minlength=ref_components.count + 1
        )
        per_label = np.ones(ref_components.count + 1, dtype=np.float64)
        for lesion_id in range(1, ref_components.count + 1):
            s = sizes[lesion_id]
            per_label[lesion_id] = (
                10.0 if s <= 10 else (10.0 - (s - 10) / 10.0 if s < 100 else 1.0)
            )
        weights = np.ones(x.target.data.shape, dtype=np.float64)
        inside = ref_components.labels > 0
        weights[inside] = per_label[ref_components.labels[inside]]
    w = weights[cand]
    wsum = np.sum(w)
    value = -np.sum(w * (t * np.log(p) + (1.0 - t) * np.log1p(-p))) / wsum
    grad_cand = -w * (t / p - (1.0 - t) / (1.0 - p)) / wsum
    return LossValueGrad(float(value), _scatter(x.pred.data.shape, cand, grad_cand * active))


def get_loss(name: str):
    """Loss function by name; each maps LossInput -> LossValueGrad."""
    table = {
        "cross_entropy": cross_entropy,
        "soft_dice": soft_dice,
        "focal": focal,
        "weighted_cross_entropy": weighted_cross_entropy,
    }
    if name not in table:
        raise ValueError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
    return table[name]


@dataclass(frozen=True)
class ToyPatch:
    """One synthetic training patch for the logistic demonstrator."""

    features: np.ndarray
    target: np.ndarray
    candidates: np.ndarray


@dataclass(frozen=True)
class ToyFitResult:
    trace: np.ndarray  # loss before each step, plus the final loss
    weight: float
    bias: float
    accuracy: float  # fraction of candidate voxels classified correctly at 0.5


def make_separable_patches(
    rng: np.random.Generator, count: int = 4, shape=(8, 8, 1)
) -> list[ToyPatch]:
    """Patches whose targets are exactly thresholded features (separable)."""
    patches = []
    for _ in range(count):
        features = rng.normal(size=shape)
        target = (features > 0.3).astype(np.uint8)
        candidates = np.ones(shape, dtype=np.uint8)
        patches.append(ToyPatch(features, target, candidates))
    return patches


def toy_fit(
    patches,
    loss: str = "cross_entropy",
    steps: int = 500,
    learning_rate: float = 0.1,
    gamma: float = 2.0,
) -> ToyFitResult:
    """Fit p = sigmoid(w·feature + b) by gradient descent on one loss.

    Returns the per-step loss trace (length steps + 1: the loss before
    every update and after the last). Raises on divergence.
    """
    patches = list(patches)
    if not patches:
        raise ValueError("need at least one patch")
    loss_fn = get_loss(loss)
    weight, bias = 0.0, 0.0
    trace = []

    def evaluate(wv, bv):
        total, gw, gb, correct, n_cand = 0.0, 0.0, 0.0, 0, 0
        for patch in patches:
            grid = Grid3(patch.features.shape, (1.0, 1.0, 1.0))
            z = wv * patch.features + bv
            p = 1.0 / (1.0 + np.exp(-z))
            x = LossInput(
                ProbMap(grid, p),
                Mask(grid, patch.target),
                Mask(grid, patch.candidates),
            )
            out = loss_fn(x, gamma) if loss == "focal" else loss_fn(x)
            total += out.value
            dp = out.grad * p * (1.0 - p)
            gw += float(np.sum(dp * patch.features))
            gb += float(np.sum(dp))
            cand = patch.candidates.astype(bool)
            correct += int(np.sum((p[cand] > 0.5) == (patch.target[cand] > 0)))
            n_cand += int(cand.sum())
        k = len(patches)
        return total / k, gw / k, gb / k, correct / n_cand

    for _ in range(steps):
        value, gw, gb, _ = evaluate(weight, bias)
        if not np.isfinite(value):
            raise FloatingPointError("loss diverged during toy fit")
        trace.append(value)
        weight -= learning_rate * gw
        bias -= learning_rate * gb
    value, _, _, accuracy = evaluate(weight, bias)
    trace.append(value)
    return ToyFitResult(np.array(trace), weight, bias, accuracy)


def write_trace_csv(result: ToyFitResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(result.trace):
            fh.write(f"{i},{v!r}\n")
