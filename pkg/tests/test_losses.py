"""Loss value/gradient tests against closed forms and finite differences."""

import numpy as np
import pytest

from calcquant.lesions import label_lesions
from calcquant.losses import (
    LossInput,
    cross_entropy,
    focal,
    get_loss,
    lesion_size_weights,
    make_separable_patches,
    soft_dice,
    toy_fit,
    weighted_cross_entropy,
)
from calcquant.volgrid import Grid3, Mask, ProbMap


def make_input(pred, target, candidates=None):
    pred = np.asarray(pred, dtype=float)
    grid = Grid3(pred.shape, (1.0, 1.0, 1.0))
    if candidates is None:
        candidates = np.ones(pred.shape, dtype=np.uint8)
    return LossInput(
        ProbMap(grid, pred),
        Mask(grid, np.asarray(target)),
        Mask(grid, np.asarray(candidates)),
    )


def random_input(rng, shape=(8, 8, 1), cand_fraction=0.8):
    pred = rng.uniform(0.01, 0.99, size=shape)
    target = (rng.uniform(size=shape) > 0.6).astype(np.uint8)
    candidates = (rng.uniform(size=shape) < cand_fraction).astype(np.uint8)
    if not candidates.any():
        candidates.flat[0] = 1
    return make_input(pred, target, candidates)


def finite_difference_grad(loss_fn, x, h=1e-5):
    """Central-difference gradient of loss_fn w.r.t. every pred voxel."""
    base = x.pred.data
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = base.copy()
        minus = base.copy()
        plus[idx] += h
        minus[idx] -= h
        lp = loss_fn(make_like(x, plus)).value
        lm = loss_fn(make_like(x, minus)).value
        grad[idx] = (lp - lm) / (2 * h)
    return grad


def make_like(x, pred):
    return LossInput(
        ProbMap(x.pred.grid, pred), x.target, x.candidates
    )


def check_grad(loss_fn, x, tol=1e-5):
    out = loss_fn(x)
    fd = finite_difference_grad(loss_fn, x)
    scale = np.maximum(np.abs(fd), np.maximum(np.abs(out.grad), 1e-8))
    rel = np.abs(out.grad - fd) / scale
    assert rel.max() < tol, f"max relative gradient error {rel.max():.2e}"


class TestCrossEntropy:
    def test_perfect_prediction_near_zero(self):
        target = np.array([[[1, 0], [0, 1]]], dtype=np.uint8).reshape(2, 2, 1)
        x = make_input(target.astype(float), target)
        assert cross_entropy(x).value < 1e-6

    def test_single_voxel_half(self):
        x = make_input([[[0.5]]], [[[1]]])
        assert cross_entropy(x).value == pytest.approx(np.log(2), rel=1e-12)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(21)
        for _ in range(5):
            check_grad(cross_entropy, random_input(rng, shape=(5, 4, 1)))

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            make_input([[[0.5]]], [[[1]]], [[[0]]])


class TestSoftDice:
    def test_exact_match_zero(self):
        target = np.zeros((4, 4, 1), np.uint8)
        target[1:3, 1:3, 0] = 1
        x = make_input(target.astype(float), target)
        assert soft_dice(x).value == pytest.approx(0.0, abs=1e-6)

    def test_all_zero_prediction(self):
        target = np.zeros((10, 10, 1), np.uint8)
        target.flat[:100] = 1
        x = make_input(np.zeros((10, 10, 1)), target)
        assert soft_dice(x).value == pytest.approx(1 - 1 / 101, abs=1e-4)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(22)
        for _ in range(5):
            check_grad(soft_dice, random_input(rng, shape=(5, 4, 1)))


class TestFocal:
    def test_gamma_zero_is_cross_entropy(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            x = random_input(rng)
            ce = cross_entropy(x)
            fo = focal(x, gamma=0.0)
            assert abs(fo.value - ce.value) < 1e-12
            np.testing.assert_allclose(fo.grad, ce.grad, atol=1e-12)

    def test_single_voxel_arithmetic(self):
        x = make_input([[[0.5]]], [[[1]]])
        assert focal(x, gamma=2.0).value == pytest.approx(0.25 * np.log(2), rel=1e-12)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(24)
        for _ in range(5):
            check_grad(lambda x: focal(x, 2.0), random_input(rng, shape=(5, 4, 1)))


class TestWeightedCrossEntropy:
    def test_weight_endpoints(self):
        # one lesion of exactly 10 voxels, one of exactly 100
        target = np.zeros((30, 10, 1), np.uint8)
        target[0:10, 0, 0] = 1
        target[15:25, 0:10, 0] = 1
        grid = Grid3(target.shape, (1, 1, 1))
        weights = lesion_size_weights(Mask(grid, target))
        assert weights[0, 0, 0] == 10.0
        assert weights[20, 5, 0] == 1.0
        assert weights[12, 5, 0] == 1.0  # background

    def test_weight_midpoint(self):
        target = np.zeros((55, 1, 1), np.uint8)
        target[:, 0, 0] = 1  # single 55-voxel lesion
        grid = Grid3(target.shape, (1, 1, 1))
        weights = lesion_size_weights(Mask(grid, target))
        assert weights[0, 0, 0] == pytest.approx(5.5)

    def test_small_lesion_clamped(self):
        target = np.zeros((3, 3, 1), np.uint8)
        target[1, 1, 0] = 1
        weights = lesion_size_weights(Mask(Grid3((3, 3, 1), (1, 1, 1)), target))
        assert weights[1, 1, 0] == 10.0

    def test_all_ones_weights_reduce_to_ce(self):
        rng = np.random.default_rng(25)
        x = random_input(rng)
        empty = Mask(x.target.grid, np.zeros(x.target.data.shape, np.uint8))
        labeled = label_lesions(empty)
        wce = weighted_cross_entropy(x, ref_components=labeled)
        ce = cross_entropy(x)
        assert abs(wce.value - ce.value) < 1e-12
        np.testing.assert_allclose(wce.grad, ce.grad, atol=1e-12)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(26)
        for _ in range(5):
            check_grad(weighted_cross_entropy, random_input(rng, shape=(5, 4, 1)))


class TestSharedProperties:
    @pytest.mark.parametrize("name", ["cross_entropy", "soft_dice", "focal", "weighted_cross_entropy"])
    def test_nonnegative_and_finite(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        fn = get_loss(name)
        for _ in range(10):
            out = fn(random_input(rng))
            assert out.value >= 0.0
            assert np.all(np.isfinite(out.grad))

    @pytest.mark.parametrize("name", ["cross_entropy", "soft_dice", "focal", "weighted_cross_entropy"])
    def test_ignores_noncandidate_voxels(self, name):
        rng = np.random.default_rng(31)
        fn = get_loss(name)
        x = random_input(rng, cand_fraction=0.5)
        base = fn(x)
        outside = ~x.candidates.bool_data
        assert np.all(base.grad[outside] == 0.0)
        perturbed = x.pred.data.copy()
        perturbed[outside] = rng.uniform(0.01, 0.99, size=int(outside.sum()))
        out = fn(make_like(x, perturbed))
        assert out.value == base.value
        np.testing.assert_array_equal(out.grad, base.grad)


class TestToyFit:
    def test_all_losses_descend(self):
        rng = np.random.default_rng(41)
        patches = make_separable_patches(rng)
        for name in ["cross_entropy", "soft_dice", "focal", "weighted_cross_entropy"]:
            result = toy_fit(patches, loss=name, steps=50, learning_rate=0.5)
            assert result.trace[-1] < result.trace[0], name

    def test_zero_learning_rate_constant(self):
        rng = np.random.default_rng(42)
        patches = make_separable_patches(rng)
        result = toy_fit(patches, steps=10, learning_rate=0.0)
        assert np.all(result.trace == result.trace[0])

    def test_cross_entropy_reaches_high_accuracy(self):
        rng = np.random.default_rng(43)
        patches = make_separable_patches(rng, count=4)
        result = toy_fit(patches, loss="cross_entropy", steps=500, learning_rate=1.0)
        assert result.accuracy > 0.95
