import math

import numpy as np
import pytest
import torch

from idus.losses import ClassWeights, class_weights, loss, segmentation_loss
from idus.preprocess import UNLABELED


def loss_oracle(p, y, w_ce, w_dice, smooth=1.0):
    """Per-pixel loops over H x W x C probabilities."""
    H, W, C = p.shape
    num = den = 0.0
    inter = np.zeros(C)
    union = np.zeros(C)
    for i in range(H):
        for j in range(W):
            t = y[i, j]
            if t == UNLABELED:
                continue
            num += w_ce[t] * -math.log(p[i, j, t])
            den += w_ce[t]
            for c in range(C):
                g = 1.0 if c == t else 0.0
                inter[c] += p[i, j, c] * g
                union[c] += p[i, j, c] + g
    ce = num / den
    dice = 1 - (2 * (w_dice * inter).sum() + smooth) / ((w_dice * union).sum() + smooth)
    return 0.5 * ce + 0.5 * dice


class TestWeights:
    def test_uniform(self):
        w = ClassWeights.uniform(7)
        np.testing.assert_allclose(w.w_ce, 7)
        np.testing.assert_allclose(w.w_dice, math.sqrt(7))

    def test_shadow_class(self):
        w = ClassWeights.from_proportions([0.003, 0.997])
        assert w.w_ce[0] == pytest.approx(333.33, abs=1e-2)
        assert w.w_dice[0] == pytest.approx(18.257, abs=1e-2)

    def test_products_are_one(self):
        r = np.random.default_rng(0).dirichlet(np.ones(5))
        w = ClassWeights.from_proportions(r)
        np.testing.assert_allclose(w.w_ce * r, 1, atol=1e-9)
        np.testing.assert_allclose(w.w_dice * np.sqrt(r), 1, atol=1e-9)

    def test_absent_class(self):
        w = class_weights([np.array([[0, 0, 2, UNLABELED]])], 3)
        assert w.w_ce[1] == 0 and w.w_dice[1] == 0
        np.testing.assert_allclose(w.r, [2 / 3, 0, 1 / 3])


def test_matches_oracle():
    g = np.random.default_rng(0)
    p = g.dirichlet(np.ones(4), size=(6, 5))
    y = g.integers(0, 4, size=(6, 5))
    y[g.random((6, 5)) < 0.3] = UNLABELED
    w = class_weights([y], 4)
    v, has = loss(p, y, w)
    assert has
    assert v == pytest.approx(loss_oracle(p, y, w.w_ce, w.w_dice), rel=1e-10)


def test_uniform_prediction_ce_closed_form():
    p = np.full((8, 8, 7), 1 / 7)
    y = np.random.default_rng(1).integers(0, 7, size=(8, 8))
    w = ClassWeights.uniform(7)
    v, _ = loss(p, y, w)
    wd = math.sqrt(7)
    inter, union = 64 / 7, 128.0
    dice = 1 - (2 * wd * inter + 1) / (wd * union + 1)
    assert v - 0.5 * dice == pytest.approx(0.5 * math.log(7), abs=1e-12)


def test_one_hot_prediction_small():
    y = np.random.default_rng(2).integers(0, 3, size=(16, 16))
    v, _ = loss(np.eye(3)[y], y, class_weights([y], 3))
    assert v < 0.01


def test_all_unlabeled_zero_loss_and_gradient():
    logits = torch.randn(2, 3, 8, 8, requires_grad=True)
    target = torch.full((2, 8, 8), UNLABELED)
    out = segmentation_loss(logits, target, ClassWeights.uniform(3))
    out.backward()
    assert float(out.detach()) == 0.0
    assert float(logits.grad.abs().sum()) == 0.0
    v, has = loss(np.full((4, 4, 3), 1 / 3), np.full((4, 4), UNLABELED), ClassWeights.uniform(3))
    assert v == 0.0 and not has


def test_unlabeled_pixels_get_no_gradient():
    logits = torch.randn(1, 3, 6, 6, dtype=torch.float64, requires_grad=True)
    target = torch.randint(0, 3, (1, 6, 6))
    target[0, :3] = UNLABELED
    segmentation_loss(logits, target, ClassWeights.uniform(3)).backward()
    assert float(logits.grad[0, :, :3].abs().sum()) == 0.0
    assert float(logits.grad[0, :, 3:].abs().sum()) > 0.0


def test_gradcheck_wrt_logits():
    logits = torch.randn(2, 4, 5, 5, dtype=torch.float64, requires_grad=True)
    target = torch.randint(0, 4, (2, 5, 5))
    target[0, 0] = UNLABELED
    w = ClassWeights.from_proportions([0.1, 0.2, 0.3, 0.4])
    assert torch.autograd.gradcheck(lambda z: segmentation_loss(z, target, w), (logits,))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        loss(np.full((4, 4, 2), 0.5), np.zeros((4, 5), int), ClassWeights.uniform(2))


def test_image_order_invariance_of_per_image_loss():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 3, 6, 6, generator=g, dtype=torch.float64)
    target = torch.randint(0, 3, (3, 6, 6), generator=g)
    w = ClassWeights.uniform(3)
    a = [float(segmentation_loss(logits[i : i + 1], target[i : i + 1], w)) for i in range(3)]
    perm = [2, 0, 1]
    b = [float(segmentation_loss(logits[perm][i : i + 1], target[perm][i : i + 1], w)) for i in range(3)]
    assert [a[i] for i in perm] == b
