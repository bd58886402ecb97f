import numpy as np
import pytest

from idus.preprocess import UNLABELED
from idus.synth import SynthConfig, TextureSpec, class_proportions, generate_raw, generate_synthetic


def test_deterministic():
    a = generate_synthetic(SynthConfig(n_images=3, seed=11))
    b = generate_synthetic(SynthConfig(n_images=3, seed=11))
    for x, y in zip(a, b):
        assert x.pixels.tobytes() == y.pixels.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_seed_changes_data():
    a = generate_synthetic(SynthConfig(n_images=1, seed=0))[0]
    b = generate_synthetic(SynthConfig(n_images=1, seed=1))[0]
    assert not np.array_equal(a.pixels, b.pixels)


@pytest.mark.parametrize("fraction", [0.0, 0.25, 0.5, 0.8, 1.0])
def test_label_fraction_exact(fraction):
    for rec in generate_synthetic(SynthConfig(n_images=4, side=64, label_fraction=fraction, seed=2)):
        assert np.count_nonzero(rec.labels != UNLABELED) == int(np.floor(fraction * 64 * 64))


def test_labels_agree_with_truth_and_codes_valid():
    for rec in generate_synthetic(SynthConfig(n_images=5, seed=4)):
        lab = rec.labels != UNLABELED
        np.testing.assert_array_equal(rec.labels[lab], rec.truth[lab])
        assert set(np.unique(rec.labels)) <= set(range(4)) | {UNLABELED}


def test_pixels_are_normalized():
    for rec in generate_synthetic(SynthConfig(n_images=2, seed=5)):
        assert abs(rec.pixels.mean()) < 1e-6 and abs(rec.pixels.std() - 1) < 1e-6


def test_raw_is_nonnegative_magnitude():
    for _, raw, _, _ in generate_raw(SynthConfig(n_images=3, seed=6)):
        assert np.all(np.isfinite(raw)) and raw.min() >= 0


def test_class_proportions_recorded():
    recs = generate_synthetic(SynthConfig(n_images=3, seed=7))
    for r in recs:
        oracle = np.bincount(r.truth.ravel(), minlength=4) / r.truth.size
        np.testing.assert_allclose(r.meta["class_proportions"], oracle)
    total = class_proportions([r.truth for r in recs], 4)
    assert total.sum() == pytest.approx(1.0)


def test_invalid_configs():
    with pytest.raises(ValueError):
        SynthConfig(n_classes=5)
    with pytest.raises(ValueError):
        SynthConfig(label_fraction=1.5)
    with pytest.raises(ValueError):
        TextureSpec("plaid")
