import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from idus.clustering import ClusterModel, assign_nearest, kmeans, texton_select


def exhaustive_objective(x, M):
    """Global k-means optimum by enumerating every labeling of the points."""
    best = np.inf
    for lab in itertools.product(range(M), repeat=len(x)):
        lab = np.array(lab)
        if len(set(lab)) < M:
            continue
        obj = sum(((x[lab == m] - x[lab == m].mean(0)) ** 2).sum() for m in range(M))
        best = min(best, obj)
    return best


def objective(x, lab):
    return sum(((x[lab == m] - x[lab == m].mean(0)) ** 2).sum() for m in set(lab.tolist()))


def test_hand_example_two_groups():
    x = np.array([0, 0.1, 0.2, 10, 10.1, 10.2])[:, None]
    model, lab = kmeans(x, 2, seed=0)
    np.testing.assert_allclose(np.sort(model.centroids[:, 0]), [0.1, 10.1], atol=1e-12)
    assert len(set(lab[:3])) == 1 and len(set(lab[3:])) == 1 and lab[0] != lab[3]
    assert model.objective == pytest.approx(exhaustive_objective(x, 2), abs=1e-12)


def test_n_equals_m_objective_zero():
    x = np.random.default_rng(0).normal(size=(5, 3))
    model, lab = kmeans(x, 5)
    assert model.objective == pytest.approx(0.0, abs=1e-12)
    assert sorted(lab) == list(range(5))


def test_identical_points():
    model, lab = kmeans(np.ones((10, 2)), 3)
    assert model.objective == pytest.approx(0.0, abs=1e-12)
    assert lab.min() >= 0 and lab.max() < 3


def transfer_stable(x, lab):
    """No single-point move between clusters lowers the objective."""
    for i in range(len(x)):
        for j in set(lab.tolist()) - {lab[i]}:
            moved = lab.copy()
            moved[i] = j
            if len(set(moved.tolist())) == len(set(lab.tolist())) and objective(x, moved) < objective(x, lab) - 1e-12:
                return False
    return True


@given(st.integers(3, 8), st.integers(1, 3), st.integers(0, 10_000))
def test_local_optimum_on_small_problems(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    model, lab = kmeans(x, 2, n_init=10, seed=seed)
    assert model.objective >= exhaustive_objective(x, 2) - 1e-9
    assert transfer_stable(x, lab)


def test_optimal_on_seeded_small_problems():
    # k-means is a heuristic; on a fixed batch it should miss the optimum almost never
    misses = 0
    for t in range(500):
        r = np.random.default_rng([77, t])
        x = r.normal(size=(int(r.integers(3, 9)), int(r.integers(1, 4))))
        model, _ = kmeans(x, 2, n_init=10, seed=t)
        misses += model.objective > exhaustive_objective(x, 2) + 1e-9
    assert misses <= 2


def test_transfers_escape_lloyd_fixed_point():
    # no pair of data-point seeds leads Lloyd to the optimum here
    x = np.random.default_rng(502).normal(size=(4, 3))
    lloyd, _ = kmeans(x, 2, n_init=10, seed=502, refine=False)
    model, lab = kmeans(x, 2, n_init=10, seed=502)
    assert lloyd.objective > exhaustive_objective(x, 2) + 1e-3
    assert model.objective == pytest.approx(exhaustive_objective(x, 2), rel=1e-12)
    assert objective(x, lab) == pytest.approx(model.objective, rel=1e-12)


@given(st.integers(0, 10_000))
def test_lloyd_history_non_increasing(seed):
    x = np.random.default_rng(seed).normal(size=(60, 2))
    model, _ = kmeans(x, 4, n_init=3, seed=seed)
    h = np.asarray(model.history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))


def test_returned_objective_matches_assignment():
    x = np.random.default_rng(3).normal(size=(200, 3))
    model, lab = kmeans(x, 5, seed=1)
    obj = ((x - model.centroids[lab]) ** 2).sum()
    assert model.objective == pytest.approx(obj, rel=1e-9)
    np.testing.assert_array_equal(lab, assign_nearest(x, model))


def test_deterministic():
    x = np.random.default_rng(4).normal(size=(100, 2))
    a, la = kmeans(x, 3, seed=7)
    b, lb = kmeans(x, 3, seed=7)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    np.testing.assert_array_equal(la, lb)


def test_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 1)), 3)
    with pytest.raises(ValueError):
        kmeans(np.array([[0.0], [np.nan], [1.0]]), 2)
    with pytest.raises(ValueError):
        assign_nearest(np.zeros((3, 2)), np.zeros((2, 3)))


class TestAssignNearest:
    def test_point_on_centroid(self):
        c = np.random.default_rng(0).normal(size=(5, 2))
        assert assign_nearest(c[3:4], c)[0] == 3

    def test_tie_goes_to_lowest_index(self):
        c = np.array([[9.0, 9.0], [1.0, 0.0], [5.0, 5.0], [7.0, 7.0], [-1.0, 0.0]])
        assert assign_nearest(np.zeros((1, 2)), c)[0] == 1

    def test_matches_exhaustive_oracle(self):
        g = np.random.default_rng(1)
        x, c = g.normal(size=(20, 2)), g.normal(size=(3, 2))
        oracle = [int(np.argmin([np.linalg.norm(p - q) for q in c])) for p in x]
        np.testing.assert_array_equal(assign_nearest(x, c), oracle)


def test_save_load_roundtrip(tmp_path):
    m = ClusterModel(np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32), 1.5, seed=2)
    m.save(tmp_path / "model")
    back = ClusterModel.load(tmp_path / "model")
    np.testing.assert_array_equal(back.centroids, m.centroids)
    assert (back.M, back.d, back.objective, back.seed) == (4, 3, 1.5, 2)


class TestTextons:
    def test_single_image_fixed_point(self):
        x = np.random.default_rng(0).normal(size=(50, 2))
        model = texton_select([x], n_local=6, n_global=6, seed=0)
        assert model.objective == pytest.approx(0.0, abs=1e-9)
        assert model.M == 6

    def test_blob_means_recovered(self):
        g = np.random.default_rng(1)
        means = np.array([[0, 0], [20, 0], [0, 20], [20, 20]], float)
        sigma, n = 0.5, 200
        imgs = [np.concatenate([m + sigma * g.normal(size=(n, 2)) for m in means[i * 2 : i * 2 + 2]]) for i in range(2)]
        model = texton_select(imgs, n_local=2, n_global=4, seed=0, n_init=5)
        got = model.centroids[np.argsort(model.centroids @ [1, 100])]
        want = means[np.argsort(means @ [1, 100])]
        assert np.all(np.abs(got - want) < 3 * sigma / np.sqrt(n))

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            texton_select([np.zeros((3, 2))], n_local=4, n_global=2)
