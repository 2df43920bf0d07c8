import dataclasses

import numpy as np
import pytest

from zstci import numeric as nc
from zstci.embedding import EmbeddingModel, embed, init_embedding_model, mine_triplets
from zstci.errors import EstimationError, ProtocolError
from zstci.regularizers import ImportanceMap, estimate_fisher, estimate_mas, lwf_penalty, quadratic_penalty
from zstci.stream import TaskDataset, make_synthetic_stream


def linear_model(w, b=None, normalize=False):
    w = np.asarray(w, dtype=float)
    b = np.zeros(w.shape[1]) if b is None else np.asarray(b, dtype=float)
    return EmbeddingModel(nc.ParamSet({"layer0.weight": w, "layer0.bias": b}), w.shape, normalize)


def task_from(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y)
    return TaskDataset(1, tuple(sorted(set(y.tolist()))), x, y, x[:1], y[:1])


class TestLwf:
    def test_identical_models(self):
        model = init_embedding_model((4, 6, 3), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(5, 4))
        assert lwf_penalty(model, model, x).value == 0.0

    def test_one_hot_against_zero(self):
        n = 5
        cur = linear_model(np.eye(n))
        prev = linear_model(np.zeros((n, n)))
        assert lwf_penalty(cur, prev, np.eye(n)).value == pytest.approx(np.sqrt(n))

    @pytest.mark.parametrize("seed", range(5))
    def test_loop_oracle_and_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = init_embedding_model((4, 6, 3), rng)
        b = init_embedding_model((4, 6, 3), rng)
        x = rng.normal(size=(7, 4))
        za, zb = embed(a, x), embed(b, x)
        oracle = np.sqrt(sum((za[i, k] - zb[i, k]) ** 2 for i in range(7) for k in range(3)))
        assert lwf_penalty(a, b, x).value == pytest.approx(oracle, rel=1e-12)
        assert lwf_penalty(b, a, x).value == pytest.approx(oracle, rel=1e-12)

    def test_architecture_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ProtocolError):
            lwf_penalty(init_embedding_model((4, 6, 3), rng), init_embedding_model((4, 5, 3), rng), np.zeros((2, 4)))


class TestQuadraticPenalty:
    def test_equal_params(self):
        p = nc.ParamSet({"w": np.arange(4.0)})
        assert quadratic_penalty(p, p, ImportanceMap(p.map(np.ones_like), "fisher")).value == 0.0

    def test_unit_weights(self):
        cur = nc.ParamSet({"w": np.array([1.0, 1.0])})
        prev = nc.ParamSet({"w": np.array([0.0, 0.0])})
        assert quadratic_penalty(cur, prev, nc.ParamSet({"w": np.ones(2)})).value == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        shapes = {"a": (3, 2), "b": (4,)}
        cur = nc.ParamSet({k: rng.normal(size=s) for k, s in shapes.items()})
        prev = nc.ParamSet({k: rng.normal(size=s) for k, s in shapes.items()})
        w = nc.ParamSet({k: rng.uniform(size=s) for k, s in shapes.items()})
        oracle = 0.0
        for k in shapes:
            for idx in np.ndindex(shapes[k]):
                oracle += 0.5 * w[k][idx] * (cur[k][idx] - prev[k][idx]) ** 2
        assert quadratic_penalty(cur, prev, w).value == pytest.approx(oracle, rel=1e-12)

    def test_shape_mismatch(self):
        a = nc.ParamSet({"w": np.zeros(2)})
        b = nc.ParamSet({"w": np.zeros(3)})
        with pytest.raises(ProtocolError):
            quadratic_penalty(a, b, b)


class TestFisher:
    def test_one_parameter_closed_form(self):
        x = np.array([[0.0], [0.3], [1.0], [1.4], [2.5]])
        y = np.array([0, 0, 1, 1, 0])
        w, margin = 0.8, 5.0
        model = linear_model([[w]], [0.1])
        imp = estimate_fisher(model, task_from(x, y), margin=margin)
        # loss = mean_t max(0, w^2 (dxp^2 - dxn^2) + m); margin large => every hinge active
        trips = mine_triplets(y)
        xs = x[:, 0]
        terms = [(xs[a] - xs[p]) ** 2 - (xs[a] - xs[n]) ** 2 for a, p, n in trips]
        assert all(w * w * t + margin > 0 for t in terms)
        dw = 2 * w * np.mean(terms)
        assert imp["layer0.weight"][0, 0] == pytest.approx(dw**2, rel=1e-10)
        assert imp["layer0.bias"][0] == pytest.approx(0.0, abs=1e-20)
        assert imp.estimator == "fisher"

    def test_flat_loss_gives_zero(self):
        # hinges all inactive: huge class separation, tiny margin
        x = np.array([[0.0], [0.01], [100.0], [100.01]])
        y = np.array([0, 0, 1, 1])
        imp = estimate_fisher(linear_model([[1.0]]), task_from(x, y), margin=1e-3)
        assert all(np.all(v == 0) for v in imp.weights.values())

    def test_non_negative_and_permutation_invariant(self):
        task = make_synthetic_stream(1, 3, 10, 4, 0.3, seed=0)[0]
        model = init_embedding_model((4, 8, 3), np.random.default_rng(0))
        a = estimate_fisher(model, task)
        perm = np.random.default_rng(1).permutation(task.n_train)
        shuffled = dataclasses.replace(task, x_train=task.x_train[perm], y_train=task.y_train[perm])
        b = estimate_fisher(model, shuffled)
        for k in a.weights:
            assert np.all(a[k] >= 0)
            np.testing.assert_allclose(a[k], b[k], rtol=1e-6, atol=1e-18)

    def test_sampled_batches(self):
        task = make_synthetic_stream(1, 3, 20, 4, 0.3, seed=0)[0]
        model = init_embedding_model((4, 8, 3), np.random.default_rng(0))
        imp = estimate_fisher(model, task, num_batches=3, rng=np.random.default_rng(0), batch_size=8)
        assert all(np.all(v >= 0) for v in imp.weights.values())

    def test_no_triplets(self):
        x = np.zeros((3, 1))
        task = TaskDataset(1, (0,), x, np.zeros(3, dtype=int), x, np.zeros(3, dtype=int))
        with pytest.raises(EstimationError):
            estimate_fisher(linear_model([[1.0]]), task)


class TestMas:
    def test_linear_closed_form(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 2))
        x = rng.normal(size=(6, 3))
        y = np.array([0, 0, 0, 1, 1, 1])
        imp = estimate_mas(linear_model(w, normalize=True), task_from(x, y))
        z = x @ w
        expected_w = np.mean([np.abs(2 * np.outer(x[i], z[i])) for i in range(6)], axis=0)
        expected_b = np.mean([np.abs(2 * z[i]) for i in range(6)], axis=0)
        np.testing.assert_allclose(imp["layer0.weight"], expected_w, rtol=1e-12)
        np.testing.assert_allclose(imp["layer0.bias"], expected_b, rtol=1e-12)
        assert imp.estimator == "mas"

    def test_zero_output_model(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        imp = estimate_mas(linear_model(np.zeros((3, 2))), task_from(x, [0, 0, 1, 1]))
        assert all(np.all(v == 0) for v in imp.weights.values())

    def test_non_negative_and_permutation_invariant(self):
        task = make_synthetic_stream(1, 3, 10, 4, 0.3, seed=2)[0]
        model = init_embedding_model((4, 8, 3), np.random.default_rng(0))
        a = estimate_mas(model, task)
        perm = np.random.default_rng(1).permutation(task.n_train)
        b = estimate_mas(model, dataclasses.replace(task, x_train=task.x_train[perm], y_train=task.y_train[perm]))
        for k in a.weights:
            assert np.all(a[k] >= 0)
            np.testing.assert_allclose(a[k], b[k], rtol=1e-6)


def test_importance_accumulate_and_validation():
    p = nc.ParamSet({"w": np.ones(2)})
    a = ImportanceMap(p, "mas")
    assert np.array_equal(a.accumulate(a)["w"], np.full(2, 2.0))
    with pytest.raises(EstimationError):
        ImportanceMap(nc.ParamSet({"w": np.array([-1.0])}), "mas")
