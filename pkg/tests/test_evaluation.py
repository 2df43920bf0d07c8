import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zstci.embedding import TrainConfig, init_embedding_model, train_task
from zstci.errors import ProtocolError
from zstci.evaluation import (
    AccuracyMatrix,
    average_forgetting,
    average_incremental_accuracy,
    evaluate_after_task,
    ncm_classify,
)
from zstci.stream import make_synthetic_stream
from zstci.translation import PrototypeMemory, compute_prototypes


def memory_of(ids, vecs, order=None):
    pairs = list(zip(ids, vecs))
    if order is not None:
        pairs = [pairs[i] for i in order]
    return PrototypeMemory().insert(pairs, 1)


def brute_ncm(queries, ids, vecs):
    out = []
    for q in queries:
        best, best_d = None, None
        for c, v in sorted(zip(ids, vecs), key=lambda t: t[0]):
            d = sum((q[k] - v[k]) ** 2 for k in range(len(q)))
            if best_d is None or d < best_d:
                best, best_d = c, d
        out.append(best)
    return out


def brute_forgetting(rows, k):
    total = 0.0
    for j in range(k - 1):
        total += max(rows[l][j] - rows[k - 1][j] for l in range(j, k - 1))
    return total / (k - 1)


def random_rows(rng, n):
    return [rng.integers(0, 11, size=k).astype(float) / 10 for k in range(1, n + 1)]


class TestNcm:
    def test_nearest(self):
        mem = memory_of([0, 1], [np.zeros(2), np.ones(2)])
        assert ncm_classify(np.array([[0.1, 0.0]]), mem).tolist() == [0]

    def test_exact_prototype(self):
        mem = memory_of([3, 7, 9], [np.array([0.0, 1.0]), np.array([2.0, 2.0]), np.array([-1.0, 0.0])])
        assert ncm_classify(np.array([[2.0, 2.0]]), mem).tolist() == [7]

    def test_tie_goes_to_smallest_id(self):
        mem = memory_of([5, 2], [np.array([1.0, 0.0]), np.array([-1.0, 0.0])])
        assert ncm_classify(np.zeros((1, 2)), mem).tolist() == [2]

    @pytest.mark.parametrize("seed", range(100))
    def test_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        ids = rng.choice(1000, size=10, replace=False).tolist()
        vecs = list(rng.normal(size=(10, 3)))
        q = rng.normal(size=(50, 3))
        assert ncm_classify(q, memory_of(ids, vecs)).tolist() == brute_ncm(q, ids, vecs)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_insertion_order_and_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        ids = list(range(6))
        vecs = list(rng.normal(size=(6, 4)))
        q = rng.normal(size=(20, 4))
        base = ncm_classify(q, memory_of(ids, vecs))
        perm = rng.permutation(6)
        assert np.array_equal(base, ncm_classify(q, memory_of(ids, vecs, perm)))
        # power-of-two shift keeps the arithmetic exact
        shift = np.array([0.5, -2.0, 4.0, 1.0])
        shifted = memory_of(ids, [v + shift for v in vecs])
        assert np.array_equal(base, ncm_classify(q + shift, shifted))

    def test_empty_memory(self):
        with pytest.raises(ProtocolError):
            ncm_classify(np.zeros((1, 2)), PrototypeMemory())


class TestMetrics:
    def test_first_task(self):
        m = AccuracyMatrix.from_rows([[0.8]])
        assert average_incremental_accuracy(m, 1) == 0.8

    def test_row_mean(self):
        m = AccuracyMatrix.from_rows([[0.9], [0.8, 0.6]])
        assert average_incremental_accuracy(m, 2) == pytest.approx(0.7)

    def test_two_task_forgetting(self):
        m = AccuracyMatrix.from_rows([[0.9], [0.7, 1.0]])
        assert average_forgetting(m, 2) == pytest.approx(0.2)

    def test_constant_columns(self):
        m = AccuracyMatrix.from_rows([[0.5], [0.5, 0.7], [0.5, 0.7, 0.1]])
        assert average_forgetting(m, 3) == 0.0

    def test_improvement_gives_negative_forgetting(self):
        m = AccuracyMatrix.from_rows([[0.5], [0.9, 0.9]])
        assert average_forgetting(m, 2) == pytest.approx(-0.4)

    def test_errors(self):
        m = AccuracyMatrix(3)
        m.set_row(1, [0.5])
        with pytest.raises(ProtocolError):
            average_incremental_accuracy(m, 2)
        with pytest.raises(ProtocolError):
            average_forgetting(m, 1)
        with pytest.raises(ProtocolError):
            m.set_row(2, [0.1])

    @pytest.mark.parametrize("seed", range(100))
    def test_loop_oracles(self, seed):
        rng = np.random.default_rng(seed)
        rows = random_rows(rng, 4)
        m = AccuracyMatrix.from_rows(rows)
        for k in range(1, 5):
            assert average_incremental_accuracy(m, k) == pytest.approx(sum(rows[k - 1]) / k, rel=1e-12)
        for k in range(2, 5):
            assert average_forgetting(m, k) == pytest.approx(brute_forgetting(rows, k), rel=1e-12, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 6))
    def test_properties(self, seed, n):
        rng = np.random.default_rng(seed)
        rows = random_rows(rng, n)
        m = AccuracyMatrix.from_rows(rows)
        assert 0.0 <= average_incremental_accuracy(m, n) <= 1.0
        assert average_forgetting(m, n) <= max(max(r) for r in rows)
        # make every column non-decreasing down the rows
        mono = [np.maximum.accumulate([rows[l][j] for l in range(j, n)]) for j in range(n)]
        rows2 = [[mono[j][k - j] for j in range(k + 1)] for k in range(n)]
        assert average_forgetting(AccuracyMatrix.from_rows(rows2), n) <= 0.0


class TestEvaluateAfterTask:
    def test_zero_spread_first_task(self):
        stream = make_synthetic_stream(2, 3, 10, 6, 0.0, seed=1)
        model = init_embedding_model((6, 16, 4), np.random.default_rng(0))
        model = train_task(model, stream[0], TrainConfig(epochs=5), np.random.default_rng(0))
        mem = PrototypeMemory().insert(compute_prototypes(model, stream[0]), 1)
        assert evaluate_after_task(1, stream, model, mem) == [1.0]

    def test_shuffled_labels_near_chance(self):
        import dataclasses

        stream = make_synthetic_stream(1, 10, 100, 6, 0.3, seed=2)
        model = init_embedding_model((6, 16, 4), np.random.default_rng(0))
        mem = PrototypeMemory().insert(compute_prototypes(model, stream[0]), 1)
        task = stream[0]
        rng = np.random.default_rng(0)
        shuffled = dataclasses.replace(task, y_test=rng.permutation(task.y_test))
        acc = evaluate_after_task(1, [shuffled], model, mem)[0]
        n = len(task.y_test)
        # 1/|C| within four binomial standard deviations
        assert abs(acc - 0.1) < 4 * np.sqrt(0.1 * 0.9 / n)

    def test_identity_translator_equals_none(self):
        stream = make_synthetic_stream(2, 2, 10, 4, 0.3, seed=3)
        model = init_embedding_model((4, 8, 3), np.random.default_rng(0))
        mem = PrototypeMemory()
        for t in stream:
            mem.insert(compute_prototypes(model, t), t.index)
        assert evaluate_after_task(2, stream, model, mem, lambda z: z) == evaluate_after_task(2, stream, model, mem)
