import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from zstci.errors import ConfigError, DataError, FormatError
from zstci.stream import load_feature_csv, make_synthetic_stream

DATA = Path(__file__).parent / "data"


def oracle_partition(labels, num_tasks, seed):
    """Re-derivation of the split: sort classes by uniform keys, then cut front-loaded groups."""
    classes = sorted(set(labels))
    keys = np.random.default_rng(seed).random(len(classes)).tolist()
    shuffled = [c for _, _, c in sorted(zip(keys, range(len(classes)), classes))]
    q, r = divmod(len(classes), num_tasks)
    groups, pos = [], 0
    for t in range(num_tasks):
        size = q + (1 if t < r else 0)
        groups.append(shuffled[pos : pos + size])
        pos += size
    return groups


class TestSynthetic:
    def test_zero_spread_samples_equal_means(self):
        s = make_synthetic_stream(1, 2, 10, 4, 0.0, seed=11)
        task = s[0]
        for c in task.classes:
            pts = np.concatenate([task.x_train[task.y_train == c], task.x_test[task.y_test == c]])
            assert np.all(pts == pts[0])
        assert task.n_train == 16 and len(task.y_test) == 4

    def test_deterministic(self):
        a = make_synthetic_stream(3, 3, 10, 5, 0.2, seed=5)
        b = make_synthetic_stream(3, 3, 10, 5, 0.2, seed=5)
        for ta, tb in zip(a, b):
            assert ta.classes == tb.classes
            assert np.array_equal(ta.x_train, tb.x_train) and np.array_equal(ta.x_test, tb.x_test)

    def test_hundred_classes_disjoint(self):
        s = make_synthetic_stream(10, 10, 5, 4, 0.1, seed=0)
        assert len(s.classes) == 100 and len(set(s.classes)) == 100
        for a, b in itertools.combinations(s, 2):
            assert not set(a.classes) & set(b.classes)

    def test_mean_separation(self):
        s = make_synthetic_stream(2, 3, 10, 8, 0.1, seed=2)
        means = [s[t].x_train[s[t].y_train == c].mean(0) for t in range(2) for c in s[t].classes]
        assert min(np.linalg.norm(a - b) for a, b in itertools.combinations(means, 2)) > 0.2

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            make_synthetic_stream(2, 1, 10, 4, 0.1, seed=0)
        with pytest.raises(ConfigError):
            make_synthetic_stream(0, 2, 10, 4, 0.1, seed=0)


class TestCsv:
    def test_golden_partition(self):
        golden = json.loads((DATA / "tiny6_partition_1993.json").read_text())
        s = load_feature_csv(DATA / "tiny6.csv", golden["num_tasks"], golden["seed"])
        assert [list(t.classes) for t in s] == golden["tasks"]
        labels = [int(line.split(",")[0]) for line in (DATA / "tiny6.csv").read_text().split()]
        assert oracle_partition(labels, 3, 1993) == golden["tasks"]

    def test_hundred_classes_ten_tasks(self, tmp_path):
        rng = np.random.default_rng(0)
        path = tmp_path / "f.csv"
        path.write_text("\n".join(f"{c}," + ",".join(map(str, rng.normal(size=2))) for c in range(100) for _ in range(3)))
        s = load_feature_csv(path, 10, 1993)
        assert [t.n_classes for t in s] == [10] * 10
        assert sorted(s.classes) == list(range(100))

    def test_remainder_goes_to_early_tasks(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("\n".join(f"{c},{i}.0" for c in range(7) for i in range(3)))
        s = load_feature_csv(path, 3, 4)
        assert [t.n_classes for t in s] == [3, 2, 2]
        labels = [c for c in range(7) for _ in range(3)]
        assert [list(t.classes) for t in s] == oracle_partition(labels, 3, 4)

    def test_single_task_is_joint(self):
        s = load_feature_csv(DATA / "tiny6.csv", 1, 1993)
        assert len(s) == 1 and sorted(s[0].classes) == [3, 8, 11, 20, 21, 42]
        assert s[0].n_train + len(s[0].y_test) == 30

    def test_deterministic(self):
        a = load_feature_csv(DATA / "tiny6.csv", 3, 9)
        b = load_feature_csv(DATA / "tiny6.csv", 3, 9)
        for ta, tb in zip(a, b):
            assert ta.classes == tb.classes and np.array_equal(ta.x_train, tb.x_train)

    def test_header_flag(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("label,a\n" + "\n".join(f"{c},{i}" for c in range(4) for i in range(3)))
        assert len(load_feature_csv(path, 2, 0, header=True)) == 2
        with pytest.raises(FormatError):
            load_feature_csv(path, 2, 0)

    def test_ragged_row_reports_line(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("0,1.0,2.0\n0,1.0,2.0\n1,1.0\n")
        with pytest.raises(FormatError, match="line 3"):
            load_feature_csv(path, 1, 0)

    def test_too_few_train_samples(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("0,1.0\n0,2.0\n0,3.0\n1,1.0\n2,1.0\n2,2.0\n2,3.0\n3,4.0\n3,5.0\n")
        with pytest.raises(DataError):
            load_feature_csv(path, 2, 0)
