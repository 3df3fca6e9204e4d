import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalearn_lab.errors import CheckpointError, DataError
from scalearn_lab.metrics import accuracy, compute_metric, confusion_matrix, f1_macro, matthews, pearson
from scalearn_lab.taskgen import (
    BenchmarkSpec,
    Dataset,
    TaskSpec,
    bag_of_tokens,
    generate_benchmark,
    load_jsonl,
    read_benchmark,
    save_jsonl,
    validate_dataset,
    write_benchmark,
)

from conftest import tiny_spec


def cross_task_probe(rho: float, seed: int) -> float:
    """Logistic regression on log token counts of task a, scored on task b's test split."""
    spec = BenchmarkSpec([TaskSpec("a", n_train=1000, n_test=1000, overlap=rho),
                          TaskSpec("b", n_train=1000, n_test=1000, overlap=rho)])
    bench = generate_benchmark(spec, seed)

    def xy(task, split):
        rows = bench[task][1].split(split)
        X = np.log1p(bag_of_tokens([t for t, _ in rows], spec.vocab_size))
        return np.hstack([X, np.ones((len(X), 1))]), np.array([y for _, y in rows])

    X, y = xy("a", "train")
    w = np.zeros(X.shape[1])
    for _ in range(2000):
        p = 1.0 / (1.0 + np.exp(-X @ w))
        w -= 0.5 * (X.T @ (p - y) / len(y) + 1e-3 * w)
    Xb, yb = xy("b", "test")
    return float(((Xb @ w > 0) == yb).mean())


class TestGenerate:
    def test_same_seed_byte_identical(self, tmp_path):
        spec = tiny_spec()
        a = write_benchmark(generate_benchmark(spec, 7), tmp_path / "a", spec, 7)
        b = write_benchmark(generate_benchmark(spec, 7), tmp_path / "b", spec, 7)
        for f in sorted(p.name for p in a.parent.iterdir()):
            assert (a.parent / f).read_bytes() == (b.parent / f).read_bytes()

    def test_different_seeds_differ(self):
        a = generate_benchmark(tiny_spec(), 0)["alpha"][1]
        b = generate_benchmark(tiny_spec(), 1)["alpha"][1]
        assert a != b

    @pytest.mark.parametrize("seed", [0, 1])
    def test_full_overlap_transfers(self, seed):
        assert cross_task_probe(1.0, seed) > 0.8

    @pytest.mark.parametrize("seed", [0, 1])
    def test_no_overlap_is_chance(self, seed):
        assert abs(cross_task_probe(0.0, seed) - 0.5) <= 0.1

    def test_shapes_and_reserved_tokens(self, tiny_benchmark):
        spec = tiny_spec()
        for task, data in tiny_benchmark.values():
            assert (len(data.train), len(data.validation), len(data.test)) == (48, 24, 32)
            for tokens, y in data.train:
                assert tokens[0] == 0 and len(tokens) == spec.seq_len
                assert all(2 <= t < spec.vocab_size for t in tokens[1:])
                if task.is_regression:
                    assert isinstance(y, float)
                else:
                    assert 0 <= y < task.n_classes

    def test_default_benchmark(self):
        spec = BenchmarkSpec.default()
        names = [t.name for t in spec.tasks]
        assert len(names) == 6 and "entailment_low" in names
        low = next(t for t in spec.tasks if t.name == "entailment_low")
        assert low.n_train == 64 and all(t.overlap == 0.7 for t in spec.tasks)

    @pytest.mark.parametrize("kw", [dict(kind="ranking"), dict(kind="regression", main_metric="accuracy"),
                                    dict(main_metric="pearson"), dict(n_classes=1), dict(overlap=1.5),
                                    dict(n_train=4)])
    def test_task_validation(self, kw):
        with pytest.raises(ValueError):
            TaskSpec("x", **kw)

    def test_duplicate_names(self):
        with pytest.raises(ValueError, match="unique"):
            BenchmarkSpec([TaskSpec("x"), TaskSpec("x")])


class TestIO:
    def test_round_trip(self, tiny_benchmark, tmp_path):
        rows = tiny_benchmark["gamma"][1].train
        save_jsonl(rows, tmp_path / "g.jsonl")
        assert load_jsonl(tmp_path / "g.jsonl") == rows

    def test_benchmark_round_trip(self, tiny_benchmark, tmp_path):
        manifest = write_benchmark(tiny_benchmark, tmp_path, tiny_spec(), 0)
        loaded = read_benchmark(manifest)
        assert list(loaded) == list(tiny_benchmark)
        for name, (task, data) in tiny_benchmark.items():
            assert loaded[name][0] == task and loaded[name][1] == data
        assert json.loads(manifest.read_text())["vocab_size"] == 32

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert load_jsonl(tmp_path / "e.jsonl") == []

    @pytest.mark.parametrize("line", ['{"tokens": [1, 2]}', "not json", '{"tokens": [1, "a"], "label": 0}',
                                      '{"tokens": [1], "label": true}'])
    def test_malformed_line_number(self, tmp_path, line):
        (tmp_path / "m.jsonl").write_text('{"tokens": [0, 3], "label": 1}\n' + line + "\n")
        with pytest.raises(DataError, match=":2:"):
            load_jsonl(tmp_path / "m.jsonl")

    def test_out_of_vocabulary_index(self):
        data = Dataset([([0, 3], 1), ([0, 40], 0)], [([0, 2], 0)], [])
        with pytest.raises(DataError, match=r"train\[1\].*40"):
            validate_dataset(data, vocab_size=32)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_benchmark(tmp_path / "manifest.json")


labels_and_preds = st.integers(2, 4).flatmap(lambda c: st.tuples(
    st.just(c),
    st.lists(st.integers(0, c - 1), min_size=2, max_size=40),
)).flatmap(lambda cl: st.tuples(
    st.just(cl[0]), st.just(cl[1]),
    st.lists(st.integers(0, cl[0] - 1), min_size=len(cl[1]), max_size=len(cl[1])),
))


class TestMetrics:
    def test_perfect(self):
        y = [0, 1, 1, 0, 2]
        assert accuracy(y, y) == f1_macro(y, y) == matthews(y, y) == 1.0
        assert pearson([0.1, 0.5, 0.2], [0.1, 0.5, 0.2]) == pytest.approx(1.0)

    def test_constant_predictor_on_balanced_labels(self):
        assert matthews([1, 1, 1, 1], [0, 1, 0, 1]) == 0.0

    def test_hand_confusion(self):
        # TP=4, TN=3, FP=1, FN=2
        y = [1] * 4 + [0] * 3 + [0] + [1] * 2
        p = [1] * 4 + [0] * 3 + [1] + [0] * 2
        expected = (4 * 3 - 1 * 2) / np.sqrt(5 * 6 * 5 * 4)
        assert expected == pytest.approx(0.40825, abs=1e-5)
        assert matthews(p, y) == pytest.approx(expected, rel=1e-12)
        np.testing.assert_array_equal(confusion_matrix(p, y), [[3, 1], [2, 4]])

    def test_zero_variance_pearson_warns(self):
        with pytest.warns(RuntimeWarning):
            assert pearson([1.0, 1.0, 1.0], [0.0, 1.0, 2.0]) == 0.0

    def test_f1_absent_class_scores_zero(self):
        assert f1_macro([0, 0], [0, 0], n_classes=2) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            accuracy([0, 1], [0])

    def test_unknown_metric(self):
        with pytest.raises(ValueError, match="unknown metric"):
            compute_metric("bleu", [0], [0])

    @given(labels_and_preds)
    def test_ranges(self, sample):
        C, y, p = sample
        assert 0.0 <= accuracy(p, y) <= 1.0
        assert 0.0 <= f1_macro(p, y, C) <= 1.0
        assert -1.0 - 1e-12 <= matthews(p, y, C) <= 1.0 + 1e-12

    @given(labels_and_preds, st.randoms(use_true_random=False))
    def test_permutation_invariance(self, sample, random):
        C, y, p = sample
        order = list(range(len(y)))
        random.shuffle(order)
        yp, pp = [y[i] for i in order], [p[i] for i in order]
        assert accuracy(pp, yp) == accuracy(p, y)
        assert f1_macro(pp, yp, C) == pytest.approx(f1_macro(p, y, C), abs=1e-12)
        assert matthews(pp, yp, C) == pytest.approx(matthews(p, y, C), abs=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=30, unique=True),
           st.floats(0.01, 50), st.booleans(), st.floats(-100, 100))
    def test_pearson_affine(self, x, a, negative, b):
        x = np.array(x)
        if np.std(x) < 1e-3:
            return
        slope = -a if negative else a
        assert pearson(x, slope * x + b) == pytest.approx(-1.0 if negative else 1.0, abs=1e-9)
