import numpy as np
import pytest

from impact_audio.errors import ClassTooSmall, ConfigError, LengthMismatch
from impact_audio.probe_bench import (
    LabeledEmbeddingSet,
    ProbeConfig,
    confusion_matrix,
    f1_per_class,
    macro_f1,
    predict,
    run_benchmark,
    stratified_split,
    train_probe,
    write_reports,
)


def brute_force_f1(preds, truth, cls):
    """Independent oracle: build the confusion counts explicitly."""
    tp = fp = fn = 0
    for p, t in zip(preds, truth):
        if p == cls and t == cls:
            tp += 1
        elif p == cls:
            fp += 1
        elif t == cls:
            fn += 1
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def gaussian_blobs(n_per_class, classes, dim=16, spread=0.5, seed=0):
    """Well-separated class clusters for separability checks."""
    rng = np.random.default_rng(seed)
    embeddings, labels = [], []
    for i, cls in enumerate(classes):
        center = np.zeros(dim)
        center[i % dim] = 10.0
        embeddings.append(center + spread * rng.standard_normal((n_per_class, dim)))
        labels += [cls] * n_per_class
    return LabeledEmbeddingSet(np.vstack(embeddings), labels, "toy", list(classes))


class TestStratifiedSplit:
    def test_ten_samples_gives_two_train(self):
        labels = ["a"] * 10 + ["b"] * 10
        train, test = stratified_split(labels, 0.2, seed=0)
        train_labels = [labels[i] for i in train]
        assert train_labels.count("a") == 2
        assert train_labels.count("b") == 2
        assert len(test) == 16

    def test_two_samples_minimum_clamp(self):
        train, test = stratified_split(["a", "a", "b", "b"], 0.2, seed=1)
        assert len(train) == 2 and len(test) == 2

    def test_partition_property(self):
        rng = np.random.default_rng(2)
        labels = rng.choice(["x", "y", "z"], size=57).tolist()
        # Guarantee every class is represented at least twice.
        labels[:6] = ["x", "x", "y", "y", "z", "z"]
        train, test = stratified_split(labels, 0.2, seed=3)
        assert set(train) | set(test) == set(range(57))
        assert set(train) & set(test) == set()

    def test_per_class_proportions(self):
        labels = ["a"] * 50 + ["b"] * 30 + ["c"] * 7
        train, _ = stratified_split(labels, 0.2, seed=4)
        counts = {c: 0 for c in "abc"}
        for i in train:
            counts[labels[i]] += 1
        assert counts == {"a": 10, "b": 6, "c": 1}

    def test_deterministic_per_seed(self):
        labels = ["a"] * 20 + ["b"] * 20
        a = stratified_split(labels, 0.2, seed=5)
        b = stratified_split(labels, 0.2, seed=5)
        np.testing.assert_array_equal(a[0], b[0])
        c = stratified_split(labels, 0.2, seed=6)
        assert not np.array_equal(a[0], c[0])

    def test_class_too_small(self):
        with pytest.raises(ClassTooSmall):
            stratified_split(["a", "a", "b"], 0.2, seed=0)


class TestTrainProbe:
    def test_separable_classes_reach_perfect_train_accuracy(self):
        data = gaussian_blobs(20, ["on", "off"], seed=0)
        head = train_probe(data, ProbeConfig(seed=0))
        preds = predict(head, data.embeddings, data.class_names)
        assert preds == data.labels

    def test_shuffled_labels_score_near_chance(self):
        rng = np.random.default_rng(1)
        data = gaussian_blobs(20, ["a", "b", "c", "d"], seed=1)
        scores = []
        for repeat in range(10):
            shuffled = LabeledEmbeddingSet(
                data.embeddings,
                rng.permutation(data.labels).tolist(),
                "null",
                data.class_names,
            )
            train_idx, test_idx = stratified_split(shuffled.labels, 0.2, seed=repeat)
            head = train_probe(
                LabeledEmbeddingSet(
                    shuffled.embeddings[train_idx],
                    [shuffled.labels[i] for i in train_idx],
                    "null",
                    shuffled.class_names,
                ),
                ProbeConfig(seed=repeat),
            )
            preds = predict(head, shuffled.embeddings[test_idx], shuffled.class_names)
            truth = [shuffled.labels[i] for i in test_idx]
            scores.append(macro_f1(preds, truth, shuffled.class_names))
        mean_score = float(np.mean(scores))
        assert 0.1 <= mean_score <= 0.4  # chance is about 0.25 for 4 classes

    def test_deterministic_per_seed(self):
        data = gaussian_blobs(10, ["a", "b"], seed=2)
        h1 = train_probe(data, ProbeConfig(seed=3))
        h2 = train_probe(data, ProbeConfig(seed=3))
        import torch

        for p1, p2 in zip(h1.parameters(), h2.parameters()):
            assert torch.equal(p1, p2)

    def test_linear_only_flag(self):
        data = gaussian_blobs(10, ["a", "b"], seed=4)
        head = train_probe(data, ProbeConfig(linear_only=True, seed=0))
        preds = predict(head, data.embeddings, data.class_names)
        assert preds == data.labels


class TestF1:
    def test_perfect_predictions(self):
        scores = f1_per_class(["a", "b", "a"], ["a", "b", "a"], ["a", "b"])
        assert scores == {"a": 1.0, "b": 1.0}

    def test_hand_computed_case(self):
        truth = ["A", "A", "B", "B"]
        preds = ["A", "B", "B", "B"]
        scores = f1_per_class(preds, truth, ["A", "B"])
        assert abs(scores["A"] - 2 / 3) < 1e-12
        assert abs(scores["B"] - 0.8) < 1e-12

    def test_absent_class_is_zero(self):
        scores = f1_per_class(["a", "a"], ["a", "a"], ["a", "ghost"])
        assert scores["ghost"] == 0.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            f1_per_class(["a"], ["a", "b"], ["a", "b"])

    def test_matches_brute_force_on_random_vectors(self):
        rng = np.random.default_rng(5)
        classes = ["c0", "c1", "c2", "c3", "c4"]
        for _ in range(200):
            n = int(rng.integers(1, 51))
            k = int(rng.integers(2, 6))
            truth = rng.choice(classes[:k], size=n).tolist()
            preds = rng.choice(classes[:k], size=n).tolist()
            scores = f1_per_class(preds, truth, classes[:k])
            for cls in classes[:k]:
                assert abs(scores[cls] - brute_force_f1(preds, truth, cls)) < 1e-12

    def test_macro_invariant_under_relabeling(self):
        rng = np.random.default_rng(6)
        truth = rng.choice(["a", "b", "c"], size=40).tolist()
        preds = rng.choice(["a", "b", "c"], size=40).tolist()
        base = macro_f1(preds, truth, ["a", "b", "c"])
        swap = {"a": "c", "b": "a", "c": "b"}
        assert abs(
            base
            - macro_f1([swap[p] for p in preds], [swap[t] for t in truth], ["a", "b", "c"])
        ) < 1e-12

    def test_confusion_matrix_totals(self):
        truth = ["a", "b", "a", "c"]
        preds = ["b", "b", "a", "c"]
        cm = confusion_matrix(preds, truth, ["a", "b", "c"])
        assert cm.sum() == 4
        assert cm[0, 1] == 1  # truth a predicted b


class TestRunBenchmark:
    def test_single_repeat_zero_std(self):
        data = gaussian_blobs(10, ["a", "b"], seed=7)
        reports = run_benchmark([data], n_repeats=1, base_seed=0,
                                probe_config=ProbeConfig(epochs=50))
        assert reports["toy"].machine_f1[1] == 0.0

    def test_oracle_perfect_features(self):
        # Class identity is literally a coordinate: F1 must be 1.0 +- 0.0.
        classes = ["a", "b", "c"]
        embeddings, labels = [], []
        rng = np.random.default_rng(8)
        for i, cls in enumerate(classes):
            block = rng.standard_normal((12, 8)) * 0.01
            block[:, i] += 100.0
            embeddings.append(block)
            labels += [cls] * 12
        data = LabeledEmbeddingSet(np.vstack(embeddings), labels, "oracle", classes)
        reports = run_benchmark([data], n_repeats=10, base_seed=1,
                                probe_config=ProbeConfig(epochs=100))
        mean, std = reports["oracle"].machine_f1
        assert mean == 1.0
        assert std == 0.0

    def test_aggregation_matches_brute_force(self):
        data = gaussian_blobs(8, ["a", "b"], spread=3.0, seed=9)
        reports = run_benchmark([data], n_repeats=5, base_seed=2,
                                probe_config=ProbeConfig(epochs=30))
        report = reports["toy"]
        assert len(report.repeat_macro_f1) == 5
        mean = float(np.mean(report.repeat_macro_f1))
        std = float(np.std(report.repeat_macro_f1, ddof=1))
        assert abs(report.machine_f1[0] - mean) < 1e-9
        assert abs(report.machine_f1[1] - std) < 1e-9
        for cls in report.class_names:
            m, s = report.per_class_f1[cls]
            assert abs(m - np.mean(report.repeat_class_f1[cls])) < 1e-9
            assert abs(s - np.std(report.repeat_class_f1[cls], ddof=1)) < 1e-9

    def test_mean_in_convex_hull(self):
        data = gaussian_blobs(8, ["a", "b"], spread=5.0, seed=10)
        report = run_benchmark([data], n_repeats=4, base_seed=3,
                               probe_config=ProbeConfig(epochs=30))["toy"]
        lo, hi = min(report.repeat_macro_f1), max(report.repeat_macro_f1)
        assert lo - 1e-12 <= report.machine_f1[0] <= hi + 1e-12

    def test_confusion_counts_all_test_predictions(self):
        data = gaussian_blobs(10, ["a", "b"], seed=11)
        n_repeats = 3
        report = run_benchmark([data], n_repeats=n_repeats, base_seed=4,
                               probe_config=ProbeConfig(epochs=30))["toy"]
        _, test_idx = stratified_split(data.labels, 0.2, seed=4)
        assert report.confusion.sum() == n_repeats * len(test_idx)

    def test_report_files(self, tmp_path):
        data = gaussian_blobs(8, ["a", "b"], seed=12)
        reports = run_benchmark([data], n_repeats=2, base_seed=5,
                                probe_config=ProbeConfig(epochs=20))
        write_reports(reports, tmp_path)
        report_csv = (tmp_path / "report.csv").read_text()
        assert report_csv.startswith("machine,class,f1_mean,f1_std")
        assert (tmp_path / "machine_summary.csv").exists()
        confusion = (tmp_path / "confusion_toy.csv").read_text().splitlines()
        assert confusion[0] == "truth\\pred,a,b"
        assert len(confusion) == 3


class TestLabeledEmbeddingSetValidation:
    def test_single_class_rejected(self):
        with pytest.raises(ConfigError):
            LabeledEmbeddingSet(np.zeros((4, 2)), ["a"] * 4, "m", ["a"])

    def test_label_count_mismatch(self):
        with pytest.raises(ConfigError):
            LabeledEmbeddingSet(np.zeros((4, 2)), ["a", "b"], "m", ["a", "b"])

    def test_unknown_label_rejected(self):
        with pytest.raises(ConfigError):
            LabeledEmbeddingSet(np.zeros((2, 2)), ["a", "zz"], "m", ["a", "b"])
