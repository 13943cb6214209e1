import itertools

import numpy as np
import pytest

from homnet.data import ChromosomePair, ChromosomeSequence
from homnet.errors import DegenerateLength, EmptyInput, InvariantViolation, SingleClass
from homnet.evaluation import (
    EvalReport,
    auc_roc,
    confusion,
    dtw_distance,
    evaluate_scores,
    f1,
    lr_baseline,
    lr_train_accuracy,
    pair_features,
)
from homnet.synth import CorpusConfig, build_pretrain_corpus, make_templates


def auc_pairwise_oracle(scores, labels):
    """Exhaustive positive/negative comparison with half credit for ties."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0
               for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def dtw_path_oracle(x, y):
    """Minimum cost over every monotone warping path (exponential search)."""
    n, m = len(x), len(y)
    best = [np.inf]

    def walk(i, j, acc):
        acc += abs(x[i] - y[j])
        if acc >= best[0]:
            return
        if i == n - 1 and j == m - 1:
            best[0] = acc
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best[0]


def sequence(front, d=16):
    values = np.zeros((2, d), dtype=np.float32)
    values[:, :len(front)] = np.asarray(front, dtype=np.float32)
    return ChromosomeSequence(values=values, valid_len=len(front))


class TestAuc:
    def test_perfect_ranking(self):
        assert auc_roc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties_give_half(self):
        assert auc_roc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == 0.5

    def test_worked_example(self):
        assert auc_roc([0.8, 0.6, 0.4], [1, 0, 1]) == 0.5

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(2, 13))
            labels = rng.integers(0, 2, n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9], size=n)  # force ties
            assert auc_roc(scores, labels) == pytest.approx(
                auc_pairwise_oracle(scores, labels), abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.random(40)
        labels = rng.integers(0, 2, 40)
        labels[0], labels[1] = 0, 1
        base = auc_roc(scores, labels)
        assert auc_roc(np.exp(3 * scores), labels) == pytest.approx(base, abs=1e-12)

    def test_label_flip_complement(self):
        rng = np.random.default_rng(3)
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        labels[0], labels[1] = 0, 1
        assert auc_roc(scores, labels) + auc_roc(scores, 1 - labels) == pytest.approx(
            1.0, abs=1e-12)

    def test_single_class(self):
        with pytest.raises(SingleClass):
            auc_roc([0.1, 0.9], [1, 1])


class TestF1:
    def test_perfect(self):
        assert f1([0.9, 0.1, 0.8], [1, 0, 1]) == 1.0

    def test_half(self):
        # TP=1, FP=1, FN=1 -> 2/(2+1+1)
        assert f1([0.9, 0.9, 0.1], [1, 0, 1]) == 0.5

    def test_no_predicted_positives(self):
        assert f1([0.1, 0.2], [1, 0]) == 0.0

    def test_confusion_consistency(self):
        rng = np.random.default_rng(4)
        scores = rng.random(50)
        labels = rng.integers(0, 2, 50)
        tp, fp, tn, fn = confusion(scores, labels)
        assert tp + fp + tn + fn == 50
        denom = 2 * tp + fp + fn
        expect = 2 * tp / denom if denom else 0.0
        assert f1(scores, labels) == expect


class TestDtw:
    def test_identical_is_zero(self):
        x = np.random.default_rng(5).random(20)
        assert dtw_distance(x, x) == 0.0

    def test_worked_example(self):
        assert dtw_distance([1, 2, 3], [1, 3]) == 1.0

    def test_symmetric(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            x = rng.random(int(rng.integers(1, 15)))
            y = rng.random(int(rng.integers(1, 15)))
            assert dtw_distance(x, y) == pytest.approx(dtw_distance(y, x), abs=1e-12)

    def test_matches_exhaustive_path_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(150):
            x = rng.integers(0, 8, int(rng.integers(1, 7))).astype(float)
            y = rng.integers(0, 8, int(rng.integers(1, 7))).astype(float)
            assert dtw_distance(x, y) == pytest.approx(dtw_path_oracle(x, y), abs=1e-12)

    def test_zero_iff_equal(self):
        assert dtw_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert dtw_distance([1.0, 2.0], [1.0, 2.1]) > 0.0

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            dtw_distance([], [1.0])


class TestPairFeatures:
    def test_constant_sequence(self):
        pair = ChromosomePair(a=sequence([0.5] * 8), b=sequence([0.5] * 8))
        feats = pair_features(pair)
        assert feats.a_var == 0.0
        assert feats.a_on_peak == 0 and feats.a_off_peak == 0
        assert feats.covariance == 0.0
        assert feats.pearson_r == 0.0  # zero-variance guard
        assert feats.dtw_distance == 0.0

    def test_identical_nonconstant(self):
        vals = [0.1, 0.9, 0.2, 0.8, 0.3]
        pair = ChromosomePair(a=sequence(vals), b=sequence(vals))
        feats = pair_features(pair)
        assert feats.dtw_distance == 0.0
        assert feats.pearson_r == pytest.approx(1.0)

    def test_shifted_alternation_anticorrelates(self):
        a = [0.0, 1.0] * 6
        b = [1.0, 0.0] * 6
        feats = pair_features(ChromosomePair(a=sequence(a, d=16), b=sequence(b, d=16)))
        assert feats.pearson_r < 0.0
        assert feats.covariance < 0.0

    def test_peak_counts(self):
        # one sharp maximum and one sharp minimum, everything else flat-ish
        vals = [0.5, 0.5, 1.0, 0.5, 0.5, 0.0, 0.5, 0.5]
        feats = pair_features(ChromosomePair(a=sequence(vals), b=sequence(vals)))
        assert feats.a_on_peak == 1
        assert feats.a_off_peak == 1

    def test_degenerate_length(self):
        with pytest.raises(DegenerateLength):
            pair_features(ChromosomePair(a=sequence([0.5, 0.5]), b=sequence([0.5] * 4)))


class TestEvalReport:
    def test_counts_and_serialization(self, tmp_path):
        report = evaluate_scores(["a", "b", "c", "d"], [0.9, 0.8, 0.2, 0.4], [1, 0, 0, 1])
        assert report.tp + report.fp + report.tn + report.fn == 4
        obj = report.to_dict()
        assert set(obj) >= {"auc", "f1", "threshold", "confusion", "records"}
        csv_path = tmp_path / "scores.csv"
        report.write_csv(csv_path)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "record_id,score,label"
        assert len(lines) == 5

    def test_inconsistent_f1_rejected(self):
        with pytest.raises(InvariantViolation):
            EvalReport(auc=0.5, f1=0.9, threshold=0.5, tp=1, fp=1, tn=1, fn=1,
                       records=tuple())


def toy_separable_records(n=40, d=24, seed=0):
    """Identical pairs vs unrelated pairs: the DTW feature alone separates."""
    from homnet.data import BagRecord

    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        base = (rng.random(12) * 0.8 + 0.1).astype(np.float32)
        label = i % 2
        a = sequence(base.tolist(), d=d)
        if label == 0:
            b = sequence(base.tolist(), d=d)
        else:
            b = sequence((rng.random(12) * 0.8 + 0.1).astype(np.float32).tolist(), d=d)
        records.append(BagRecord(pairs=(ChromosomePair(a=a, b=b),), chrom_type=0,
                                 band_level=300, label=label, subject_id=f"s{i}",
                                 record_id=f"r{i}"))
    return records


@pytest.fixture(scope="module")
def lr_corpus():
    templates, table = make_templates(6)
    config = CorpusConfig(n_subjects=80, m=2, d=64, sigma=3.0, warp_amp=0.01)
    build = build_pretrain_corpus(templates, table, config, seed=21)
    return build.train, build.val


class TestLrBaseline:
    def test_learns_separable_data(self):
        records = toy_separable_records()
        acc = lr_train_accuracy(records, l2=0.0, epochs=3000, step=0.5)
        assert acc == 1.0

    def test_strong_l2_pushes_scores_to_half(self, lr_corpus):
        train, val = lr_corpus
        strong = lr_baseline(train, val, l2=15.0, epochs=2000, step=0.05)
        free = lr_baseline(train, val, l2=0.0, epochs=2000, step=0.05)
        strong_dev = np.abs([r.score - 0.5 for r in strong.records])
        free_dev = np.abs([r.score - 0.5 for r in free.records])
        assert strong_dev.max() < 0.05
        assert strong_dev.mean() < free_dev.mean()

    def test_single_class_rejected(self, lr_corpus):
        train, val = lr_corpus
        normals = [r for r in train if r.label == 0]
        with pytest.raises(SingleClass):
            lr_baseline(normals, val)

    def test_reports_bag_level_scores(self, lr_corpus):
        train, val = lr_corpus
        report = lr_baseline(train, val, epochs=300)
        assert len(report.records) == len(val)
        assert 0.0 <= report.auc <= 1.0
