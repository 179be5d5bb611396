import numpy as np
import pytest

from gltbench import evaluate as ev
from gltbench import ifl, nn
from gltbench.datagen import Dataset, GenConfig, generate
from gltbench.splits import (CLT, GLT, Split, Strata, TEST_CBL, TRAIN_GLT,
                             make_train_glt, stratify)


class TestAccuracy:
    def test_all_correct(self):
        assert ev.accuracy([1, 2, 0], [1, 2, 0]) == 1.0

    def test_counting(self):
        assert ev.accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)

    def test_random_predictor_near_chance(self):
        rng = np.random.default_rng(0)
        K, n = 7, 200_000
        preds = rng.integers(K, size=n)
        labels = rng.integers(K, size=n)
        assert ev.accuracy(preds, labels) == pytest.approx(1 / K, abs=0.005)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        preds = rng.integers(3, size=50)
        labels = rng.integers(3, size=50)
        perm = rng.permutation(50)
        assert ev.accuracy(preds, labels) == ev.accuracy(preds[perm], labels[perm])


class TestPrecision:
    def test_hand_confusion_case(self):
        # preds [A,A,B], labels [A,B,B]: class A 1/2, class B 1/1 -> 0.75
        assert ev.mean_per_class_precision([0, 0, 1], [0, 1, 1], 2) == pytest.approx(0.75)

    def test_perfect_predictor(self):
        assert ev.mean_per_class_precision([0, 1, 2], [0, 1, 2], 3) == 1.0

    def test_collapsed_predictor_zero_rule(self):
        # everything predicted as class 0 on balanced labels: (0.5 + 0) / 2
        preds = [0, 0, 0, 0]
        labels = [0, 0, 1, 1]
        assert ev.mean_per_class_precision(preds, labels, 2) == pytest.approx(0.25)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        preds = rng.integers(4, size=60)
        labels = rng.integers(4, size=60)
        perm = rng.permutation(60)
        assert ev.mean_per_class_precision(preds, labels, 4) == \
            ev.mean_per_class_precision(preds[perm], labels[perm], 4)


def planted_dataset(counts, n_attrs=1):
    K = len(counts)
    y = np.concatenate([np.full(c, k) for k, c in enumerate(counts)]).astype(np.int64)
    n = len(y)
    X = np.zeros((n, 4), dtype=np.float32)
    return Dataset(X=X, y=y, attrs=np.zeros(n, dtype=np.int64), regime="single",
                   n_classes=K, n_attributes=n_attrs)


class TestStratifiedReport:
    def test_single_stratum_equals_unstratified(self):
        ds = planted_dataset([30, 30])
        split = Split(name=TEST_CBL, sample_ids=np.arange(60), protocol_tag=CLT)
        strata = Strata(class_stratum={0: "Medium_C", 1: "Medium_C"}, attr_stratum={})
        rng = np.random.default_rng(3)
        preds = rng.integers(2, size=60)
        rep = ev.stratified_report(preds, ds, split, strata)
        assert rep.cells["Medium_C"]["accuracy"] == rep.overall["accuracy"]
        assert rep.cells["Medium_C"]["precision"] == rep.overall["precision"]

    def test_partition_additivity(self):
        ds = planted_dataset([120, 50, 8])
        split = Split(name=TEST_CBL, sample_ids=np.arange(178), protocol_tag=CLT)
        train_split = Split(name=TRAIN_GLT, sample_ids=np.arange(178), protocol_tag=CLT)
        strata = stratify(ds, train_split, None)
        rng = np.random.default_rng(4)
        preds = rng.integers(3, size=178)
        rep = ev.stratified_report(preds, ds, split, strata)
        total_correct = sum(rep.cells[s]["accuracy"] * rep.cells[s]["n"]
                            for s in ("Many_C", "Medium_C", "Few_C"))
        assert total_correct == pytest.approx(rep.overall["accuracy"] * 178, abs=1e-9)

    def test_planted_head_tail_gap(self):
        ds = planted_dataset([100, 10])
        split = Split(name=TEST_CBL, sample_ids=np.arange(110), protocol_tag=CLT)
        strata = Strata(class_stratum={0: "Many_C", 1: "Few_C"}, attr_stratum={})
        preds = ds.y.copy()
        tail = np.flatnonzero(ds.y == 1)
        preds[tail[:8]] = 0  # tail mostly misread as head
        rep = ev.stratified_report(preds, ds, split, strata)
        assert rep.cells["Few_C"]["accuracy"] < rep.cells["Many_C"]["accuracy"]

    def test_attr_strata_cells(self):
        ds = planted_dataset([40])
        split = Split(name=TEST_CBL, sample_ids=np.arange(40), protocol_tag=GLT)
        clusters = {i: (0 if i < 20 else 1) for i in range(40)}
        strata = Strata(class_stratum={0: "Medium_C"},
                        attr_stratum={(0, 0): "Many_A", (0, 1): "Few_A"},
                        cluster_labels=clusters)
        preds = np.zeros(40, dtype=np.int64)
        preds[25:] = 1  # wrong on 15 of the Few_A samples
        rep = ev.stratified_report(preds, ds, split, strata)
        assert rep.cells["Many_A"]["accuracy"] == 1.0
        assert rep.cells["Few_A"]["accuracy"] == pytest.approx(5 / 20)

    def test_report_round_trip(self, tmp_path):
        ds = planted_dataset([10, 10])
        split = Split(name=TEST_CBL, sample_ids=np.arange(20), protocol_tag=CLT)
        rep = ev.stratified_report(np.zeros(20, dtype=np.int64), ds, split, None,
                                   diagnostics={"inter_env_center_distance": 0.25},
                                   provenance={"seed": 7})
        path = tmp_path / "r.json"
        rep.save(path)
        back = ev.Report.load(path)
        assert back.to_dict() == rep.to_dict()
        rep.save_csv(tmp_path / "r.csv")
        text = (tmp_path / "r.csv").read_text()
        assert "accuracy" in text and "Overall" in text


class TestCenterInvariance:
    def identity_params(self, D):
        return nn.ModelParams(hidden=[(np.eye(D), np.zeros(D))],
                              w_cls=np.zeros((D, 2)), b_cls=np.zeros(2),
                              activation="relu")

    def test_identical_environments_zero(self):
        rng = np.random.default_rng(5)
        X = np.abs(rng.normal(size=(20, 3))).astype(np.float32)
        ds = Dataset(X=X, y=np.zeros(20, dtype=np.int64),
                     attrs=np.zeros(20, dtype=np.int64), regime="single",
                     n_classes=1, n_attributes=1)
        env = ifl.Environment(tag="iid", per_class={0: np.arange(20)})
        env2 = ifl.Environment(tag="reversed", per_class={0: np.arange(20)})
        d = ev.center_invariance(self.identity_params(3), ds, [env, env2])
        assert d == pytest.approx(0.0, abs=1e-12)

    def test_constant_features_zero(self):
        X = np.full((12, 2), 3.0, dtype=np.float32)
        ds = Dataset(X=X, y=np.zeros(12, dtype=np.int64),
                     attrs=np.zeros(12, dtype=np.int64), regime="single",
                     n_classes=1, n_attributes=1)
        e1 = ifl.Environment(tag="iid", per_class={0: np.arange(6)})
        e2 = ifl.Environment(tag="reversed", per_class={0: np.arange(6, 12)})
        d = ev.center_invariance(self.identity_params(2), ds, [e1, e2])
        assert d == pytest.approx(0.0, abs=1e-12)

    def test_planted_mean_shift(self):
        delta = 0.75
        rng = np.random.default_rng(6)
        a = np.abs(rng.normal(size=4000)) * 0.01 + 1.0
        b = a + delta
        X = np.concatenate([a, b])[:, None].astype(np.float32)
        ds = Dataset(X=X, y=np.zeros(8000, dtype=np.int64),
                     attrs=np.zeros(8000, dtype=np.int64), regime="single",
                     n_classes=1, n_attributes=1)
        e1 = ifl.Environment(tag="iid", per_class={0: np.arange(4000)})
        e2 = ifl.Environment(tag="reversed", per_class={0: np.arange(4000, 8000)})
        d = ev.center_invariance(self.identity_params(1), ds, [e1, e2])
        assert d == pytest.approx(delta, abs=1e-6)


class TestConfidenceCenterCorrelation:
    def test_two_point_affine_relation_r_is_one(self):
        # two distinct feature points always lie on a line, so the relation
        # between confidence and center-cosine is exactly affine
        za = np.array([3.0, 1.0])
        zb = np.array([1.0, 2.5])
        X = np.vstack([np.tile(za, (3, 1)), np.tile(zb, (3, 1))]).astype(np.float64)
        y = np.zeros(6, dtype=np.int64)
        params = nn.ModelParams(hidden=[(np.eye(2), np.zeros(2))],
                                w_cls=np.array([[1.0, 0.0], [0.0, 1.0]]),
                                b_cls=np.zeros(2), activation="relu")
        r = ev.confidence_center_correlation(params, X, y)
        assert abs(r) == pytest.approx(1.0, abs=1e-9)
        # orientation: the point with higher confidence is also closer to the mean
        Z, logits, _ = nn.forward(params, X)
        P = nn.softmax(logits)
        m = Z.mean(axis=0)
        cos = (Z @ m) / (np.linalg.norm(Z, axis=1) * np.linalg.norm(m))
        expect_sign = np.sign(np.corrcoef(P[:, 0], cos)[0, 1])
        assert np.sign(r) == expect_sign

    def test_shuffled_pairing_near_zero(self):
        rng = np.random.default_rng(7)
        n = 1000
        X = rng.normal(size=(n, 6))
        y = rng.integers(3, size=n)
        params = nn.init_params(6, [8], 3, "tanh", rng)
        Z, logits, _ = nn.forward(params, X)
        P = nn.softmax(logits)
        p_gt = P[np.arange(n), y]
        means = np.stack([Z[y == k].mean(axis=0) for k in range(3)])
        m = means[y]
        cos = (Z * m).sum(axis=1) / (np.linalg.norm(Z, axis=1) * np.linalg.norm(m, axis=1))
        shuffled = cos[rng.permutation(n)]
        assert abs(ev.pearson(p_gt, shuffled)) < 0.1

    def test_trained_ce_baseline_positive_correlation(self):
        ds = generate(GenConfig(n_classes=4, n_attributes=6, feat_dim=12,
                                class_imbalance_ratio=4.0, samples_head=80,
                                seed=9, noise_sigma=0.15))
        split = make_train_glt(ds, [60, 38, 24, 15], np.random.default_rng(2))
        cfg = nn.TrainConfig(epochs=12, batch_size=32, lr0=0.1, momentum=0.9,
                             seed=1, method="ce", hidden_dim=16)
        res = ifl.train(ds, split, cfg, ifl.EnvConfig())
        X = ds.X[split.sample_ids].astype(np.float64)
        y = ds.y[split.sample_ids]
        r = ev.confidence_center_correlation(res.params, X, y)
        assert r > 0.5


class TestPearson:
    def test_exact_line(self):
        x = np.array([1.0, 2.0, 3.0])
        assert ev.pearson(x, 2 * x + 1) == pytest.approx(1.0)
        assert ev.pearson(x, -x) == pytest.approx(-1.0)

    def test_constant_input_returns_zero(self):
        assert ev.pearson(np.ones(5), np.arange(5)) == 0.0
