import math

import numpy as np
import pytest

from fdutil import fd_grad, rel_err
from gltbench import ifl, nn
from gltbench.datagen import GenConfig, generate
from gltbench.errors import ConfigError
from gltbench.splits import Split, make_train_glt, TRAIN_GLT, CLT


def toy_dataset(**kw):
    base = dict(n_classes=4, n_attributes=4, feat_dim=10, class_imbalance_ratio=4.0,
                samples_head=40, seed=5, noise_sigma=0.1)
    base.update(kw)
    return generate(GenConfig(**base))


def full_split(ds, protocol=CLT, name=TRAIN_GLT):
    return Split(name=name, sample_ids=np.arange(len(ds)), protocol_tag=protocol)


class TestConfidenceScores:
    def test_zero_model_uniform(self):
        p = nn.init_params(6, [4], 5, "relu", np.random.default_rng(0))
        for W, b in p.hidden:
            W[:] = 0
        p.w_cls[:] = 0
        X = np.random.default_rng(1).normal(size=(9, 6))
        y = np.random.default_rng(2).integers(5, size=9)
        s = ifl.confidence_scores(p, X, y)
        assert np.allclose(s, 0.2)

    def test_overfit_model_confident(self):
        rng = np.random.default_rng(3)
        X = np.vstack([rng.normal(size=(10, 4)) * 0.1 + [2, 0, 0, 0],
                       rng.normal(size=(10, 4)) * 0.1 - [2, 0, 0, 0]])
        y = np.repeat([0, 1], 10)
        p = nn.init_params(4, [16], 2, "relu", rng)
        state = nn.SgdState.like(p)
        for _ in range(300):
            _, logits, cache = nn.forward(p, X)
            _, d = nn.ce_loss_grad(logits, y)
            nn.sgd_step(p, nn.backward(p, cache, d), lr=0.5, momentum=0.9, state=state)
        s = ifl.confidence_scores(p, X, y)
        assert (s > 0.99).all()

    def test_range_open_interval(self):
        p = nn.init_params(3, [4], 3, "tanh", np.random.default_rng(4))
        X = np.random.default_rng(5).normal(size=(50, 3)) * 5
        y = np.random.default_rng(6).integers(3, size=50)
        s = ifl.confidence_scores(p, X, y)
        assert ((s > 0) & (s < 1)).all()


class TestConstructEnvironments:
    def make_inputs(self, sizes, score_fn=None, id_offset=0):
        ids, ys = [], []
        for k, n in enumerate(sizes):
            ids += list(range(id_offset + sum(sizes[:k]), id_offset + sum(sizes[:k]) + n))
            ys += [k] * n
        ids = np.array(ids)
        ys = np.array(ys)
        scores = (np.linspace(0.1, 0.9, len(ids)) if score_fn is None
                  else score_fn(ids, ys))
        return ids, ys, scores

    def test_pareto_80_20_exact(self):
        ids, ys, _ = self.make_inputs([10])
        scores = np.linspace(0.05, 0.95, 10)  # distinct, increasing with id
        envs = ifl.construct_environments(ids, ys, scores, ifl.EnvConfig(n_envs=2),
                                          np.random.default_rng(0))
        env2 = envs[1].per_class[0]
        assert len(env2) == 10
        low_pool = set(ids[:2].tolist())  # 2 lowest-confidence samples
        n_low = sum(1 for i in env2 if int(i) in low_pool)
        assert n_low == 8

    def test_all_tied_scores_lowest_ids_pool(self):
        ids, ys, _ = self.make_inputs([10])
        scores = np.full(10, 0.5)
        envs = ifl.construct_environments(ids, ys, scores, ifl.EnvConfig(n_envs=2),
                                          np.random.default_rng(1))
        env2 = envs[1].per_class[0]
        low_pool = set(ids[:2].tolist())  # tie-break: lowest ids
        n_low = sum(1 for i in env2 if int(i) in low_pool)
        assert n_low == 8
        high = [int(i) for i in env2 if int(i) not in low_pool]
        assert len(set(high)) == len(high)  # complement drawn without replacement

    def test_identity_environment_histogram(self):
        ids, ys, scores = self.make_inputs([7, 3, 5])
        envs = ifl.construct_environments(ids, ys, scores, ifl.EnvConfig(n_envs=3),
                                          np.random.default_rng(2))
        assert envs[0].tag == "iid"
        for k, n in enumerate([7, 3, 5]):
            assert np.array_equal(envs[0].per_class[k], ids[ys == k])
            for env in envs[1:]:
                assert len(env.per_class[k]) == n
                member = set(ids[ys == k].tolist())
                assert all(int(i) in member for i in env.per_class[k])

    @pytest.mark.parametrize("n", [2, 3, 5, 10, 37, 137])
    def test_slot_arithmetic_every_size(self, n):
        ids = np.arange(n)
        ys = np.zeros(n, dtype=np.int64)
        scores = np.random.default_rng(n).random(n)
        cfg = ifl.EnvConfig(n_envs=2)
        envs = ifl.construct_environments(ids, ys, scores, cfg,
                                          np.random.default_rng(3))
        env2 = envs[1].per_class[0]
        order = np.lexsort((ids, scores))
        low_pool = set(ids[order[:math.ceil(0.2 * n)]].tolist())
        n_low = sum(1 for i in env2 if int(i) in low_pool)
        assert len(env2) == n
        assert n_low == math.ceil(0.8 * n)

    def test_extra_environment_midpoint_mass(self):
        n = 20
        ids = np.arange(n)
        ys = np.zeros(n, dtype=np.int64)
        scores = np.linspace(0, 1, n)
        envs = ifl.construct_environments(ids, ys, scores, ifl.EnvConfig(n_envs=3),
                                          np.random.default_rng(4))
        env3 = envs[2].per_class[0]
        low_pool = set(range(math.ceil(0.2 * n)))
        n_low = sum(1 for i in env3 if int(i) in low_pool)
        assert n_low == math.ceil(0.5 * n)  # (0.8 + 0.2) / 2

    def test_singleton_class_degenerates_with_warning(self):
        ids, ys, scores = self.make_inputs([5, 1])
        with pytest.warns(UserWarning, match="class 1"):
            envs = ifl.construct_environments(ids, ys, scores, ifl.EnvConfig(n_envs=2),
                                              np.random.default_rng(5))
        assert np.array_equal(envs[1].per_class[1], ids[ys == 1])

    def test_deterministic_given_rng_seed(self):
        ids, ys, scores = self.make_inputs([12, 8])
        e1 = ifl.construct_environments(ids, ys, scores, ifl.EnvConfig(n_envs=2),
                                        np.random.default_rng(6))
        e2 = ifl.construct_environments(ids, ys, scores, ifl.EnvConfig(n_envs=2),
                                        np.random.default_rng(6))
        for a, b in zip(e1, e2):
            for k in a.per_class:
                assert np.array_equal(a.per_class[k], b.per_class[k])

    def test_invalid_fractions_rejected(self):
        with pytest.raises(ConfigError):
            ifl.EnvConfig(tail_fraction=0.9, tail_mass=0.8)


class TestCenters:
    def test_fixed_point(self):
        c = ifl.Centers(C=np.ones((2, 3)), eta=0.5)
        z = np.ones((4, 3))
        ifl.update_centers(c, z, np.zeros(4, dtype=int))
        assert np.allclose(c.C[0], 1.0)
        assert np.allclose(c.C[1], 1.0)  # absent class untouched

    def test_eta_one_jumps_to_batch_mean(self):
        c = ifl.Centers(C=np.zeros((2, 2)), eta=1.0)
        z = np.array([[2.0, 4.0], [4.0, 8.0]])
        ifl.update_centers(c, z, np.array([1, 1]))
        assert np.allclose(c.C[1], [3.0, 6.0])
        assert np.allclose(c.C[0], 0.0)

    def test_geometric_convergence(self):
        # closed form: C_t - m = (1 - eta)^t (C_0 - m)
        eta = 0.5
        c = ifl.Centers(C=np.array([[10.0]]), eta=eta)
        z = np.full((3, 1), 4.0)
        errs = []
        for _ in range(6):
            errs.append(abs(c.C[0, 0] - 4.0))
            ifl.update_centers(c, z, np.zeros(3, dtype=int))
        errs.append(abs(c.C[0, 0] - 4.0))
        for a, b in zip(errs, errs[1:]):
            assert b == pytest.approx((1 - eta) * a, rel=1e-12)

    def test_init_from_features(self):
        Z = np.array([[1.0, 1.0], [3.0, 3.0], [10.0, 0.0]])
        y = np.array([0, 0, 1])
        c = ifl.Centers.from_features(Z, y, 3)
        assert np.allclose(c.C[0], [2.0, 2.0])
        assert np.allclose(c.C[1], [10.0, 0.0])
        assert np.allclose(c.C[2], 0.0)


class TestIflLossGrad:
    def test_coincident_point(self):
        c = ifl.Centers(C=np.array([[1.0, 2.0]]))
        loss, dz = ifl.ifl_loss_grad(np.array([1.0, 2.0]), 0, c, "squared")
        assert loss == 0.0
        assert np.allclose(dz, 0.0)

    def test_hand_arithmetic_1d(self):
        c = ifl.Centers(C=np.array([[1.0]]))
        loss, dz = ifl.ifl_loss_grad(np.array([3.0]), 0, c, "squared")
        assert loss == pytest.approx(2.0)
        assert dz == pytest.approx(2.0)

    def test_fd_both_variants(self):
        rng = np.random.default_rng(7)
        c = ifl.Centers(C=rng.normal(size=(4, 6)))
        for variant in ("squared", "l2"):
            for _ in range(10):
                z = rng.normal(size=6)
                y = int(rng.integers(4))
                _, dz = ifl.ifl_loss_grad(z, y, c, variant)
                fd = fd_grad(lambda v: ifl.ifl_loss_grad(v, y, c, variant)[0], z.copy())
                assert rel_err(dz, fd) < 1e-4

    def test_batch_fd(self):
        rng = np.random.default_rng(8)
        c = ifl.Centers(C=rng.normal(size=(3, 4)))
        Z = rng.normal(size=(5, 4))
        y = rng.integers(3, size=5)
        _, dz = ifl.ifl_loss_grad(Z, y, c, "squared")
        fd = fd_grad(lambda v: ifl.ifl_loss_grad(v, y, c, "squared")[0], Z.copy())
        assert rel_err(dz, fd) < 1e-4


class TestTrainLoop:
    def cfg(self, method, **kw):
        base = dict(epochs=10, batch_size=16, lr0=0.1, momentum=0.9,
                    weight_decay=1e-4, seed=3, method=method, hidden_dim=16)
        base.update(kw)
        return nn.TrainConfig(**base)

    def env_cfg(self, **kw):
        base = dict(warmup_epochs=6, refresh_period_epochs=2)
        base.update(kw)
        return ifl.EnvConfig(**base)

    def test_alpha_zero_single_env_bit_identical_to_ce(self):
        ds = toy_dataset()
        split = make_train_glt(ds, [30, 20, 14, 10], np.random.default_rng(1))
        r_ce = ifl.train(ds, split, self.cfg("ce"), self.env_cfg())
        r_center = ifl.train(ds, split, self.cfg("center",
                                                 alpha_schedule=[(0.0, 0.0)]),
                             self.env_cfg())
        for a, b in zip(r_ce.params.flat_arrays(), r_center.params.flat_arrays()):
            assert np.array_equal(a, b)
        for ra, rb in zip(r_ce.log, r_center.log):
            assert ra["loss_cls"] == rb["loss_cls"]
            assert rb["loss_ifl"] == 0.0

    def test_center_ablation_engages_metric_loss(self):
        ds = toy_dataset()
        split = full_split(ds)
        res = ifl.train(ds, split, self.cfg("center"), self.env_cfg())
        post = [row for row in res.log if row["alpha"] > 0]
        assert post and any(row["loss_ifl"] > 0 for row in post)
        assert res.centers is not None

    def test_environment_refresh_determinism(self):
        ds = toy_dataset()
        split = full_split(ds)
        r1 = ifl.train(ds, split, self.cfg("ifl2"), self.env_cfg())
        r2 = ifl.train(ds, split, self.cfg("ifl2"), self.env_cfg())
        for a, b in zip(r1.params.flat_arrays(), r2.params.flat_arrays()):
            assert np.array_equal(a, b)
        for ea, eb in zip(r1.environments, r2.environments):
            assert ea.epoch_built == eb.epoch_built
            for k in ea.per_class:
                assert np.array_equal(ea.per_class[k], eb.per_class[k])

    def test_environment_sizes_match_split(self):
        ds = toy_dataset()
        split = full_split(ds)
        res = ifl.train(ds, split, self.cfg("ifl3"), self.env_cfg())
        counts = np.bincount(ds.y[split.sample_ids], minlength=4)
        assert len(res.environments) == 3
        for env in res.environments:
            for k in range(4):
                assert len(env.per_class[k]) == counts[k]

    def test_ce_loss_monotone_on_separable_data(self):
        for seed in range(5):
            ds = toy_dataset(noise_sigma=0.02, seed=60 + seed)
            split = full_split(ds)
            res = ifl.train(ds, split, self.cfg("ce", seed=seed, epochs=8),
                            self.env_cfg())
            losses = [row["loss_cls"] for row in res.log]
            assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))

    def test_blsoftmax_and_focal_methods_run(self):
        ds = toy_dataset()
        split = full_split(ds)
        for method in ("blsoftmax", "focal", "logitadj"):
            res = ifl.train(ds, split, self.cfg(method), self.env_cfg())
            assert len(res.log) == 10
            assert all(row["loss_ifl"] == 0.0 for row in res.log)

    def test_irm_method_runs_with_warmup(self):
        ds = toy_dataset()
        split = full_split(ds)
        res = ifl.train(ds, split, self.cfg("irm", irm_weight=0.5), self.env_cfg())
        assert len(res.log) == 10
        assert res.environments is not None and len(res.environments) == 2

    def test_crt_method_freezes_backbone(self):
        ds = toy_dataset()
        split = full_split(ds)
        r_ce = ifl.train(ds, split, self.cfg("ce"), self.env_cfg())
        r_crt = ifl.train(ds, split, self.cfg("crt", crt_epochs=3), self.env_cfg())
        # stage 1 is identical to ce; the backbone then stays bit-identical
        for (Wa, ba), (Wb, bb) in zip(r_ce.params.hidden, r_crt.params.hidden):
            assert np.array_equal(Wa, Wb)
            assert np.array_equal(ba, bb)
        assert not np.array_equal(r_ce.params.w_cls, r_crt.params.w_cls)

    def test_alpha_schedule_fractions_resolve(self):
        sched = [(0.0, 0.0), (0.5, 0.01), (0.75, 0.05)]
        assert ifl.resolve_alpha(sched, 0, 40) == 0.0
        assert ifl.resolve_alpha(sched, 19, 40) == 0.0
        assert ifl.resolve_alpha(sched, 20, 40) == 0.01
        assert ifl.resolve_alpha(sched, 30, 40) == 0.05

    def test_environment_dump(self, tmp_path):
        ds = toy_dataset()
        split = full_split(ds)
        res = ifl.train(ds, split, self.cfg("ifl2"), self.env_cfg())
        scores = ifl.confidence_scores(res.params,
                                       ds.X[split.sample_ids].astype(np.float64),
                                       ds.y[split.sample_ids])
        out = tmp_path / "envs.json"
        ifl.dump_environments(res.environments, scores, out)
        import json
        doc = json.loads(out.read_text())
        assert "confidence_quantiles" in doc
        assert len(doc["environments"]) == 2
