import hashlib

import numpy as np
import pytest
from scipy import stats

from gltbench import datagen
from gltbench.datagen import (Dataset, GenConfig, attr_base_profile,
                              build_attribute_conditional, build_class_prior,
                              default_attr_profile, draw_directions, generate,
                              synth_sample)
from gltbench.errors import ConfigError


def small_cfg(**kw):
    base = dict(n_classes=3, n_attributes=4, feat_dim=8,
                class_imbalance_ratio=4.0, samples_head=100, seed=11)
    base.update(kw)
    return GenConfig(**base)


class TestClassPrior:
    def test_ratio_one_is_uniform(self):
        assert build_class_prior(3, 1.0, "exponential", 100).tolist() == [100, 100, 100]

    def test_two_class_endpoints(self):
        assert build_class_prior(2, 4.0, "exponential", 100).tolist() == [100, 25]

    def test_geometric_interpolation(self):
        # r = 16^(-1/4) = 1/2, checked by hand
        assert build_class_prior(5, 16.0, "exponential", 160).tolist() == [160, 80, 40, 20, 10]

    def test_pareto_endpoints_and_monotone(self):
        counts = build_class_prior(10, 20.0, "pareto", 400)
        assert counts[0] == 400
        assert counts[-1] == 20
        assert (np.diff(counts) <= 0).all()

    def test_empty_tail_rejected(self):
        with pytest.raises(ConfigError):
            build_class_prior(4, 300.0, "exponential", 100)

    def test_single_class(self):
        assert build_class_prior(1, 1.0, "exponential", 50).tolist() == [50]


class TestAttributeConditional:
    def test_uniform_base_no_spurious(self):
        prof = np.full((2, 4), 0.25)
        cfg = small_cfg(n_classes=2, attr_profile=prof, spurious=None)
        cond = build_attribute_conditional(cfg)
        assert np.allclose(cond, 0.25)

    def test_group_masses_70_20_10(self):
        base = attr_base_profile(6)
        assert base[:2].sum() == pytest.approx(0.70, abs=1e-12)
        assert base[2:4].sum() == pytest.approx(0.20, abs=1e-12)
        assert base[4:].sum() == pytest.approx(0.10, abs=1e-12)

    def test_rows_stochastic_and_rotated(self):
        cond = default_attr_profile(5, 6)
        assert np.allclose(cond.sum(axis=1), 1.0)
        # pair (2p, 2p+1) rolls the base envelope by p and p + A/2
        base = attr_base_profile(6)
        assert np.allclose(cond[2], np.roll(base, 1))
        assert np.allclose(cond[3], np.roll(base, 4))

    def test_pair_profiles_anti_phase(self):
        cond = default_attr_profile(20, 12)
        # within a pair, the head attribute of one member is mid-tail for the other
        for p in range(10):
            even, odd = cond[2 * p], cond[2 * p + 1]
            assert odd.argmax() == (even.argmax() + 6) % 12

    def test_large_spurious_strength_concentrates(self):
        cfg = small_cfg(n_classes=2, n_attributes=4,
                        attr_profile=np.full((2, 4), 0.25), spurious=(0, 0, 1e9))
        cond = build_attribute_conditional(cfg)
        assert cond[0, 0] == pytest.approx(1.0, abs=1e-6)
        assert np.allclose(cond[1], 0.25)
        assert cond[0].sum() == pytest.approx(1.0)

    def test_moderate_spurious_renormalizes(self):
        cfg = small_cfg(n_classes=2, n_attributes=4,
                        attr_profile=np.full((2, 4), 0.25), spurious=(0, 1, 1.0))
        cond = build_attribute_conditional(cfg)
        # 0.25*(1+1) / (0.25*2 + 3*0.25) = 0.4
        assert cond[0, 1] == pytest.approx(0.4)
        assert cond[0].sum() == pytest.approx(1.0)


class TestSynthSample:
    def setup_method(self):
        rng = np.random.default_rng(0)
        dirs = draw_directions(7, 16, rng)
        self.mu, self.nu = dirs[:3], dirs[3:]

    def test_noiseless_is_exact_sum(self):
        rng = np.random.default_rng(1)
        x = synth_sample(self.mu, self.nu, 1, 2, 0.0, rng)
        assert np.allclose(x, self.mu[1] + self.nu[2], atol=1e-12)

    def test_multi_attribute_sum(self):
        rng = np.random.default_rng(1)
        x = synth_sample(self.mu, self.nu, 0, [1, 3], 0.0, rng)
        assert np.allclose(x, self.mu[0] + self.nu[1] + self.nu[3], atol=1e-12)

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(2)
        draws = np.stack([synth_sample(self.mu, self.nu, 2, 0, 0.1, rng)
                          for _ in range(10_000)])
        assert np.abs(draws.mean(axis=0) - (self.mu[2] + self.nu[0])).max() < 0.01

    def test_projection_onto_own_direction(self):
        rng = np.random.default_rng(3)
        x = synth_sample(self.mu, self.nu, 1, 0, 0.0, rng)
        assert x @ self.mu[1] == pytest.approx(1.0, abs=1e-12)
        assert x @ self.mu[0] == pytest.approx(0.0, abs=1e-12)


class TestDirections:
    def test_orthonormal_rows(self):
        dirs = draw_directions(10, 24, np.random.default_rng(5))
        assert np.allclose(dirs @ dirs.T, np.eye(10), atol=1e-10)

    def test_too_many_rows_rejected(self):
        with pytest.raises(ConfigError):
            draw_directions(10, 8, np.random.default_rng(5))


class TestGenerate:
    def test_determinism_same_seed(self):
        a = generate(small_cfg())
        b = generate(small_cfg())
        assert np.array_equal(a.X, b.X)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.attrs, b.attrs)

    def test_different_seed_differs(self):
        a = generate(small_cfg())
        b = generate(small_cfg(seed=12))
        assert not np.array_equal(a.X, b.X)

    def test_counts_are_exact(self):
        ds = generate(small_cfg(n_classes=2, class_imbalance_ratio=4.0, samples_head=100))
        assert [len(i) for i in ds.class_indices()] == [100, 25]

    def test_extra_per_class_adds_reserve(self):
        ds = generate(small_cfg(n_classes=2, class_imbalance_ratio=4.0,
                                samples_head=100, extra_per_class=10))
        assert [len(i) for i in ds.class_indices()] == [110, 35]

    def test_chi_square_against_conditional(self):
        cfg = small_cfg(n_classes=3, n_attributes=6, feat_dim=16,
                        class_imbalance_ratio=1.0, samples_head=10_000,
                        noise_sigma=0.0, seed=40)
        ds = generate(cfg)
        cond = build_attribute_conditional(cfg)
        for k, idx in enumerate(ds.class_indices()):
            freq = np.bincount(ds.attrs[idx], minlength=6)
            p = stats.chisquare(freq, cond[k] * len(idx)).pvalue
            assert p > 0.01

    def test_multi_regime_bernoulli_rates(self):
        cfg = small_cfg(regime="multi", n_classes=2, n_attributes=6, feat_dim=16,
                        class_imbalance_ratio=1.0, samples_head=8_000,
                        multi_mean=2.0, seed=41)
        ds = generate(cfg)
        cond = build_attribute_conditional(cfg)
        rates = np.minimum(cond * 2.0, 0.95)
        for k, idx in enumerate(ds.class_indices()):
            emp = ds.attrs[idx].mean(axis=0)
            assert np.abs(emp - rates[k]).max() < 0.03

    def test_noiseless_nearest_class_direction_is_perfect(self):
        # at the shipped dimensions, attribute/class cross-overlaps are far
        # too small to flip the nearest class direction
        cfg = small_cfg(n_classes=20, n_attributes=12, feat_dim=64,
                        class_imbalance_ratio=10.0, samples_head=100,
                        noise_sigma=0.0, seed=42)
        ds = generate(cfg)
        d2 = ((ds.X[:, None, :].astype(np.float64) - ds.class_dirs[None]) ** 2).sum(axis=2)
        assert np.array_equal(d2.argmin(axis=1), ds.y)

    def test_spurious_strength_monotone_frequency_ratio(self):
        ratios = []
        for s in (0.0, 2.0, 8.0):
            cfg = small_cfg(n_classes=4, n_attributes=6, feat_dim=12,
                            class_imbalance_ratio=1.0, samples_head=2_500,
                            spurious=(0, 3, s), seed=43)
            ds = generate(cfg)
            in_class = (ds.attrs[ds.y == 0] == 3).mean()
            out_class = (ds.attrs[ds.y != 0] == 3).mean()
            ratios.append(in_class / out_class)
        assert ratios[0] < ratios[1] < ratios[2]

    def test_feat_dim_too_small_rejected(self):
        with pytest.raises(ConfigError):
            small_cfg(feat_dim=6)  # K + A = 7


class TestGltdFormat:
    def test_round_trip_single(self, tmp_path):
        ds = generate(small_cfg())
        path = tmp_path / "d.gltd"
        ds.save(path)
        back = Dataset.load(path)
        assert np.array_equal(back.X, ds.X)
        assert np.array_equal(back.y, ds.y)
        assert np.array_equal(back.attrs, ds.attrs)
        assert back.regime == "single"
        assert (back.n_classes, back.n_attributes) == (3, 4)

    def test_round_trip_multi(self, tmp_path):
        ds = generate(small_cfg(regime="multi"))
        path = tmp_path / "d.gltd"
        ds.save(path)
        back = Dataset.load(path)
        assert np.array_equal(back.attrs, ds.attrs)
        assert back.regime == "multi"

    def test_magic_and_sha_determinism(self, tmp_path):
        p1, p2 = tmp_path / "a.gltd", tmp_path / "b.gltd"
        generate(small_cfg()).save(p1)
        generate(small_cfg()).save(p2)
        assert p1.read_bytes()[:4] == b"GLTD"
        assert hashlib.sha256(p1.read_bytes()).digest() == \
            hashlib.sha256(p2.read_bytes()).digest()

    def test_config_sidecar_restores_directions(self, tmp_path):
        cfg = small_cfg()
        ds = generate(cfg)
        gltd, meta = tmp_path / "d.gltd", tmp_path / "d.json"
        ds.save(gltd)
        import json
        meta.write_text(json.dumps(cfg.to_dict()))
        back = Dataset.load(gltd, config_path=meta)
        assert np.allclose(back.class_dirs, ds.class_dirs)
        assert np.allclose(back.attr_dirs, ds.attr_dirs)

    def test_not_a_gltd_file(self, tmp_path):
        bad = tmp_path / "bad.gltd"
        bad.write_bytes(b"not a dataset at all")
        with pytest.raises(ConfigError):
            Dataset.load(bad)


class TestConfigValidation:
    def test_missing_field_named(self):
        with pytest.raises(ConfigError, match="n_attributes"):
            GenConfig.from_dict({"n_classes": 3, "feat_dim": 8,
                                 "class_imbalance_ratio": 1.0,
                                 "samples_head": 10, "seed": 0})

    def test_unknown_field_rejected(self):
        d = small_cfg().to_dict()
        d["bogus"] = 1
        with pytest.raises(ConfigError, match="bogus"):
            GenConfig.from_dict(d)

    def test_row_sum_checked(self):
        prof = np.full((3, 4), 0.3)
        with pytest.raises(ConfigError, match="sum to 1"):
            small_cfg(attr_profile=prof)

    def test_round_trip_dict(self):
        cfg = small_cfg(spurious=(1, 2, 0.5))
        again = GenConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()
