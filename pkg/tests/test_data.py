import math

import numpy as np
import pytest

from homm.data import (
    CsvFormatError,
    LabeledDataset,
    ShiftSpec,
    gen_gaussian_mixture_pair,
    gen_two_moons_pair,
    load_features_csv,
    mixture_components,
    write_features_csv,
)


def same(a: LabeledDataset, b: LabeledDataset) -> bool:
    return a.features.tobytes() == b.features.tobytes() and a.labels.tobytes() == b.labels.tobytes()


class TestGaussianMixture:
    def test_shapes_and_labels(self):
        s, t = gen_gaussian_mixture_pair(ShiftSpec(class_count=4, samples_per_class=25))
        assert s.features.shape == t.features.shape == (100, 2)
        assert np.bincount(s.labels).tolist() == [25] * 4
        assert s.domain == "source" and t.domain == "target"

    def test_deterministic(self):
        spec = ShiftSpec(seed=3, rotation=0.3, translation=(1.0, -1.0))
        s1, t1 = gen_gaussian_mixture_pair(spec)
        s2, t2 = gen_gaussian_mixture_pair(spec)
        assert same(s1, s2) and same(t1, t2)

    def test_rotation_maps_means(self):
        spec = ShiftSpec(rotation=math.pi / 2, translation=(0.5, 0.0), scale=2.0)
        means, covs = mixture_components(spec)
        # anisotropic components: covariances are not multiples of the identity
        assert not np.allclose(covs[0], covs[0][0, 0] * np.eye(2))
        rotated = spec.apply(means)
        for m, r in zip(means, rotated):
            np.testing.assert_allclose(r, 2.0 * np.array([-m[1], m[0]]) + [0.5, 0.0],
                                       atol=1e-12)

    def test_target_means_follow_shift(self):
        spec = ShiftSpec(rotation=math.pi / 2, samples_per_class=4000, noise_std=0.1, seed=2)
        s, t = gen_gaussian_mixture_pair(spec)
        expected = spec.apply(mixture_components(spec)[0])
        for k in range(3):
            got = t.features[t.labels == k].mean(axis=0)
            np.testing.assert_allclose(got, expected[k], atol=4 * 0.1 / math.sqrt(4000))

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_zero_shift_class_means_close(self, seed):
        spec = ShiftSpec(seed=seed, samples_per_class=500, noise_std=0.3)
        s, t = gen_gaussian_mixture_pair(spec)
        bound = 4 * spec.noise_std / math.sqrt(spec.samples_per_class)
        for k in range(3):
            gap = s.features[s.labels == k].mean(0) - t.features[t.labels == k].mean(0)
            assert np.all(np.abs(gap) <= bound)

    def test_higher_dimensions(self):
        s, t = gen_gaussian_mixture_pair(ShiftSpec(translation=(0, 0, 1.0), samples_per_class=5))
        assert s.features.shape == (15, 3)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            ShiftSpec(scale=0)
        with pytest.raises(ValueError):
            ShiftSpec(noise_std=-1)
        with pytest.raises(ValueError):
            gen_gaussian_mixture_pair(ShiftSpec(class_count=1))


class TestTwoMoons:
    def test_counts_balanced(self):
        s, t = gen_two_moons_pair(ShiftSpec(class_count=2), n_samples=101)
        assert len(s) == len(t) == 101
        assert abs(np.bincount(s.labels)[0] - np.bincount(s.labels)[1]) <= 1

    def test_zero_rotation_same_distribution(self):
        s, t = gen_two_moons_pair(ShiftSpec(class_count=2, samples_per_class=3000, noise_std=0.1))
        for k in (0, 1):
            np.testing.assert_allclose(s.features[s.labels == k].mean(0),
                                       t.features[t.labels == k].mean(0), atol=0.03)

    def test_deterministic(self):
        spec = ShiftSpec(class_count=2, seed=3, rotation=0.5)
        a, b = gen_two_moons_pair(spec), gen_two_moons_pair(spec)
        assert same(a[0], b[0]) and same(a[1], b[1])

    def test_needs_two_classes(self):
        with pytest.raises(ValueError, match="2 classes"):
            gen_two_moons_pair(ShiftSpec(class_count=3))


class TestCsv:
    def test_labelled(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("f0,f1,label\n0.1,0.2,0\n")
        ds = load_features_csv(path)
        np.testing.assert_array_equal(ds.features, [[0.1, 0.2]])
        np.testing.assert_array_equal(ds.labels, [0])

    def test_unlabelled_is_target(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("f0,f1\n0.1,0.2\n0.3,0.4\n")
        ds = load_features_csv(path)
        assert ds.labels is None and ds.domain == "target"
        with pytest.raises(CsvFormatError, match="label"):
            load_features_csv(path, "source")

    def test_bad_field_line_number(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("f0,f1,label\n0.1,0.2,0\n0.3,abc,1\n")
        with pytest.raises(CsvFormatError, match="line 3"):
            load_features_csv(path)

    def test_inconsistent_width(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("f0,f1\n0.1,0.2\n0.3\n")
        with pytest.raises(CsvFormatError, match="line 3.*expected 2 fields"):
            load_features_csv(path)

    def test_round_trip(self, tmp_path):
        s, _ = gen_gaussian_mixture_pair(ShiftSpec(samples_per_class=20, seed=5))
        path = tmp_path / "s.csv"
        write_features_csv(s, path)
        assert same(load_features_csv(path), s)

    def test_unlabeled_strips(self):
        s, _ = gen_gaussian_mixture_pair(ShiftSpec(samples_per_class=3))
        stripped = s.unlabeled()
        assert stripped.labels is None and stripped.domain == "target"
        assert s.labels is not None
