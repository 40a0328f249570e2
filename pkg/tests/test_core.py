import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedreplay.core import (
    ClassHistogram,
    Dataset,
    FederationConfig,
    LabeledSample,
    LayerShape,
    ModelParams,
    ShapeMismatchError,
    ValidationError,
    derive_seed,
    largest_remainder_round,
    param_axpy,
    param_l2_norm,
    seeded_rng,
)

from ._oracles import compensated_l2_norm

SCALAR_SHAPES = (LayerShape(rows=1, cols=1, bias=0),)


def vec(values) -> ModelParams:
    values = np.asarray(values, dtype=np.float64)
    return ModelParams(values, (LayerShape(rows=values.size, cols=1, bias=0),))


class TestParamAxpy:
    def test_alpha_zero_is_identity(self):
        x = vec([1.0, -2.0, 3.0])
        y = vec([4.0, 5.0, 6.0])
        out = param_axpy(0.0, x, y)
        np.testing.assert_array_equal(out.values, y.values)

    def test_negation_cancels(self):
        y = vec([1.5, -0.5, 2.0])
        x = vec(-y.values)
        out = param_axpy(1.0, x, y)
        np.testing.assert_array_equal(out.values, np.zeros(3))

    def test_direct_arithmetic(self):
        out = param_axpy(2.0, vec([1.0, 2.0]), vec([3.0, 4.0]))
        np.testing.assert_array_equal(out.values, [5.0, 8.0])

    def test_inputs_unmodified(self):
        x, y = vec([1.0, 1.0]), vec([2.0, 2.0])
        param_axpy(3.0, x, y)
        np.testing.assert_array_equal(x.values, [1.0, 1.0])
        np.testing.assert_array_equal(y.values, [2.0, 2.0])

    def test_shape_mismatch_names_both(self):
        x = vec([1.0, 2.0])
        y = vec([1.0, 2.0, 3.0])
        with pytest.raises(ShapeMismatchError) as exc:
            param_axpy(1.0, x, y)
        assert "2" in str(exc.value) and "3" in str(exc.value)

    @settings(max_examples=50, deadline=None)
    @given(
        a=st.floats(-1e3, 1e3),
        b=st.floats(-1e3, 1e3),
        data=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8),
    )
    def test_linearity(self, a, b, data):
        x = vec(data)
        y = vec(np.ones(len(data)))
        lhs = param_axpy(a + b, x, y)
        rhs = param_axpy(a, x, param_axpy(b, x, y))
        np.testing.assert_allclose(lhs.values, rhs.values, rtol=1e-12, atol=1e-9)


class TestParamL2Norm:
    def test_zero_vector(self):
        assert param_l2_norm(vec(np.zeros(5))) == 0.0

    def test_three_four_five(self):
        assert param_l2_norm(vec([3.0, 4.0])) == 5.0

    def test_matches_compensated_summation_oracle(self):
        rng = np.random.default_rng(7)
        values = rng.normal(size=100)
        expected = compensated_l2_norm(values)
        got = param_l2_norm(vec(values))
        assert abs(got - expected) <= 1e-12 * expected

    def test_zero_iff_all_zero(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            values = rng.normal(size=6)
            assert param_l2_norm(vec(values)) > 0.0
        assert param_l2_norm(vec(np.zeros(6))) == 0.0

    def test_non_finite_entry_named(self):
        bad = object.__new__(ModelParams)
        object.__setattr__(bad, "values", np.array([0.0, np.inf, 1.0]))
        object.__setattr__(bad, "shapes", (LayerShape(3, 1, 0),))
        with pytest.raises(ValidationError, match="index 1"):
            param_l2_norm(bad)


class TestModelParams:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            ModelParams(np.zeros(3), (LayerShape(2, 1, 0),))

    def test_non_finite_rejected_with_index(self):
        with pytest.raises(ValidationError, match="index 2"):
            ModelParams(np.array([0.0, 1.0, np.nan]), (LayerShape(3, 1, 0),))

    def test_values_frozen(self):
        p = vec([1.0, 2.0])
        with pytest.raises(ValueError):
            p.values[0] = 9.0

    def test_layer_arrays_layout(self):
        shapes = (LayerShape(2, 3, 3), LayerShape(3, 1, 1))
        p = ModelParams(np.arange(13, dtype=float), shapes)
        (w0, b0), (w1, b1) = p.layer_arrays()
        np.testing.assert_array_equal(w0, [[0, 1, 2], [3, 4, 5]])
        np.testing.assert_array_equal(b0, [6, 7, 8])
        np.testing.assert_array_equal(w1, [[9], [10], [11]])
        np.testing.assert_array_equal(b1, [12])


class TestHistogramAndDataset:
    def make_dataset(self):
        rng = np.random.default_rng(0)
        samples = []
        labels = [0, 0, 1, 2, 2, 2]
        for uid, label in enumerate(labels):
            samples.append(LabeledSample(uid=uid, features=rng.normal(size=4), label=label))
        return Dataset(tuple(samples), num_classes=3, feature_dim=4)

    def test_histogram_matches_brute_force_recount(self):
        ds = self.make_dataset()
        hist = ds.class_histogram()
        recount = {}
        for s in ds.samples:
            recount[s.label] = recount.get(s.label, 0) + 1
        assert dict(hist.counts) == recount
        assert hist.total == len(ds)

    def test_duplicate_uid_rejected(self):
        s = LabeledSample(uid=1, features=np.zeros(2), label=0)
        with pytest.raises(ValidationError, match="duplicate uid"):
            Dataset((s, s), num_classes=1, feature_dim=2)

    def test_label_out_of_range_rejected(self):
        s = LabeledSample(uid=0, features=np.zeros(2), label=5)
        with pytest.raises(ValidationError):
            Dataset((s,), num_classes=3, feature_dim=2)

    def test_feature_dim_mismatch_rejected(self):
        s = LabeledSample(uid=0, features=np.zeros(3), label=0)
        with pytest.raises(ValidationError):
            Dataset((s,), num_classes=1, feature_dim=2)

    def test_negative_count_rejected(self):
        with pytest.raises(ValidationError):
            ClassHistogram({0: -1})


class TestSeeding:
    def test_derive_seed_is_stable(self):
        assert derive_seed(1, "x", 2) == derive_seed(1, "x", 2)

    def test_different_tags_differ(self):
        assert derive_seed(1, "a") != derive_seed(1, "b")
        assert derive_seed(1, "a") != derive_seed(2, "a")

    def test_rng_streams_reproducible(self):
        a = seeded_rng(3, "t").normal(size=5)
        b = seeded_rng(3, "t").normal(size=5)
        np.testing.assert_array_equal(a, b)


class TestLargestRemainder:
    def test_exact_split(self):
        np.testing.assert_array_equal(largest_remainder_round([3.0, 1.0], 40), [30, 10])

    def test_total_preserved(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            k = int(rng.integers(1, 6))
            weights = rng.random(k)
            total = int(rng.integers(0, 50))
            quotas = largest_remainder_round(weights, total)
            assert quotas.sum() == total
            assert (quotas >= 0).all()

    def test_zero_weights_split_equally(self):
        np.testing.assert_array_equal(largest_remainder_round([0.0, 0.0], 4), [2, 2])

    def test_tie_breaks_by_ascending_index(self):
        np.testing.assert_array_equal(largest_remainder_round([1.0, 1.0], 3), [2, 1])


class TestFederationConfig:
    def test_defaults_valid(self):
        FederationConfig()

    def test_m_min_above_m_max_rejected(self):
        with pytest.raises(ValidationError, match="m_min"):
            FederationConfig(m_min=500, m_max=400)

    def test_pool_below_total_m_min_rejected(self):
        with pytest.raises(ValidationError, match="m_min"):
            FederationConfig(m_min=300, pool=1200, num_clients=5)

    def test_momentum_bounds_strict(self):
        with pytest.raises(ValidationError):
            FederationConfig(momentum=1.0)
        with pytest.raises(ValidationError):
            FederationConfig(momentum=0.0)

    def test_zero_pool_allowed_for_ablation(self):
        assert FederationConfig(pool=0).pool == 0
