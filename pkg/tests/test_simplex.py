import numpy as np
import pytest

from lsdr import project_to_simplex, recover_unlabeled_prior, top1_accuracy, tv_distance
from lsdr.errors import DimensionError, DomainError, NumericError
from lsdr.simplex import is_distribution, mix_priors


def random_simplex(rng, c):
    v = rng.random(c) + 1e-3
    return v / v.sum()


class TestTvDistance:
    def test_identity_is_zero(self):
        p = [0.3, 0.5, 0.2]
        assert tv_distance(p, p) == 0.0

    def test_hand_value(self):
        assert tv_distance([0.8, 0.2], [0.2, 0.8]) == pytest.approx(0.6, abs=1e-12)

    def test_disjoint_onehots(self):
        assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            tv_distance([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_metric_properties(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            c = rng.integers(2, 8)
            p, q, r = (random_simplex(rng, c) for _ in range(3))
            dpq = tv_distance(p, q)
            assert 0.0 <= dpq <= 1.0
            assert dpq == pytest.approx(tv_distance(q, p), abs=1e-15)
            assert dpq <= tv_distance(p, r) + tv_distance(r, q) + 1e-12
        p = random_simplex(rng, 5)
        assert tv_distance(p, p.copy()) == 0.0


class TestProjectToSimplex:
    def test_fixed_point_on_distribution(self):
        np.testing.assert_allclose(project_to_simplex([0.3, 0.7]), [0.3, 0.7],
                                   atol=1e-15)

    def test_hand_case(self):
        np.testing.assert_allclose(project_to_simplex([1.2, -0.2]), [1.0, 0.0],
                                   atol=1e-12)

    def test_symmetric_case(self):
        np.testing.assert_allclose(project_to_simplex([0.5, 0.5, 0.5]),
                                   np.full(3, 1 / 3), atol=1e-12)

    def test_matches_bruteforce_oracle_2d(self):
        # independent oracle: dense search over the 2-simplex
        grid = np.linspace(0.0, 1.0, 200001)
        candidates = np.stack([grid, 1.0 - grid], axis=1)
        rng = np.random.default_rng(3)
        for _ in range(10):
            v = rng.normal(0, 1.5, 2)
            d2 = ((candidates - v) ** 2).sum(axis=1)
            oracle = candidates[np.argmin(d2)]
            np.testing.assert_allclose(project_to_simplex(v), oracle, atol=1e-5)

    def test_output_is_distribution(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            c = rng.integers(2, 9)
            out = project_to_simplex(rng.normal(0, 2, c))
            assert is_distribution(out)

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        v = rng.normal(0, 2, 6)
        once = project_to_simplex(v)
        np.testing.assert_allclose(project_to_simplex(once), once, atol=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            project_to_simplex([np.nan, 0.5])


class TestRecoverUnlabeledPrior:
    def test_hand_case(self):
        out = recover_unlabeled_prior([0.5, 0.5], [0.8, 0.2], 0.5)
        np.testing.assert_allclose(out, [0.2, 0.8], atol=1e-12)

    def test_consistent_setting(self):
        p = np.array([0.8, 0.2])
        np.testing.assert_allclose(recover_unlabeled_prior(p, p, 0.5), p,
                                   atol=1e-12)

    def test_projection_case(self):
        out = recover_unlabeled_prior([0.3, 0.7], [0.8, 0.2], 0.5)
        np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)

    @pytest.mark.parametrize("p_a1", [0.0, 1.0, -0.2, 1.5])
    def test_domain_error(self, p_a1):
        with pytest.raises(DomainError):
            recover_unlabeled_prior([0.5, 0.5], [0.5, 0.5], p_a1)

    def test_round_trip_with_forward_mixture(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            c = rng.integers(2, 10)
            p_l = random_simplex(rng, c)
            p_u = random_simplex(rng, c)
            p_a1 = rng.uniform(0.05, 0.95)
            combined = mix_priors(p_l, p_u, p_a1)
            back = recover_unlabeled_prior(combined, p_l, p_a1)
            np.testing.assert_allclose(back, p_u, atol=1e-9)


class TestTop1Accuracy:
    def test_identical(self):
        assert top1_accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_disjoint(self):
        assert top1_accuracy([1, 1, 1], [2, 2, 2]) == 0.0

    def test_hand_count(self):
        assert top1_accuracy([0, 1, 2, 3], [0, 1, 2, 9]) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            top1_accuracy([], [])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            top1_accuracy([1], [1, 2])
