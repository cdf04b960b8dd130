import math

import numpy as np
import pytest

from lsdr import (
    Dataset,
    MissingnessMechanism,
    MixtureSpec,
    NuisancePair,
    confidence_interval,
    dr_estimate,
    influence_values,
    ipw_estimate,
    or_estimate,
    sample_iid,
)
from lsdr.errors import DomainError, InvalidFoldsError, VarianceUndefinedError
from lsdr.estimators import (
    EstimateReport,
    dr_contributions,
    influence_tangent_terms,
    normal_quantile,
)
from lsdr.montecarlo import corrupt_posterior_temperature
from lsdr.rng import substream
from lsdr.synth import bayes_posterior_matrix


def constant_posterior(C):
    def fn(X):
        return np.full((len(X), C), 1.0 / C)

    return fn


def make_dataset(y_visible, C=2, d=2, seed=0):
    y = np.asarray(y_visible)
    X = np.random.default_rng(seed).normal(0, 1, (len(y), d))
    return Dataset(X=X, y=y, num_classes=C)


class TestOrEstimate:
    def test_uniform_posterior(self):
        ds = make_dataset([0, 1, -1, -1])
        nuisance = NuisancePair(constant_posterior(2),
                                MissingnessMechanism(np.array([0.5, 0.5]), 0.5))
        rep = or_estimate(nuisance, ds)
        np.testing.assert_allclose(rep.p_combined, [0.5, 0.5], atol=1e-12)
        assert rep.influence_variance is None and rep.ci_half_widths is None

    def test_onehot_oracle_gives_empirical_frequencies(self):
        hidden = np.array([0, 1, 1, 1, 0, 1])
        ds = Dataset(X=np.arange(12, dtype=float).reshape(6, 2),
                     y=np.array([0, 1, -1, -1, -1, -1]), num_classes=2,
                     hidden_y=hidden)
        onehots = np.eye(2)[hidden]
        X_ref = ds.X.copy()

        def oracle(X):
            idx = [np.nonzero((X_ref == row).all(axis=1))[0][0] for row in X]
            return onehots[idx]

        nuisance = NuisancePair(oracle,
                                MissingnessMechanism(np.array([0.5, 0.5]), 0.5))
        rep = or_estimate(nuisance, ds)
        np.testing.assert_allclose(rep.raw, [2 / 6, 4 / 6], atol=1e-12)

    def test_oracle_posterior_close_to_truth(self):
        mix = MixtureSpec.orthogonal(3, 3, separation=4.0)
        p_l = np.array([0.5, 0.3, 0.2])
        p_u = np.array([0.2, 0.3, 0.5])
        ds = sample_iid(mix, p_l, p_u, 0.4, 100_000, substream(0, "mc/r=1"))
        p_y = ds.truth.p_marginal

        def posterior(X):
            return bayes_posterior_matrix(mix, p_y, X)

        rep = or_estimate(NuisancePair(posterior, ds.truth.mechanism()), ds)
        assert 0.5 * np.abs(rep.p_combined - p_y).sum() <= 0.01


class TestIpwEstimate:
    def test_hand_case_balanced(self):
        ds = make_dataset([0, 1, -1, -1])
        mech = MissingnessMechanism(np.array([0.5, 0.5]), 0.5)
        rep = ipw_estimate(NuisancePair(constant_posterior(2), mech), ds)
        np.testing.assert_allclose(rep.raw, [0.5, 0.5], atol=1e-12)

    def test_hand_case_unnormalized(self):
        ds = make_dataset([0, -1, -1, -1])
        mech = MissingnessMechanism(np.array([0.5, 0.5]), 0.25)
        rep = ipw_estimate(NuisancePair(constant_posterior(2), mech), ds)
        np.testing.assert_allclose(rep.raw, [0.5, 0.0], atol=1e-12)
        assert rep.raw.sum() == pytest.approx(0.5)
        np.testing.assert_allclose(rep.p_combined.sum(), 1.0)

    def test_fully_labeled_unit_propensity(self):
        ds = make_dataset([0, 1, 1, 0, 1], C=2)
        mech = MissingnessMechanism(np.array([1.0, 1.0]), 1.0)
        rep = ipw_estimate(NuisancePair(constant_posterior(2), mech), ds)
        np.testing.assert_allclose(rep.raw, [0.4, 0.6], atol=1e-12)

    def test_clip_events_counted(self):
        ds = make_dataset([0, 0, 1, -1])
        mech = MissingnessMechanism(np.array([1e-6, 0.5]), 0.75,
                                    clip_floor=1e-3)
        rep = ipw_estimate(NuisancePair(constant_posterior(2), mech), ds)
        assert rep.clip_events == 2


class TestDrEstimate:
    def test_collapses_to_frequencies_when_fully_labeled(self):
        ds = make_dataset([0, 1, 1, 0, 1, 1], C=2)
        mech = MissingnessMechanism(np.array([1.0, 1.0]), 1.0)
        rng = np.random.default_rng(1)

        def messy_posterior(X):
            P = rng.random((len(X), 2))
            return P / P.sum(axis=1, keepdims=True)

        rep = dr_estimate(NuisancePair(messy_posterior, mech), ds, 0)
        np.testing.assert_allclose(rep.raw, [1 / 3, 2 / 3], atol=1e-10)

    def test_unlabeled_row_contribution_is_posterior(self):
        ds = make_dataset([0, -1])
        mech = MissingnessMechanism(np.array([0.5, 0.5]), 0.5)

        def posterior(X):
            return np.tile([0.3, 0.7], (len(X), 1))

        contrib = dr_contributions(NuisancePair(posterior, mech), ds)
        np.testing.assert_allclose(contrib[1], [0.3, 0.7], atol=1e-15)

    def test_invalid_folds(self):
        ds = make_dataset([0, 1, -1, -1])
        mech = MissingnessMechanism(np.array([0.5, 0.5]), 0.5)
        with pytest.raises(InvalidFoldsError):
            dr_estimate(NuisancePair(constant_posterior(2), mech), ds, 1)

    def test_cross_fit_requires_fitter(self):
        ds = make_dataset([0, 1, -1, -1])
        with pytest.raises(DomainError):
            dr_estimate(None, ds, 2)

    def test_cross_fit_deterministic_and_fold_scoped(self):
        mix = MixtureSpec.orthogonal(2, 2, separation=4.0)
        ds = sample_iid(mix, [0.7, 0.3], [0.3, 0.7], 0.5, 400,
                        substream(5, "mc/r=2"))
        calls = []

        def fitter(subset):
            calls.append(subset.n)
            p_l = subset.labeled_prior()

            def posterior(X):
                return bayes_posterior_matrix(mix, [0.5, 0.5], X)

            return NuisancePair(posterior,
                                MissingnessMechanism.from_priors(
                                    p_l, p_l, subset.p_a1))

        rep1 = dr_estimate(None, ds, 2, fitter=fitter, seed=9)
        rep2 = dr_estimate(None, ds, 2, fitter=fitter, seed=9)
        np.testing.assert_array_equal(rep1.raw, rep2.raw)
        np.testing.assert_array_equal(rep1.influence_variance,
                                      rep2.influence_variance)
        assert rep1.cross_fit_folds == 2
        assert calls[:2] == [200, 200]  # trained on fold complements


class TestInfluenceValues:
    def _nuisance_and_ds(self, n=400, seed=3):
        mix = MixtureSpec.orthogonal(3, 3, separation=4.0)
        ds = sample_iid(mix, [0.5, 0.3, 0.2], [0.2, 0.3, 0.5], 0.4, n,
                        substream(seed, "mc/r=0"))
        p_y = ds.truth.p_marginal

        def posterior(X):
            return bayes_posterior_matrix(mix, p_y, X)

        return NuisancePair(posterior, ds.truth.mechanism()), ds

    def test_column_mean_identity(self):
        nuisance, ds = self._nuisance_and_ds()
        p_ref = np.array([0.3, 0.4, 0.3])
        phi = influence_values(nuisance, ds, p_ref)
        rep = dr_estimate(nuisance, ds, 0)
        np.testing.assert_allclose(phi.mean(axis=0) + p_ref, rep.raw,
                                   atol=1e-12)

    def test_fully_labeled_unit_propensity_mean_zero(self):
        ds = make_dataset([0, 1, 1, 0], C=2)
        mech = MissingnessMechanism(np.array([1.0, 1.0]), 1.0)
        nuisance = NuisancePair(constant_posterior(2), mech)
        phi = influence_values(nuisance, ds, [0.5, 0.5])
        np.testing.assert_allclose(phi.mean(axis=0), 0.0, atol=1e-12)

    def test_oracle_nuisances_clt_scale(self):
        nuisance, ds = self._nuisance_and_ds(n=10_000, seed=8)
        truth = ds.truth.p_marginal
        phi = influence_values(nuisance, ds, truth)
        v = phi.var(axis=0)
        bound = 3.0 * np.sqrt(v / ds.n)
        assert np.all(np.abs(phi.mean(axis=0)) <= bound)

    def test_tangent_decomposition_sums_to_phi(self):
        nuisance, ds = self._nuisance_and_ds()
        p_ref = ds.truth.p_marginal
        phi = influence_values(nuisance, ds, p_ref)
        t1, t2, t3 = influence_tangent_terms(nuisance, ds, p_ref,
                                             labels=ds.hidden_y)
        np.testing.assert_allclose(t1 + t2 + t3, phi, atol=1e-12)
        # visible-labels convention sums to the same phi
        u1, u2, u3 = influence_tangent_terms(nuisance, ds, p_ref)
        np.testing.assert_allclose(u1 + u2 + u3, phi, atol=1e-12)


class TestConfidenceInterval:
    def _report(self, raw, var, n):
        raw = np.asarray(raw, dtype=float)
        var = None if var is None else np.asarray(var, dtype=float)
        half = None
        if var is not None:
            half = normal_quantile(0.95) * np.sqrt(var / n)
        return EstimateReport(
            estimator="dr", raw=raw, p_combined=raw, p_unlabeled=raw,
            n_samples=n, p_labeled=raw, p_a1=0.5, influence_variance=var,
            ci_half_widths=half)

    def test_zero_variance_zero_width(self):
        rep = self._report([0.5, 0.5], [0.0, 0.0], 100)
        intervals = confidence_interval(rep)
        assert intervals == [(0.5, 0.5), (0.5, 0.5)]

    def test_normal_quantile_against_bisection_oracle(self):
        # independent oracle: invert the erf-based normal CDF by bisection
        def cdf(z):
            return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))

        lo, hi = 0.0, 10.0
        for _ in range(200):
            mid = (lo + hi) / 2
            if cdf(mid) < 0.975:
                lo = mid
            else:
                hi = mid
        assert normal_quantile(0.95) == pytest.approx((lo + hi) / 2, abs=1e-9)
        assert normal_quantile(0.95) == pytest.approx(1.95996, abs=1e-5)

    def test_halfwidth_scales_inverse_sqrt_n(self):
        rep1 = self._report([0.4], [0.09], 1000)
        rep2 = self._report([0.4], [0.09], 2000)
        (lo1, hi1), = confidence_interval(rep1)
        (lo2, hi2), = confidence_interval(rep2)
        assert (hi2 - lo2) == pytest.approx((hi1 - lo1) / math.sqrt(2.0),
                                            rel=1e-12)

    def test_missing_variance_rejected(self):
        rep = self._report([0.5], None, 100)
        with pytest.raises(VarianceUndefinedError):
            confidence_interval(rep)

    def test_too_few_samples_rejected(self):
        rep = self._report([0.5], [0.1], 1)
        with pytest.raises(VarianceUndefinedError):
            confidence_interval(rep)

    def test_level_validated(self):
        rep = self._report([0.5], [0.1], 50)
        with pytest.raises(DomainError):
            confidence_interval(rep, level=1.2)


class TestDoubleRobustnessMonteCarlo:
    """Small-scale versions of the bias invariants; the acceptance suite runs
    the full-size ones."""

    def _run(self, corrupt, sep, R=120, n=4000, seed=100):
        mix = MixtureSpec(3, 2, sep * np.array([[0.0, 0.0], [1.0, 0.23],
                                                [0.35, 1.08]]), 1.0)
        p_l = np.array([0.7, 0.2, 0.1])
        p_u = np.array([0.2, 0.3, 0.5])
        p_a1 = 0.2
        p_y = p_a1 * p_l + (1 - p_a1) * p_u
        pi_true = p_a1 * p_l / p_y
        rng_mult = substream(seed, "corruption")
        multipliers = rng_mult.uniform(0.5, 1.8, 3)  # arbitrary, per class
        errs = {"dr": [], "or": [], "ipw": []}
        for r in range(R):
            ds = sample_iid(mix, p_l, p_u, p_a1, n,
                            substream(seed, f"mc/r={r}"))

            def posterior(X):
                P = bayes_posterior_matrix(mix, p_y, X)
                if corrupt == "posterior":
                    P = corrupt_posterior_temperature(P, 3.0)
                return P

            pi = pi_true.copy()
            if corrupt == "propensity":
                pi = np.clip(pi * multipliers, 1e-3, 1.0)
            mech = MissingnessMechanism(np.clip(pi, 1e-3, 1.0), p_a1)
            nuisance = NuisancePair(posterior, mech)
            errs["dr"].append(dr_estimate(nuisance, ds, 0).raw - p_y)
            errs["or"].append(or_estimate(nuisance, ds).raw - p_y)
            errs["ipw"].append(ipw_estimate(nuisance, ds).raw - p_y)
        out = {}
        for k, v in errs.items():
            arr = np.array(v)
            out[k] = np.abs(arr.mean(axis=0)) / (arr.std(axis=0, ddof=1) /
                                                 math.sqrt(R))
        return out

    def test_oracle_propensity_arbitrary_posterior(self):
        # overlapping classes so the temperature corruption actually biases
        # the posterior average; the propensity side cancels it exactly
        z = self._run("posterior", sep=2.6)
        assert np.all(z["dr"] <= 3.0), f"dr z-scores {z['dr']}"
        assert np.max(z["or"]) > 5.0

    def test_oracle_posterior_arbitrary_propensity(self):
        # per-class (non-constant) corruption: the residual correction term
        # scales with the posterior overlap, so use well-separated classes
        z = self._run("propensity", sep=6.0)
        assert np.all(z["dr"] <= 3.0), f"dr z-scores {z['dr']}"
        assert np.max(z["ipw"]) > 5.0


class TestHiddenLabelIsolation:
    def test_estimates_ignore_hidden_fields(self, small_dataset):
        mech = small_dataset.truth.mechanism()
        nuisance = NuisancePair(constant_posterior(3), mech)
        with_hidden = dr_estimate(nuisance, small_dataset, 0)
        bare = dr_estimate(nuisance, small_dataset.without_hidden(), 0)
        np.testing.assert_array_equal(with_hidden.raw, bare.raw)
