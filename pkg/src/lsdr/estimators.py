"""Class-prior estimators: outcome regression, inverse probability weighting
and the doubly robust combination, with influence-function variances,
confidence intervals and optional cross-fitting.

The doubly robust per-sample contribution for class c is

    posterior_c(x_i) + 1(a_i = 1) / propensity(y_i) * (1(y_i = c) - posterior_c(x_i))

whose mean estimates the combined prior P(Y=c). Confidence intervals use the
raw (unprojected) estimate, since the asymptotic normality statement concerns
the unconstrained average; projection onto the simplex is applied only where
a probability vector is needed downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable, Optional

import numpy as np

from .data import Dataset, MissingnessMechanism
from .errors import DomainError, InvalidFoldsError, VarianceUndefinedError
from .rng import substream
from .simplex import project_to_simplex, recover_unlabeled_prior
from .validation import check_distribution, check_open_unit

DEFAULT_CI_LEVEL = 0.95


@dataclass(frozen=True)
class NuisancePair:
    """The two learned components the estimators consume.

    ``posterior_fn`` maps an (n, d) feature matrix to (n, C) posterior rows
    for the combined data distribution; ``mechanism`` supplies the clipped
    per-class labeling propensity.
    """

    posterior_fn: Callable[[np.ndarray], np.ndarray]
    mechanism: MissingnessMechanism

    def posterior(self, X) -> np.ndarray:
        P = np.asarray(self.posterior_fn(X), dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != len(X):
            raise DomainError("posterior_fn must return one row per sample")
        return P


@dataclass(frozen=True)
class EstimateReport:
    """A class-prior estimate with its diagnostics."""

    estimator: str
    raw: np.ndarray
    p_combined: np.ndarray
    p_unlabeled: np.ndarray
    n_samples: int
    p_labeled: np.ndarray
    p_a1: float
    influence_variance: Optional[np.ndarray] = None
    ci_half_widths: Optional[np.ndarray] = None
    ci_level: float = DEFAULT_CI_LEVEL
    cross_fit_folds: int = 0
    clip_events: int = 0
    extras: dict = field(default_factory=dict)


def normal_quantile(level: float) -> float:
    """Two-sided normal critical value, e.g. 1.95996 at level 0.95."""
    level = check_open_unit(level, "level")
    return NormalDist().inv_cdf(0.5 + level / 2.0)


def _finalize(estimator, raw, dataset, *, variance=None, level=DEFAULT_CI_LEVEL,
              folds=0, clip_events=0, extras=None) -> EstimateReport:
    raw = np.asarray(raw, dtype=np.float64)
    p_combined = project_to_simplex(raw)
    p_labeled = dataset.labeled_prior()
    p_a1 = dataset.p_a1
    if 0.0 < p_a1 < 1.0:
        p_unlabeled = recover_unlabeled_prior(p_combined, p_labeled, p_a1)
    else:
        p_unlabeled = p_combined.copy()
    half = None
    if variance is not None:
        variance = np.asarray(variance, dtype=np.float64)
        half = normal_quantile(level) * np.sqrt(variance / dataset.n)
    return EstimateReport(
        estimator=estimator, raw=raw, p_combined=p_combined,
        p_unlabeled=p_unlabeled, n_samples=dataset.n, p_labeled=p_labeled,
        p_a1=p_a1, influence_variance=variance, ci_half_widths=half,
        ci_level=level, cross_fit_folds=folds, clip_events=int(clip_events),
        extras=extras or {},
    )


def or_estimate(nuisance: NuisancePair, dataset: Dataset) -> EstimateReport:
    """Outcome regression: the average of the posterior over all rows."""
    ds = dataset.without_hidden()
    post = nuisance.posterior(ds.X)
    return _finalize("or", post.mean(axis=0), ds)


def _ipw_raw(dataset: Dataset, mechanism: MissingnessMechanism):
    lab = dataset.labeled_mask
    y_lab = dataset.y[lab]
    pi = mechanism.clipped
    raw = np.zeros(dataset.num_classes)
    np.add.at(raw, y_lab, 1.0 / pi[y_lab])
    clip_events = int(mechanism.clipped_classes[y_lab].sum())
    return raw / dataset.n, clip_events


def ipw_estimate(nuisance: NuisancePair, dataset: Dataset) -> EstimateReport:
    """Inverse probability weighting of the observed labels.

    The raw vector need not sum to one; the projected ``p_combined`` does.
    """
    ds = dataset.without_hidden()
    raw, clip_events = _ipw_raw(ds, nuisance.mechanism)
    return _finalize("ipw", raw, ds, clip_events=clip_events)


def dr_contributions(nuisance: NuisancePair, dataset: Dataset) -> np.ndarray:
    """Per-sample doubly robust contribution rows (n, C)."""
    ds = dataset
    post = nuisance.posterior(ds.X)
    contrib = post.copy()
    lab = ds.labeled_mask
    y_lab = ds.y[lab]
    pi = nuisance.mechanism.clipped
    onehot = np.zeros((int(lab.sum()), ds.num_classes))
    onehot[np.arange(len(y_lab)), y_lab] = 1.0
    contrib[lab] += (onehot - post[lab]) / pi[y_lab][:, None]
    return contrib


def dr_estimate(nuisance: Optional[NuisancePair], dataset: Dataset,
                cross_fit: int = 0, *, fitter=None, seed: int = 0,
                level: float = DEFAULT_CI_LEVEL) -> EstimateReport:
    """Doubly robust estimate of the combined class prior.

    With ``cross_fit=0`` the supplied nuisance is used directly. With
    ``cross_fit=K >= 2``, ``fitter(dataset_subset) -> NuisancePair`` is
    retrained on each fold's complement and evaluated on the held-out fold;
    fold estimates are averaged and the influence variance is pooled over
    all per-sample contributions. ``cross_fit=1`` is rejected.
    """
    ds = dataset.without_hidden()
    if cross_fit == 0:
        if nuisance is None:
            raise DomainError("cross_fit=0 requires an externally supplied nuisance")
        contrib = dr_contributions(nuisance, ds)
        clip_events = _clip_events(nuisance.mechanism, ds)
        folds = 0
    elif cross_fit >= 2:
        if fitter is None:
            raise DomainError("cross-fitting requires a nuisance fitter")
        contrib = np.empty((ds.n, ds.num_classes))
        clip_events = 0
        rng = substream(seed, f"crossfit/K={cross_fit}")
        perm = rng.permutation(ds.n)
        for fold_idx in np.array_split(perm, cross_fit):
            train_idx = np.setdiff1d(perm, fold_idx, assume_unique=True)
            pair = fitter(ds.select(train_idx))
            fold_ds = ds.select(fold_idx)
            contrib[fold_idx] = dr_contributions(pair, fold_ds)
            clip_events += _clip_events(pair.mechanism, fold_ds)
        folds = cross_fit
    else:
        raise InvalidFoldsError(f"cross_fit must be 0 or >= 2, got {cross_fit}")
    raw = contrib.mean(axis=0)
    variance = contrib.var(axis=0)  # plug-in, no dof correction
    return _finalize("dr", raw, ds, variance=variance, level=level,
                     folds=folds, clip_events=clip_events)


def _clip_events(mechanism: MissingnessMechanism, dataset: Dataset) -> int:
    lab = dataset.labeled_mask
    return int(mechanism.clipped_classes[dataset.y[lab]].sum())


def influence_values(nuisance: NuisancePair, dataset: Dataset,
                     p_reference) -> np.ndarray:
    """Influence-function matrix phi with column means = dr raw - p_reference."""
    p_ref = check_distribution(p_reference, "p_reference")
    contrib = dr_contributions(nuisance, dataset.without_hidden())
    return contrib - p_ref[None, :]


def influence_tangent_terms(nuisance: NuisancePair, dataset: Dataset,
                            p_reference, labels=None):
    """The three orthogonal tangent-space components of phi.

    Term 1 depends on X only, term 2 carries the centered inverse-propensity
    weight, term 3 is the label residual. The terms sum to phi exactly; the
    label-dependent pieces cancel on unlabeled rows, so any ``labels`` vector
    consistent with the visible ones yields the same sum. Pass the hidden
    ground-truth labels to evaluate the individual terms faithfully.
    """
    ds = dataset.without_hidden()
    p_ref = check_distribution(p_reference, "p_reference")
    post = nuisance.posterior(ds.X)
    lab = ds.labeled_mask
    pi = nuisance.mechanism.clipped
    n, C = ds.n, ds.num_classes
    onehot = np.zeros((n, C))
    if labels is None:
        y_lab = ds.y[lab]
        onehot[np.nonzero(lab)[0], y_lab] = 1.0
    else:
        labels = np.asarray(labels)
        if np.any(labels[lab] != ds.y[lab]):
            raise DomainError("labels disagree with visible labels")
        onehot[np.arange(n), labels] = 1.0
    weight = np.zeros(n)
    weight[lab] = 1.0 / pi[ds.y[lab]]
    term1 = post - p_ref[None, :]
    term2 = (weight - 1.0)[:, None] * (onehot - post)
    term3 = onehot - post
    return term1, term2, term3


def confidence_interval(report: EstimateReport, level: Optional[float] = None):
    """Per-class (low, high) intervals around the raw estimate."""
    if report.influence_variance is None:
        raise VarianceUndefinedError(
            f"{report.estimator} report carries no influence variance"
        )
    if report.n_samples < 2:
        raise VarianceUndefinedError("variance undefined for fewer than 2 samples")
    level = report.ci_level if level is None else check_open_unit(level, "level")
    z = normal_quantile(level)
    half = z * np.sqrt(report.influence_variance / report.n_samples)
    return [(float(r - h), float(r + h)) for r, h in zip(report.raw, half)]


ESTIMATORS = {"or": or_estimate, "ipw": ipw_estimate, "dr": dr_estimate}


def run_estimator(name: str, nuisance: NuisancePair, dataset: Dataset,
                  **kwargs) -> EstimateReport:
    if name not in ESTIMATORS:
        raise DomainError(f"unknown estimator {name!r}; expected or/ipw/dr")
    if name == "dr":
        return dr_estimate(nuisance, dataset, **kwargs)
    return ESTIMATORS[name](nuisance, dataset)
