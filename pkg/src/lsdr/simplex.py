"""Probability-simplex arithmetic and evaluation metrics."""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericError
from .validation import (
    SIMPLEX_ATOL,
    check_distribution,
    check_same_length,
    check_vector,
)


def tv_distance(p, q) -> float:
    """Total variation distance between two class distributions.

    Uses the half-L1 convention, so the result lies in [0, 1].
    """
    p = check_distribution(p, "p")
    q = check_distribution(q, "q")
    check_same_length(p, q, "distributions")
    return 0.5 * float(np.abs(p - q).sum())


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection of a real vector onto the probability simplex.

    Valid distributions are fixed points. Sort-based algorithm, O(C log C).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DomainError("input must be a nonempty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise NumericError("cannot project non-finite vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho_candidates = u - css / np.arange(1, v.size + 1)
    rho = int(np.nonzero(rho_candidates > 0)[0][-1])
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


def recover_unlabeled_prior(p_combined, p_labeled_prior, p_a1) -> np.ndarray:
    """Unlabeled class prior implied by the combined and labeled priors.

    Inverts the mixture p_combined = p_a1 * p_labeled + (1 - p_a1) * p_unlabeled
    and projects the result back onto the simplex.
    """
    p_combined = check_vector(p_combined, "p_combined")
    p_labeled = check_distribution(p_labeled_prior, "p_labeled_prior")
    check_same_length(p_combined, p_labeled, "priors")
    p_a1 = float(p_a1)
    if not 0.0 < p_a1 < 1.0:
        raise DomainError(f"p_a1 must lie in (0, 1), got {p_a1}")
    raw = (p_combined - p_a1 * p_labeled) / (1.0 - p_a1)
    return project_to_simplex(raw)


def mix_priors(p_labeled, p_unlabeled, p_a1) -> np.ndarray:
    """Forward mixture: combined prior from the two conditional priors."""
    p_labeled = check_distribution(p_labeled, "p_labeled")
    p_unlabeled = check_distribution(p_unlabeled, "p_unlabeled")
    check_same_length(p_labeled, p_unlabeled, "priors")
    return p_a1 * p_labeled + (1.0 - p_a1) * p_unlabeled


def is_distribution(v, atol=SIMPLEX_ATOL) -> bool:
    v = np.asarray(v, dtype=np.float64)
    return (
        v.ndim == 1
        and v.size > 0
        and bool(np.all(np.isfinite(v)))
        and bool(np.all(v >= -atol))
        and abs(float(v.sum()) - 1.0) <= atol
    )


def top1_accuracy(predictions, labels) -> float:
    """Fraction of exact matches between two equal-length label sequences."""
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.ndim != 1 or lab.ndim != 1:
        raise DomainError("predictions and labels must be 1-dimensional")
    check_same_length(pred, lab, "prediction lists")
    if pred.size == 0:
        raise DomainError("top1_accuracy of empty input is undefined")
    return float(np.mean(pred == lab))
