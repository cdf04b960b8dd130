"""Core data containers: observations, datasets and the missingness mechanism.

Storage is columnar (numpy arrays) for vectorized work; ``Observation`` is a
per-row view used at interchange boundaries. Ground-truth labels of unlabeled
rows live in the separate ``hidden_y`` field so estimation code can drop them
wholesale with :meth:`Dataset.without_hidden`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .errors import DimensionError, DomainError
from .simplex import mix_priors
from .validation import check_distribution, check_labels, check_matrix, check_propensity

DEFAULT_CLIP_FLOOR = 1e-3


@dataclass(frozen=True)
class MissingnessMechanism:
    """Per-class labeling propensity P(A=1 | Y=c) with a clipping floor."""

    propensity: np.ndarray
    p_labeled: float
    clip_floor: float = DEFAULT_CLIP_FLOOR

    def __post_init__(self):
        pi = check_propensity(self.propensity, self.clip_floor)
        object.__setattr__(self, "propensity", pi)
        if not 0.0 < self.p_labeled <= 1.0:
            raise DomainError(f"p_labeled must lie in (0, 1], got {self.p_labeled}")

    @property
    def num_classes(self) -> int:
        return self.propensity.size

    @property
    def clipped(self) -> np.ndarray:
        """Propensity clipped into [clip_floor, 1]."""
        return np.clip(self.propensity, self.clip_floor, 1.0)

    @property
    def clipped_classes(self) -> np.ndarray:
        """Boolean mask of classes whose propensity sits below the floor."""
        return self.propensity < self.clip_floor

    @classmethod
    def from_priors(cls, p_labeled_prior, p_unlabeled_prior, p_a1,
                    clip_floor=DEFAULT_CLIP_FLOOR) -> "MissingnessMechanism":
        """Mechanism implied by the two conditional priors and P(A=1).

        Satisfies propensity[c] = p_a1 * P(c|A=1) / P(c) wherever P(c) > 0;
        classes with zero marginal mass default to p_a1.
        """
        p_l = check_distribution(p_labeled_prior, "p_labeled_prior")
        p_u = check_distribution(p_unlabeled_prior, "p_unlabeled_prior")
        p_y = mix_priors(p_l, p_u, p_a1)
        pi = np.full(p_l.size, p_a1, dtype=np.float64)
        pos = p_y > 0
        pi[pos] = p_a1 * p_l[pos] / p_y[pos]
        pi = np.clip(pi, clip_floor, 1.0)
        return cls(propensity=pi, p_labeled=float(p_a1), clip_floor=clip_floor)

    def implied_marginal(self, p_labeled_prior) -> np.ndarray:
        """Combined prior P(Y) implied by the identity P(c) = p_a1 P(c|A=1)/pi(c)."""
        p_l = check_distribution(p_labeled_prior, "p_labeled_prior")
        raw = self.p_labeled * p_l / self.clipped
        total = raw.sum()
        if total <= 0:
            raise DomainError("implied marginal has zero mass")
        return raw / total

    def implied_unlabeled_prior(self, p_labeled_prior) -> np.ndarray:
        """Unlabeled prior implied by the mechanism, P(c|A=0) ~ P(c)(1 - pi(c))."""
        p_y = self.implied_marginal(p_labeled_prior)
        raw = p_y * (1.0 - self.clipped)
        total = raw.sum()
        if total <= 0:
            # every class fully labeled: fall back to the labeled prior
            return check_distribution(p_labeled_prior, "p_labeled_prior")
        return raw / total


@dataclass(frozen=True)
class Observation:
    """One record: features, optional visible label, labeled indicator."""

    x: np.ndarray
    y: Optional[int]
    a: int

    def __post_init__(self):
        if self.a not in (0, 1):
            raise DomainError(f"indicator a must be 0 or 1, got {self.a}")
        if self.a == 1 and self.y is None:
            raise DomainError("labeled observation (a=1) must carry a label")
        if self.a == 0 and self.y is not None:
            raise DomainError("unlabeled observation (a=0) must not carry a label")


@dataclass(frozen=True)
class GenerationTruth:
    """Ground-truth generation metadata, for evaluation only."""

    p_labeled: np.ndarray
    p_unlabeled: np.ndarray
    p_a1: float
    propensity: np.ndarray
    mixture: Optional[object] = None  # MixtureSpec, kept loose to avoid a cycle
    config: dict = field(default_factory=dict)

    @property
    def p_marginal(self) -> np.ndarray:
        return mix_priors(self.p_labeled, self.p_unlabeled, self.p_a1)

    def mechanism(self, clip_floor=DEFAULT_CLIP_FLOOR) -> MissingnessMechanism:
        return MissingnessMechanism(
            propensity=np.clip(self.propensity, clip_floor, 1.0),
            p_labeled=self.p_a1,
            clip_floor=clip_floor,
        )


@dataclass(frozen=True)
class Dataset:
    """Semi-supervised dataset with visible labels ``y`` (-1 = unlabeled)."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    hidden_y: Optional[np.ndarray] = None
    truth: Optional[GenerationTruth] = None

    def __post_init__(self):
        X = check_matrix(self.X, "X")
        y = check_labels(self.y, self.num_classes, "y")
        if len(X) != len(y):
            raise DimensionError(f"X has {len(X)} rows but y has {len(y)}")
        if len(X) == 0:
            raise DomainError("dataset must contain at least one observation")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.hidden_y is not None:
            h = check_labels(self.hidden_y, self.num_classes, "hidden_y",
                             allow_unlabeled=False)
            if len(h) != len(y):
                raise DimensionError("hidden_y length must match dataset size")
            object.__setattr__(self, "hidden_y", h)
        if self.n_labeled < 1:
            raise DomainError("dataset must contain at least one labeled row")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.y >= 0

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_mask.sum())

    @property
    def n_unlabeled(self) -> int:
        return self.n - self.n_labeled

    @property
    def p_a1(self) -> float:
        return self.n_labeled / self.n

    def labeled_counts(self) -> np.ndarray:
        return np.bincount(self.y[self.labeled_mask], minlength=self.num_classes).astype(float)

    def labeled_prior(self) -> np.ndarray:
        """Empirical class distribution of the visible labels."""
        counts = self.labeled_counts()
        return counts / counts.sum()

    def select(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return replace(
            self,
            X=self.X[idx],
            y=self.y[idx],
            hidden_y=None if self.hidden_y is None else self.hidden_y[idx],
        )

    def without_hidden(self) -> "Dataset":
        """Copy visible to estimators: no hidden labels, no truth metadata."""
        if self.hidden_y is None and self.truth is None:
            return self
        return replace(self, hidden_y=None, truth=None)

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            yi = int(self.y[i])
            yield Observation(
                x=self.X[i],
                y=yi if yi >= 0 else None,
                a=int(yi >= 0),
            )
