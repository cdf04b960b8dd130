"""Synthetic label-shift data: long-tailed count ladders, the five unlabeled
shapes, Gaussian-mixture sampling and feature-space augmentations.

Features are drawn from one shared isotropic Gaussian mixture for labeled and
unlabeled rows alike, so P(X|Y) is invariant to the labeling indicator by
construction and only the class priors shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, GenerationTruth
from .errors import DomainError
from .network import ClassifierParams
from .rng import substream
from .validation import check_distribution, check_matrix, check_vector

SHAPES = ("consistent", "uniform", "reversed", "middle", "headtail")


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture over C classes in d dimensions."""

    num_classes: int
    feature_dim: int
    means: np.ndarray
    cov_scale: float = 1.0  # shared isotropic variance sigma^2

    def __post_init__(self):
        means = check_matrix(self.means, "means", feature_dim=self.feature_dim)
        if means.shape[0] != self.num_classes:
            raise DomainError("means must have one row per class")
        if self.cov_scale <= 0:
            raise DomainError("cov_scale must be positive")
        diffs = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diffs ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if np.any(dist <= 0):
            raise DomainError("class means must be pairwise distinct")
        object.__setattr__(self, "means", means)

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.cov_scale))

    @classmethod
    def spread(cls, num_classes, feature_dim, *, min_distance=3.0, scale=2.0,
               cov_scale=1.0, seed=0) -> "MixtureSpec":
        """Random means, rejection-sampled to a minimum pairwise distance."""
        rng = substream(seed, "mixture")
        means = [rng.normal(0.0, scale, feature_dim)]
        attempts = 0
        while len(means) < num_classes:
            cand = rng.normal(0.0, scale, feature_dim)
            if min(np.linalg.norm(cand - m) for m in means) >= min_distance:
                means.append(cand)
            attempts += 1
            if attempts > 100_000:
                raise DomainError(
                    "could not place means; lower min_distance or raise scale"
                )
        return cls(num_classes, feature_dim, np.array(means), cov_scale)

    @classmethod
    def orthogonal(cls, num_classes, feature_dim, *, separation=4.0,
                   cov_scale=1.0) -> "MixtureSpec":
        """Equidistant means on scaled coordinate axes; needs C <= d."""
        if num_classes > feature_dim:
            raise DomainError("orthogonal placement needs num_classes <= feature_dim")
        means = np.zeros((num_classes, feature_dim))
        means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
        return cls(num_classes, feature_dim, means, cov_scale)

    def sample(self, labels, rng) -> np.ndarray:
        labels = np.asarray(labels)
        return self.means[labels] + rng.normal(0.0, self.sigma,
                                               (len(labels), self.feature_dim))


@dataclass(frozen=True)
class ShiftConfig:
    """Long-tail ladder parameters for the labeled and unlabeled sets."""

    gamma_l: float
    gamma_u: float
    shape: str
    n1: int
    m1: int
    seed: int = 0

    def __post_init__(self):
        if self.gamma_l < 1:
            raise DomainError("gamma_l must be >= 1")
        if self.gamma_u <= 0:
            raise DomainError("gamma_u must be positive")
        if self.shape not in SHAPES:
            raise DomainError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.n1 < 1 or self.m1 < 1:
            raise DomainError("head counts n1 and m1 must be >= 1")


def longtail_counts(head: int, gamma: float, num_classes: int) -> np.ndarray:
    """Count ladder head * gamma**(-(c-1)/(C-1)), rounded, floored at 1."""
    if num_classes < 2:
        raise DomainError("need at least 2 classes for a long-tail ladder")
    if head < 1 or gamma <= 0:
        raise DomainError("head must be >= 1 and gamma positive")
    expo = -np.arange(num_classes, dtype=np.float64) / (num_classes - 1)
    raw = head * np.power(float(gamma), expo)
    counts = np.floor(raw + 0.5).astype(np.int64)  # round half up, deterministic
    return np.maximum(counts, 1)


def _middle_order(num_classes: int):
    center = num_classes // 2
    return sorted(range(num_classes), key=lambda i: (abs(i - center), i))


def _headtail_order(num_classes: int):
    order, lo, hi = [], 0, num_classes - 1
    while lo <= hi:
        order.append(lo)
        if hi != lo:
            order.append(hi)
        lo += 1
        hi -= 1
    return order


def apply_shape(counts, shape: str) -> np.ndarray:
    """Permute a descending count ladder into one of the five shapes.

    ``middle`` places the largest counts nearest the center class index,
    ``headtail`` alternates them outward-in from the two ends. ``uniform``
    returns the counts unchanged; the caller encodes uniformity via gamma=1.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts[:-1] < counts[1:]):
        raise DomainError("apply_shape expects counts in descending order")
    if shape in ("consistent", "uniform"):
        return counts.copy()
    if shape == "reversed":
        return counts[::-1].copy()
    if shape == "middle":
        order = _middle_order(counts.size)
    elif shape == "headtail":
        order = _headtail_order(counts.size)
    else:
        raise DomainError(f"unknown shape {shape!r}")
    out = np.empty_like(counts)
    for rank, pos in enumerate(order):
        out[pos] = counts[rank]
    return out


def unlabeled_counts(cfg: ShiftConfig, num_classes: int) -> np.ndarray:
    """Shaped unlabeled counts for a shift config.

    A gamma_u below 1 is table notation for the reversed orientation of the
    1/gamma_u ladder and composes with the shape permutation accordingly.
    """
    if cfg.shape == "uniform":
        return np.full(num_classes, cfg.m1, dtype=np.int64)
    gamma = cfg.gamma_u
    flip = gamma < 1.0
    if flip:
        gamma = 1.0 / gamma
    counts = longtail_counts(cfg.m1, gamma, num_classes)
    shaped = apply_shape(counts, cfg.shape)
    return shaped[::-1].copy() if flip else shaped


def generate(mix: MixtureSpec, cfg: ShiftConfig) -> Dataset:
    """Sample a long-tailed semi-supervised dataset with known truth.

    Deterministic under ``cfg.seed``. Rows are ordered labeled block first,
    then unlabeled; hidden labels of unlabeled rows are retained out-of-band
    for evaluation.
    """
    C = mix.num_classes
    counts_l = longtail_counts(cfg.n1, cfg.gamma_l, C)
    counts_u = unlabeled_counts(cfg, C)
    if counts_l.sum() < 1 or counts_u.sum() < 0:
        raise DomainError("degenerate class counts")
    rng = substream(cfg.seed, "synth")
    y_l = np.repeat(np.arange(C), counts_l)
    y_u = np.repeat(np.arange(C), counts_u)
    X_l = mix.sample(y_l, rng)
    X_u = mix.sample(y_u, rng)
    X = np.vstack([X_l, X_u])
    y = np.concatenate([y_l, np.full(y_u.size, -1, dtype=np.int64)])
    hidden = np.concatenate([y_l, y_u])
    n_l, n = y_l.size, y_l.size + y_u.size
    p_l = counts_l / counts_l.sum()
    p_u = counts_u / counts_u.sum()
    propensity = counts_l / (counts_l + counts_u)
    truth = GenerationTruth(
        p_labeled=p_l,
        p_unlabeled=p_u,
        p_a1=n_l / n,
        propensity=propensity,
        mixture=mix,
        config={
            "gamma_l": cfg.gamma_l, "gamma_u": cfg.gamma_u, "shape": cfg.shape,
            "n1": cfg.n1, "m1": cfg.m1, "seed": cfg.seed,
        },
    )
    return Dataset(X=X, y=y, num_classes=C, hidden_y=hidden, truth=truth)


def sample_iid(mix: MixtureSpec, p_labeled, p_unlabeled, p_a1, n, rng) -> Dataset:
    """Draw n i.i.d. observations: A ~ Bernoulli, Y | A ~ prior, X | Y ~ mixture.

    Truth records the design priors (not the empirical frequencies), which is
    what the asymptotic checks compare against.
    """
    p_l = check_distribution(p_labeled, "p_labeled")
    p_u = check_distribution(p_unlabeled, "p_unlabeled")
    if not 0.0 < p_a1 < 1.0:
        raise DomainError("p_a1 must lie in (0, 1) for i.i.d. sampling")
    a = rng.random(n) < p_a1
    y_true = np.empty(n, dtype=np.int64)
    n_lab = int(a.sum())
    y_true[a] = rng.choice(mix.num_classes, size=n_lab, p=p_l)
    y_true[~a] = rng.choice(mix.num_classes, size=n - n_lab, p=p_u)
    X = mix.sample(y_true, rng)
    y = np.where(a, y_true, -1)
    if not a.any():  # Dataset requires one labeled row; retry-free guard
        raise DomainError("i.i.d. draw produced no labeled rows; increase n or p_a1")
    p_y = p_a1 * p_l + (1 - p_a1) * p_u
    truth = GenerationTruth(
        p_labeled=p_l, p_unlabeled=p_u, p_a1=float(p_a1),
        propensity=p_a1 * p_l / p_y, mixture=mix,
        config={"iid": True, "n": int(n)},
    )
    return Dataset(X=X, y=y, num_classes=mix.num_classes, hidden_y=y_true, truth=truth)


def bayes_posterior(mix: MixtureSpec, prior, x) -> np.ndarray:
    """Exact mixture posterior for one feature vector."""
    x = check_vector(x, "x")
    return bayes_posterior_matrix(mix, prior, x[None, :])[0]


def bayes_posterior_matrix(mix: MixtureSpec, prior, X) -> np.ndarray:
    """Exact Gaussian-mixture posterior rows, log-sum-exp stabilized."""
    prior = check_distribution(prior, "prior")
    X = check_matrix(X, "X", feature_dim=mix.feature_dim)
    d2 = ((X[:, None, :] - mix.means[None, :, :]) ** 2).sum(-1)
    with np.errstate(divide="ignore"):
        logp = np.log(prior)[None, :] - d2 / (2.0 * mix.cov_scale)
    logp -= logp.max(axis=1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=1, keepdims=True)


def bayes_linear_params(mix: MixtureSpec, prior) -> ClassifierParams:
    """Linear softmax weights whose softmax equals the exact Bayes posterior."""
    prior = check_distribution(prior, "prior")
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior)
    W = mix.means / mix.cov_scale
    b = log_prior - (mix.means ** 2).sum(1) / (2.0 * mix.cov_scale)
    w = np.concatenate([W.ravel(), b])
    return ClassifierParams(architecture="linear", weights=w,
                            dims=(mix.feature_dim, 0, mix.num_classes))


def augment(X, strength, rng, *, sigma_weak=0.1, sigma_strong=0.5) -> np.ndarray:
    """Add mean-zero Gaussian noise at the weak or strong scale.

    Feature-space stand-in for the weak/strong image augmentations of
    consistency training; scales are absolute (callers size them from the
    mixture noise level).
    """
    if strength == "weak":
        sigma = sigma_weak
    elif strength == "strong":
        sigma = sigma_strong
    else:
        raise DomainError(f"unknown augmentation strength {strength!r}")
    X = np.asarray(X, dtype=np.float64)
    if sigma == 0:
        return X.copy()
    return X + rng.normal(0.0, sigma, X.shape)
