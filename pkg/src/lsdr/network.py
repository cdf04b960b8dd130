"""Differentiable softmax classifiers with hand-derived gradients.

Two architectures: a linear softmax model and a one-hidden-layer tanh
network. Parameters live in one flat vector so optimizers and finite
difference checks stay simple. All losses return ``(loss, grad)`` pairs
with the gradient taken with respect to the flat parameter vector.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from .errors import DimensionError, DomainError
from .validation import check_distribution, check_matrix

ARCHITECTURES = ("linear", "mlp1")


@dataclass(frozen=True)
class ClassifierParams:
    """Flat parameter vector plus the shape metadata to unpack it."""

    architecture: str
    weights: np.ndarray
    dims: Tuple[int, int, int]  # (feature_dim, hidden_width, num_classes)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise DomainError(f"unknown architecture {self.architecture!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 1 or w.size != param_count(self.architecture, self.dims):
            raise DimensionError(
                f"weight vector of length {w.size} does not match "
                f"{self.architecture} dims {self.dims}"
            )

    @property
    def num_classes(self) -> int:
        return self.dims[2]

    @property
    def feature_dim(self) -> int:
        return self.dims[0]

    def with_weights(self, weights) -> "ClassifierParams":
        return replace(self, weights=np.asarray(weights, dtype=np.float64))


def param_count(architecture: str, dims) -> int:
    d, h, c = dims
    if architecture == "linear":
        return c * d + c
    if architecture == "mlp1":
        return h * d + h + c * h + c
    raise DomainError(f"unknown architecture {architecture!r}")


def init_params(architecture, feature_dim, num_classes, hidden_width, rng) -> ClassifierParams:
    """Gaussian init scaled by 1/sqrt(fan_in); biases start at zero."""
    d, h, c = feature_dim, hidden_width, num_classes
    if architecture == "linear":
        w = np.concatenate([rng.normal(0, 1 / np.sqrt(d), c * d), np.zeros(c)])
    elif architecture == "mlp1":
        w = np.concatenate([
            rng.normal(0, 1 / np.sqrt(d), h * d), np.zeros(h),
            rng.normal(0, 1 / np.sqrt(h), c * h), np.zeros(c),
        ])
    else:
        raise DomainError(f"unknown architecture {architecture!r}")
    return ClassifierParams(architecture=architecture, weights=w, dims=(d, h, c))


def _unpack(params: ClassifierParams):
    d, h, c = params.dims
    w = params.weights
    if params.architecture == "linear":
        W = w[: c * d].reshape(c, d)
        b = w[c * d:]
        return W, b
    n1 = h * d
    W1 = w[:n1].reshape(h, d)
    b1 = w[n1: n1 + h]
    n2 = n1 + h
    W2 = w[n2: n2 + c * h].reshape(c, h)
    b2 = w[n2 + c * h:]
    return W1, b1, W2, b2


def forward(params: ClassifierParams, X) -> np.ndarray:
    """Logits for a batch; softmax of the output is the model posterior."""
    X = check_matrix(X, "X", feature_dim=params.feature_dim)
    if params.architecture == "linear":
        W, b = _unpack(params)
        return X @ W.T + b
    W1, b1, W2, b2 = _unpack(params)
    H = np.tanh(X @ W1.T + b1)
    return H @ W2.T + b2


def _forward_cached(params: ClassifierParams, X):
    if params.architecture == "linear":
        W, b = _unpack(params)
        return X @ W.T + b, None
    W1, b1, W2, b2 = _unpack(params)
    H = np.tanh(X @ W1.T + b1)
    return H @ W2.T + b2, H


def _backprop(params: ClassifierParams, X, G, cache) -> np.ndarray:
    """Gradient of a scalar loss wrt the flat weights, given dloss/dlogits G."""
    if params.architecture == "linear":
        return np.concatenate([(G.T @ X).ravel(), G.sum(axis=0)])
    W1, b1, W2, b2 = _unpack(params)
    H = cache
    gW2 = G.T @ H
    gb2 = G.sum(axis=0)
    dH = G @ W2
    dpre = dH * (1.0 - H * H)
    gW1 = dpre.T @ X
    gb1 = dpre.sum(axis=0)
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])


def softmax(logits) -> np.ndarray:
    """Row-wise stable softmax."""
    Z = np.asarray(logits, dtype=np.float64)
    Z = Z - Z.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    Z = np.asarray(logits, dtype=np.float64)
    Z = Z - Z.max(axis=-1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=-1, keepdims=True))


def _ce_core(params, X, targets, weights, log_prior):
    """Shared cross-entropy path; ``log_prior`` shifts the logits when given.

    Targets may be any real matrix (sub-probability rows admit thresholded
    pseudo-labels; doubly robust meta-targets can carry negative entries).
    """
    X = check_matrix(X, "X", feature_dim=params.feature_dim)
    T = np.asarray(targets, dtype=np.float64)
    if T.shape != (len(X), params.num_classes):
        raise DimensionError(f"targets shape {T.shape} does not match batch")
    if weights is None:
        w = np.ones(len(X))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(X),):
            raise DimensionError("weights must be one scalar per sample")
    logits, cache = _forward_cached(params, X)
    if log_prior is not None:
        logits = logits + log_prior
    logp = log_softmax(logits)
    n = len(X)
    loss = -float((w[:, None] * T * logp).sum()) / n
    mass = T.sum(axis=1, keepdims=True)
    G = (w[:, None] * (mass * np.exp(logp) - T)) / n
    return loss, _backprop(params, X, G, cache)


def weighted_ce_loss_and_grad(params, X, targets, weights=None):
    """Weighted cross entropy against per-sample target rows, batch averaged.

    An all-zero target row (a thresholded-out pseudo-label) contributes zero
    loss and zero gradient.
    """
    return _ce_core(params, X, targets, weights, None)


def logit_adjusted_loss_and_grad(params, X, targets, prior, weights=None):
    """Cross entropy on softmax(logits + log prior).

    Trained this way the raw softmax represents the uniform-prior posterior;
    multiplying by ``prior`` recovers the training-distribution posterior.
    """
    prior = check_distribution(prior, "prior")
    if np.any(prior <= 0):
        raise DomainError("logit adjustment requires a strictly positive prior")
    return _ce_core(params, X, targets, weights, np.log(prior)[None, :])


def posthoc_adjust(posterior, from_prior, to_prior) -> np.ndarray:
    """Re-weight a posterior from one class prior to another and renormalize."""
    post = np.asarray(posterior, dtype=np.float64)
    from_p = check_distribution(from_prior, "from_prior")
    to_p = check_distribution(to_prior, "to_prior")
    if np.any(from_p <= 0):
        raise DomainError("from_prior must be strictly positive")
    out = post * (to_p / from_p)
    total = out.sum(axis=-1, keepdims=True)
    return out / total


def pseudo_label(posterior, tau) -> np.ndarray:
    """FixMatch thresholding: one-hot at the argmax if it clears ``tau``.

    Rows whose maximum falls below the threshold map to all-zero targets.
    Ties break toward the lowest class index. Works on a vector or a matrix.
    """
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"tau must lie in [0, 1], got {tau}")
    post = np.asarray(posterior, dtype=np.float64)
    squeeze = post.ndim == 1
    P = post[None, :] if squeeze else post
    out = np.zeros_like(P)
    top = P.argmax(axis=1)  # argmax returns the first (lowest) index on ties
    keep = P[np.arange(len(P)), top] >= tau
    out[np.nonzero(keep)[0], top[keep]] = 1.0
    return out[0] if squeeze else out


@dataclass(frozen=True)
class OptState:
    """Adam moment estimates; unused for plain SGD."""

    t: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n) -> "OptState":
        return cls(t=0, m=np.zeros(n), v=np.zeros(n))


def optimizer_step(state: OptState, weights, gradient, *, optimizer="adam",
                   learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                   weight_decay=0.0):
    """One SGD or Adam update; returns ``(new_state, new_weights)``."""
    g = np.asarray(gradient, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if g.shape != w.shape:
        raise DimensionError("gradient and weights must have the same shape")
    if weight_decay:
        g = g + weight_decay * w
    if optimizer == "sgd":
        return state, w - learning_rate * g
    if optimizer != "adam":
        raise DomainError(f"unknown optimizer {optimizer!r}")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new_w = w - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return OptState(t=t, m=m, v=v), new_w
