"""Training procedures for the label-shift semi-supervised model family.

Four ways to learn the classifier plus missingness mechanism:

* ``SupervisedClassifier``: cross entropy on the labeled rows only.
* ``MLEClassifier``: joint gradient ascent on the observed-data likelihood,
  marginalizing the missing labels and learning the mechanism through a
  sigmoid parameterization.
* ``EMClassifier``: alternating posterior-weight updates and weighted cross
  entropy. ``variant="plain"`` keeps soft posterior targets;
  ``variant="simpro"`` adds confidence thresholding, weak/strong feature
  augmentation and the logit-adjusted loss, so the raw softmax tracks the
  uniform-prior posterior while a running class-prior estimate absorbs the
  shift.
* ``DRRiskClassifier``: minimizes the doubly robust risk directly, given a
  frozen mechanism from an earlier stage.

``TwoStageClassifier`` chains a small stage-1 EM run, a doubly robust
estimate of the unlabeled prior, and a stage-2 EM run with that prior frozen
in the posterior-weight update. ``BatchUpdateDRClassifier`` is the one-stage
ablation that feeds an exponentially smoothed per-batch doubly robust
estimate straight back into training.

All estimators follow the scikit-learn protocol: ``fit(X, y)`` with ``y=-1``
marking unlabeled rows, ``predict_proba`` returning the posterior adjusted to
a uniform test prior, and ``get_params``/``clone`` compatibility.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted

from .data import DEFAULT_CLIP_FLOOR, Dataset, MissingnessMechanism
from .errors import (
    ClassMassError,
    DegeneratePosteriorError,
    DomainError,
    TrainingDivergedError,
)
from .estimators import NuisancePair, run_estimator
from .network import (
    _backprop,
    _forward_cached,
    ClassifierParams,
    OptState,
    forward,
    init_params,
    log_softmax,
    logit_adjusted_loss_and_grad,
    optimizer_step,
    posthoc_adjust,
    pseudo_label,
    softmax,
    weighted_ce_loss_and_grad,
)
from .rng import substream
from .simplex import mix_priors, project_to_simplex, tv_distance
from .synth import augment
from .validation import check_distribution, check_labels, check_matrix


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters shared by the trainers."""

    learning_rate: float = 8e-3
    epochs: int = 45
    batch_size: int = 256
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    confidence_threshold: float = 0.95

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise DomainError("confidence_threshold must lie in [0, 1]")


def _opt_step(state: OptState, weights, grad, cfg: TrainConfig):
    return optimizer_step(
        state, weights, grad, optimizer=cfg.optimizer,
        learning_rate=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
        eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
    )


# ---------------------------------------------------------------------------
# observed-data likelihood


def marginal_loglik(classifier: ClassifierParams, mechanism: MissingnessMechanism,
                    dataset: Dataset) -> float:
    """Observed-data log likelihood, additive constants in P(X) dropped.

    Labeled rows contribute log posterior plus log propensity; unlabeled rows
    contribute the log of the label-marginalized stay-unlabeled mass. Returns
    -inf (with a warning) when the mechanism makes an unlabeled row impossible.
    """
    logits = forward(classifier, dataset.X)
    logp = log_softmax(logits)
    pi = mechanism.clipped
    lab = dataset.labeled_mask
    y_lab = dataset.y[lab]
    total = float(logp[lab, y_lab].sum() + np.log(pi[y_lab]).sum())
    if (~lab).any():
        with np.errstate(divide="ignore"):
            log_stay = np.log1p(-pi)  # log(1 - pi), -inf when pi == 1
        rows = logp[~lab] + log_stay[None, :]
        m = rows.max(axis=1)
        finite = np.isfinite(m)
        if not finite.all():
            warnings.warn("mechanism leaves no unlabeled mass; log likelihood is -inf")
            return float("-inf")
        total += float((m + np.log(np.exp(rows - m[:, None]).sum(axis=1))).sum())
    return total


def _mle_batch_grads(params, lam, X, y):
    """Negative mean log-likelihood over one batch and its two gradients.

    ``lam`` are unconstrained mechanism logits, propensity = sigmoid(lam).
    """
    n = len(X)
    logits, cache = _forward_cached(params, X)
    P = softmax(logits)
    pi = 1.0 / (1.0 + np.exp(-lam))
    lab = y >= 0
    G = np.zeros_like(P)
    glam = np.zeros_like(lam)
    loss = 0.0
    logp = log_softmax(logits)
    if lab.any():
        y_lab = y[lab]
        onehot = np.zeros((int(lab.sum()), P.shape[1]))
        onehot[np.arange(len(y_lab)), y_lab] = 1.0
        G[lab] = P[lab] - onehot
        loss -= float(logp[lab, y_lab].sum() + np.log(pi[y_lab]).sum())
        np.add.at(glam, y_lab, -(1.0 - pi[y_lab]))
    if (~lab).any():
        u = 1.0 - pi
        Pu = P[~lab]
        S = Pu @ u
        loss -= float(np.log(S).sum())
        G[~lab] = -Pu * (u[None, :] - S[:, None]) / S[:, None]
        glam += (Pu * (pi * (1.0 - pi))[None, :] / S[:, None]).sum(axis=0)
    G /= n
    glam /= n
    return loss / n, _backprop(params, X, G, cache), glam


# ---------------------------------------------------------------------------
# doubly robust risk


def dr_risk_meta_targets(y, a, pseudo_targets, mechanism: MissingnessMechanism):
    """Meta target rows for the rearranged doubly robust risk.

    Labeled rows get pseudo + (1/propensity(y)) * (onehot(y) - pseudo); the
    result can carry negative entries. Returns (targets, clip_event_count).
    """
    pseudo = np.asarray(pseudo_targets, dtype=np.float64)
    y = np.asarray(y)
    a = np.asarray(a, dtype=bool)
    pi = mechanism.clipped
    meta = pseudo.copy()
    y_lab = y[a]
    onehot = np.zeros((int(a.sum()), pseudo.shape[1]))
    onehot[np.arange(len(y_lab)), y_lab] = 1.0
    meta[a] += (onehot - pseudo[a]) / pi[y_lab][:, None]
    clip_events = int(mechanism.clipped_classes[y_lab].sum())
    return meta, clip_events


def dr_risk_loss_and_grad(params, mechanism, X, y, a, pseudo_targets):
    """Doubly robust risk via the meta-target rearrangement, with gradient."""
    meta, clip_events = dr_risk_meta_targets(y, a, pseudo_targets, mechanism)
    loss, grad = weighted_ce_loss_and_grad(params, X, meta)
    return loss, grad, clip_events


def dr_risk_loss_direct(params, mechanism, X, y, a, pseudo_targets) -> float:
    """Doubly robust risk via its defining per-sample correction form.

    Evaluates mean_i [ l(x_i, pseudo_i) + 1(a_i)/propensity(y_i) *
    (l(x_i, y_i) - l(x_i, pseudo_i)) ]; must agree with the meta-target path.
    """
    X = check_matrix(X, "X")
    pseudo = np.asarray(pseudo_targets, dtype=np.float64)
    y = np.asarray(y)
    a = np.asarray(a, dtype=bool)
    logp = log_softmax(forward(params, X))
    l_pseudo = -(pseudo * logp).sum(axis=1)
    risk = l_pseudo.copy()
    y_lab = y[a]
    l_label = -logp[a, y_lab]
    risk[a] += (l_label - l_pseudo[a]) / mechanism.clipped[y_lab]
    return float(risk.mean())


# ---------------------------------------------------------------------------
# EM state and the full-batch E/M operations


@dataclass(frozen=True)
class EmState:
    """State threaded through full-batch EM iterations."""

    classifier: ClassifierParams
    mechanism: MissingnessMechanism
    labeled_counts: np.ndarray
    omega: Optional[np.ndarray] = None      # (n_unlabeled, C) posterior weights
    gamma: Optional[np.ndarray] = None      # (n, C) M-step targets
    zeta: Optional[np.ndarray] = None       # (C, 2) class masses [unlabeled, labeled]
    iteration: int = 0
    variant: str = "plain"
    tau: float = 0.95
    p_unlabeled: Optional[np.ndarray] = None
    running_py: Optional[np.ndarray] = None
    frozen_prior: bool = False
    seed: int = 0
    sigma_weak: float = 0.1
    sigma_strong: float = 0.5


def e_step(state: EmState, dataset: Dataset) -> EmState:
    """Refresh posterior weights, M-step targets and class masses.

    Plain variant: omega ~ posterior * P(A=0|Y), renormalized per row. The
    pseudo-labeling variant computes omega on a weak augmentation as
    posterior(uniform) * P(Y|A=0), then thresholds it one-hot.
    """
    lab = dataset.labeled_mask
    X_u = dataset.X[~lab]
    n_u = len(X_u)
    C = dataset.num_classes
    if state.variant == "simpro":
        rng = substream(state.seed, f"estep/t={state.iteration}")
        weak = augment(X_u, "weak", rng, sigma_weak=state.sigma_weak,
                       sigma_strong=state.sigma_strong)
        post = softmax(forward(state.classifier, weak)) if n_u else np.zeros((0, C))
        prior = state.p_unlabeled if state.p_unlabeled is not None else np.full(C, 1.0 / C)
        w = post * prior[None, :]
        mass = w.sum(axis=1, keepdims=True)
        if n_u and np.any(mass <= 0):
            raise DegeneratePosteriorError("pseudo-label weights collapsed to zero")
        w /= np.where(mass > 0, mass, 1.0)
        omega = pseudo_label(w, state.tau) if n_u else w
    else:
        post = softmax(forward(state.classifier, X_u)) if n_u else np.zeros((0, C))
        stay = 1.0 - state.mechanism.clipped
        w = post * stay[None, :]
        mass = w.sum(axis=1, keepdims=True)
        if n_u and np.any(mass <= 0):
            raise DegeneratePosteriorError(
                "posterior * P(A=0|Y) has an all-zero row; mechanism leaves no mass"
            )
        omega = w / np.where(mass > 0, mass, 1.0)
    gamma = np.zeros((dataset.n, C))
    y_lab = dataset.y[lab]
    gamma[np.nonzero(lab)[0], y_lab] = 1.0
    gamma[~lab] = omega
    zeta = np.stack([omega.sum(axis=0), state.labeled_counts], axis=1)
    return replace(state, omega=omega, gamma=gamma, zeta=zeta)


def m_step(state: EmState, dataset: Dataset, cfg: TrainConfig,
           variant: Optional[str] = None, steps: int = 100) -> EmState:
    """Full-batch M update: classifier by guarded gradient steps, mechanism
    in closed form from the class masses.

    The classifier update is accepted only if it does not increase the
    weighted cross entropy, which preserves the EM ascent property; the
    mechanism maximizer zeta1/(zeta1+zeta0) is exact (clipped to the floor).
    ``variant`` defaults to the state's own.
    """
    if state.gamma is None or state.zeta is None:
        raise DomainError("m_step requires a preceding e_step")
    if variant is not None and variant != state.variant:
        state = replace(state, variant=variant)
    lab = dataset.labeled_mask
    if state.variant == "simpro":
        rng = substream(state.seed, f"mstep/t={state.iteration}")
        inputs = np.where(
            lab[:, None],
            augment(dataset.X, "weak", rng, sigma_weak=state.sigma_weak,
                    sigma_strong=state.sigma_strong),
            augment(dataset.X, "strong", rng, sigma_weak=state.sigma_weak,
                    sigma_strong=state.sigma_strong),
        )
        prior = state.running_py if state.running_py is not None else None

        def loss_grad(params):
            return logit_adjusted_loss_and_grad(params, inputs, state.gamma, prior)
    else:

        def loss_grad(params):
            return weighted_ce_loss_and_grad(params, dataset.X, state.gamma)

    params = state.classifier
    loss_before, _ = loss_grad(params)
    opt = OptState.zeros(params.weights.size)
    current = params
    for _ in range(steps):
        loss, grad = loss_grad(current)
        if not np.isfinite(loss):
            raise TrainingDivergedError("non-finite M-step loss")
        opt, w = _opt_step(opt, current.weights, grad, cfg)
        current = current.with_weights(w)
    loss_after, _ = loss_grad(current)
    if loss_after > loss_before:  # guard: never decrease the EM lower bound
        current = params
    zeta0, zeta1 = state.zeta[:, 0], state.zeta[:, 1]
    total = zeta0 + zeta1
    dead = np.nonzero(total <= 0)[0]
    if dead.size:
        raise ClassMassError(int(dead[0]))
    pi = np.clip(zeta1 / total, state.mechanism.clip_floor, 1.0)
    mechanism = MissingnessMechanism(
        propensity=pi, p_labeled=state.mechanism.p_labeled,
        clip_floor=state.mechanism.clip_floor,
    )
    new = replace(state, classifier=current, mechanism=mechanism,
                  iteration=state.iteration + 1)
    if state.variant == "simpro":
        updates = {}
        mass = state.gamma.sum()
        if mass > 0 and state.running_py is not None:
            # full-batch op refreshes the running prior from the current
            # targets outright; the streaming trainer owns the EMA version
            batch_py = state.gamma.sum(axis=0) / mass
            updates["running_py"] = batch_py / batch_py.sum()
        if not state.frozen_prior and zeta0.sum() > 0:
            updates["p_unlabeled"] = zeta0 / zeta0.sum()
        if updates:
            new = replace(new, **updates)
    return new


def unlabeled_objective_terms(params: ClassifierParams,
                              mechanism: MissingnessMechanism,
                              X_weak, X_strong, tau: float) -> np.ndarray:
    """Per-sample unlabeled loss terms with thresholded posterior weights.

    Weights come from the plain posterior-times-stay-probability rule on the
    weak views, thresholded one-hot; each term is the cross entropy of the
    strong-view prediction against that target. With a class-uniform
    mechanism this reduces exactly to consistency training's unlabeled loss.
    """
    post = softmax(forward(params, X_weak))
    w = post * (1.0 - mechanism.clipped)[None, :]
    mass = w.sum(axis=1, keepdims=True)
    if np.any(mass <= 0):
        raise DegeneratePosteriorError("no unlabeled mass for some row")
    w /= mass
    delta = pseudo_label(w, tau)
    logp = log_softmax(forward(params, X_strong))
    return -(delta * logp).sum(axis=1)


# ---------------------------------------------------------------------------
# shared fitting plumbing


def _as_dataset(X, y, n_classes) -> Dataset:
    X = check_matrix(X, "X")
    y = check_labels(y, None, "y")
    if n_classes is None:
        if not (y >= 0).any():
            raise DomainError("cannot infer n_classes without labeled rows")
        n_classes = int(y.max()) + 1
    if n_classes < 2:
        raise DomainError("need at least 2 classes")
    return Dataset(X=X, y=check_labels(y, n_classes, "y"), num_classes=n_classes)


def _resolve_sigmas(sigma_weak, sigma_strong, dataset: Dataset):
    """Absolute augmentation scales; defaults are 0.1 and 0.5 of the noise
    level (taken from truth metadata, else a within-class spread estimate)."""
    if sigma_weak is not None and sigma_strong is not None:
        return float(sigma_weak), float(sigma_strong)
    sigma = None
    if dataset.truth is not None and dataset.truth.mixture is not None:
        sigma = float(np.sqrt(dataset.truth.mixture.cov_scale))
    if sigma is None:
        stds = []
        y = dataset.y
        for c in range(dataset.num_classes):
            rows = dataset.X[y == c]
            if len(rows) >= 2:
                stds.append(rows.std(axis=0, ddof=1).mean())
        sigma = float(np.mean(stds)) if stds else 1.0
    return (
        float(sigma_weak) if sigma_weak is not None else 0.1 * sigma,
        float(sigma_strong) if sigma_strong is not None else 0.5 * sigma,
    )


def _batches(index_pool, batch_size, rng):
    order = index_pool[rng.permutation(len(index_pool))]
    for k in range(0, len(order), batch_size):
        yield order[k: k + batch_size]


class _BaseLabelShift(BaseEstimator, ClassifierMixin):
    """Shared fit plumbing, prediction and nuisance export."""

    _method = "base"

    # subclasses declare their sklearn params explicitly in __init__

    def _config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, optimizer=self.optimizer,
            beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
            weight_decay=self.weight_decay, seed=self.seed,
            confidence_threshold=getattr(self, "confidence_threshold", 0.95),
        )

    # -- dataset entry points ------------------------------------------------

    def fit(self, X, y):
        ds = _as_dataset(X, y, getattr(self, "n_classes", None))
        return self.fit_dataset(ds)

    def fit_dataset(self, dataset: Dataset):
        self._fit(dataset)
        self.n_classes_ = dataset.num_classes
        self.n_features_in_ = dataset.feature_dim
        self.classes_ = np.arange(dataset.num_classes)
        return self

    # -- prediction ----------------------------------------------------------

    def posterior_combined(self, X) -> np.ndarray:
        """Posterior rows under the training (combined) class distribution."""
        check_is_fitted(self, "classifier_")
        X = check_matrix(X, "X", feature_dim=self.classifier_.feature_dim)
        post = softmax(forward(self.classifier_, X))
        if self._logit_adjusted_repr():
            post = post * self.combined_prior_[None, :]
            post /= post.sum(axis=1, keepdims=True)
        return post

    def predict_proba(self, X) -> np.ndarray:
        """Posterior adjusted to the uniform test prior."""
        check_is_fitted(self, "classifier_")
        uniform = np.full(self.n_classes_, 1.0 / self.n_classes_)
        prior = np.clip(self.combined_prior_, 1e-12, None)
        prior = prior / prior.sum()
        return posthoc_adjust(self.posterior_combined(X), prior, uniform)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def _logit_adjusted_repr(self) -> bool:
        return getattr(self, "_softmax_is_uniform_posterior_", False)

    # -- estimation hooks ------------------------------------------------------

    def as_nuisance(self) -> NuisancePair:
        check_is_fitted(self, "mechanism_")
        return NuisancePair(posterior_fn=self.posterior_combined,
                            mechanism=self.mechanism_)

    def estimate_report(self, dataset: Dataset, estimator="dr", **kwargs):
        return run_estimator(estimator, self.as_nuisance(), dataset, **kwargs)

    # -- shared internals ------------------------------------------------------

    def _init_params(self, dataset: Dataset) -> ClassifierParams:
        arch = getattr(self, "architecture", "linear")
        hidden = getattr(self, "hidden_width", 32)
        if self.init_classifier is not None:
            return self.init_classifier
        rng = substream(self.seed, "init")
        return init_params(arch, dataset.feature_dim, dataset.num_classes,
                           hidden, rng)

    def _finalize(self, dataset, params, mechanism, p_unlabeled, history,
                  softmax_is_uniform):
        self.classifier_ = params
        self.mechanism_ = mechanism
        self.unlabeled_prior_ = check_distribution(p_unlabeled, "unlabeled prior")
        self.labeled_prior_ = dataset.labeled_prior()
        self.p_a1_ = dataset.p_a1
        if 0.0 < self.p_a1_ < 1.0:
            self.combined_prior_ = mix_priors(self.labeled_prior_,
                                              self.unlabeled_prior_, self.p_a1_)
        else:
            self.combined_prior_ = self.labeled_prior_
        self.history_ = history
        self.method_ = self._method
        self._softmax_is_uniform_posterior_ = softmax_is_uniform

    def _history_entry(self, epoch, losses, dataset, p_unlabeled):
        entry = {"epoch": epoch,
                 "loss": float(np.mean(losses)) if len(losses) else 0.0}
        if dataset.truth is not None:
            entry["tv_unlabeled"] = tv_distance(
                project_to_simplex(np.asarray(p_unlabeled, dtype=np.float64)),
                dataset.truth.p_unlabeled,
            )
        return entry

    def _supervised_loop(self, dataset, params, epochs, cfg, *, prior=None,
                         history=None, p_unlabeled=None):
        """Minibatch cross entropy on labeled rows; shared by the supervised
        baseline, warmups and the no-unlabeled degenerations."""
        rng = substream(cfg.seed, "batch")
        lab_idx = np.nonzero(dataset.labeled_mask)[0]
        onehot = np.zeros((dataset.n, dataset.num_classes))
        onehot[lab_idx, dataset.y[lab_idx]] = 1.0
        opt = OptState.zeros(params.weights.size)
        for epoch in range(epochs):
            losses = []
            for batch in _batches(lab_idx, cfg.batch_size, rng):
                if prior is None:
                    loss, grad = weighted_ce_loss_and_grad(
                        params, dataset.X[batch], onehot[batch])
                else:
                    loss, grad = logit_adjusted_loss_and_grad(
                        params, dataset.X[batch], onehot[batch], prior)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"supervised loss diverged at epoch {epoch}")
                opt, w = _opt_step(opt, params.weights, grad, cfg)
                params = params.with_weights(w)
                losses.append(loss)
            if history is not None:
                history.append(self._history_entry(epoch, losses, dataset,
                                                   p_unlabeled))
        return params


class SupervisedClassifier(_BaseLabelShift):
    """Labeled-rows-only baseline; its prior estimate is the labeled prior."""

    _method = "supervised"

    def __init__(self, n_classes=None, architecture="linear", hidden_width=32,
                 learning_rate=8e-3, epochs=45, batch_size=256,
                 optimizer="adam", beta1=0.9, beta2=0.999, adam_eps=1e-8,
                 weight_decay=0.0, clip_floor=DEFAULT_CLIP_FLOOR,
                 init_classifier=None, seed=0):
        self.n_classes = n_classes
        self.architecture = architecture
        self.hidden_width = hidden_width
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.weight_decay = weight_decay
        self.clip_floor = clip_floor
        self.init_classifier = init_classifier
        self.seed = seed

    def _fit(self, dataset: Dataset):
        cfg = self._config()
        params = self._init_params(dataset)
        history = []
        p_lab = dataset.labeled_prior()
        params = self._supervised_loop(dataset, params, cfg.epochs, cfg,
                                       history=history, p_unlabeled=p_lab)
        mechanism = MissingnessMechanism(
            propensity=np.full(dataset.num_classes,
                               max(dataset.p_a1, self.clip_floor)),
            p_labeled=max(dataset.p_a1, self.clip_floor),
            clip_floor=self.clip_floor,
        )
        self._finalize(dataset, params, mechanism, p_lab, history, False)


class MLEClassifier(_BaseLabelShift):
    """Joint ascent on the observed-data likelihood.

    The classifier and the mechanism logits are updated together per batch;
    the unlabeled term marginalizes the label against P(A=0|Y), so the
    mechanism learns from how often each class goes missing.
    """

    _method = "mle"

    def __init__(self, n_classes=None, architecture="linear", hidden_width=32,
                 learning_rate=8e-3, epochs=45, batch_size=256,
                 optimizer="adam", beta1=0.9, beta2=0.999, adam_eps=1e-8,
                 weight_decay=0.0, mechanism_learning_rate=1e-3,
                 clip_floor=DEFAULT_CLIP_FLOOR, init_classifier=None,
                 init_propensity=None, track_loglik=False, seed=0):
        self.n_classes = n_classes
        self.architecture = architecture
        self.hidden_width = hidden_width
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.weight_decay = weight_decay
        self.mechanism_learning_rate = mechanism_learning_rate
        self.clip_floor = clip_floor
        self.init_classifier = init_classifier
        self.init_propensity = init_propensity
        self.track_loglik = track_loglik
        self.seed = seed

    def _fit(self, dataset: Dataset):
        cfg = self._config()
        params = self._init_params(dataset)
        p_lab = dataset.labeled_prior()
        if self.init_propensity is not None:
            pi0 = np.clip(np.asarray(self.init_propensity, dtype=np.float64),
                          1e-6, 1 - 1e-6)
        else:
            pa = min(max(dataset.p_a1, 1e-6), 1 - 1e-6)
            pi0 = np.full(dataset.num_classes, pa)
        lam = np.log(pi0 / (1.0 - pi0))
        mech_cfg = replace(cfg, learning_rate=self.mechanism_learning_rate)
        opt = OptState.zeros(params.weights.size)
        mopt = OptState.zeros(lam.size)
        rng = substream(cfg.seed, "batch")
        all_idx = np.arange(dataset.n)
        history = []
        for epoch in range(cfg.epochs):
            losses = []
            for batch in _batches(all_idx, cfg.batch_size, rng):
                loss, grad, glam = _mle_batch_grads(
                    params, lam, dataset.X[batch], dataset.y[batch])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"marginal likelihood diverged at epoch {epoch}")
                opt, w = _opt_step(opt, params.weights, grad, cfg)
                params = params.with_weights(w)
                mopt, lam = _opt_step(mopt, lam, glam, mech_cfg)
                losses.append(loss)
            mech = self._mechanism_from_logits(lam, dataset)
            entry = self._history_entry(
                epoch, losses, dataset, mech.implied_unlabeled_prior(p_lab))
            if self.track_loglik:
                entry["marginal_loglik"] = marginal_loglik(params, mech, dataset)
            history.append(entry)
        mechanism = self._mechanism_from_logits(lam, dataset)
        p_unlab = mechanism.implied_unlabeled_prior(p_lab)
        self._finalize(dataset, params, mechanism, p_unlab, history, False)

    def _mechanism_from_logits(self, lam, dataset):
        pi = np.clip(1.0 / (1.0 + np.exp(-lam)), self.clip_floor, 1.0)
        return MissingnessMechanism(propensity=pi, p_labeled=dataset.p_a1,
                                    clip_floor=self.clip_floor)


class EMClassifier(_BaseLabelShift):
    """Label-shift EM with a plain or pseudo-labeling ("simpro") variant.

    Streaming mode (default) interleaves per-batch posterior-weight updates,
    one optimizer step and an exponentially smoothed closed-form mechanism
    refresh. Full mode runs the classic alternation of whole-dataset E and
    guarded full-batch M steps, which keeps the observed-data likelihood
    non-decreasing in the plain variant.

    In the pseudo-labeling variant the network trains under the
    logit-adjusted loss with a running combined-prior estimate and weak or
    strong input augmentation; posterior weights are thresholded one-hot.
    ``frozen_unlabeled_prior`` fixes the posterior-weight prior (stage 2 of
    the two-stage algorithm) while the running logit-adjustment prior keeps
    updating. ``zeta_source="soft"`` accumulates the class masses from the
    pre-threshold posterior weights instead of the one-hot targets, which
    keeps rare classes from starving out of the distribution estimate when
    labels are very scarce (thresholding stays in the loss either way).
    """

    def __init__(self, variant="plain", n_classes=None, architecture="linear",
                 hidden_width=32, learning_rate=8e-3, epochs=45,
                 batch_size=256, optimizer="adam", beta1=0.9, beta2=0.999,
                 adam_eps=1e-8, weight_decay=0.0, confidence_threshold=0.95,
                 warmup_epochs=5, sigma_weak=None, sigma_strong=None,
                 prior_momentum=0.999, mechanism_momentum=0.99,
                 mechanism_update="batch", zeta_source="targets",
                 clip_floor=DEFAULT_CLIP_FLOOR, em_mode="stream",
                 m_step_steps=100, frozen_unlabeled_prior=None,
                 init_classifier=None, init_propensity=None,
                 track_loglik=False, seed=0):
        self.variant = variant
        self.n_classes = n_classes
        self.architecture = architecture
        self.hidden_width = hidden_width
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.weight_decay = weight_decay
        self.confidence_threshold = confidence_threshold
        self.warmup_epochs = warmup_epochs
        self.sigma_weak = sigma_weak
        self.sigma_strong = sigma_strong
        self.prior_momentum = prior_momentum
        self.mechanism_momentum = mechanism_momentum
        self.mechanism_update = mechanism_update
        self.zeta_source = zeta_source
        self.clip_floor = clip_floor
        self.em_mode = em_mode
        self.m_step_steps = m_step_steps
        self.frozen_unlabeled_prior = frozen_unlabeled_prior
        self.init_classifier = init_classifier
        self.init_propensity = init_propensity
        self.track_loglik = track_loglik
        self.seed = seed

    @property
    def _method(self):  # type: ignore[override]
        return "simpro" if self.variant == "simpro" else "em"

    def _fit(self, dataset: Dataset):
        if self.variant not in ("plain", "simpro"):
            raise DomainError(f"unknown EM variant {self.variant!r}")
        if self.mechanism_update not in ("batch", "epoch"):
            raise DomainError("mechanism_update must be 'batch' or 'epoch'")
        if self.zeta_source not in ("targets", "soft"):
            raise DomainError("zeta_source must be 'targets' or 'soft'")
        cfg = self._config()
        if dataset.n_unlabeled == 0:
            self._fit_no_unlabeled(dataset, cfg)
            return
        if self.em_mode == "full":
            self._fit_full(dataset, cfg)
        elif self.em_mode == "stream":
            self._fit_stream(dataset, cfg, dr_batch_prior=False)
        else:
            raise DomainError("em_mode must be 'stream' or 'full'")

    # -- degenerate case: no unlabeled rows reduces to supervised training ----

    def _fit_no_unlabeled(self, dataset, cfg):
        params = self._init_params(dataset)
        history = []
        p_lab = dataset.labeled_prior()
        prior = p_lab if self.variant == "simpro" else None
        params = self._supervised_loop(
            dataset, params, self.warmup_epochs + cfg.epochs, cfg,
            prior=prior, history=history, p_unlabeled=p_lab)
        mechanism = MissingnessMechanism(
            propensity=np.ones(dataset.num_classes), p_labeled=1.0,
            clip_floor=self.clip_floor)
        self._finalize(dataset, params, mechanism, p_lab, history,
                       self.variant == "simpro")

    # -- warm start shared by both modes --------------------------------------

    def _warm_start(self, dataset, cfg, p_lab):
        params = self._init_params(dataset)
        if self.init_classifier is None and self.warmup_epochs > 0:
            prior = p_lab if self.variant == "simpro" else None
            params = self._supervised_loop(dataset, params,
                                           self.warmup_epochs, cfg, prior=prior)
        return params

    def _initial_propensity(self, dataset):
        if self.init_propensity is not None:
            return np.clip(np.asarray(self.init_propensity, dtype=np.float64),
                           self.clip_floor, 1.0)
        # consistent-shape prior assumption: constant propensity P(A=1)
        return np.full(dataset.num_classes,
                       np.clip(dataset.p_a1, self.clip_floor, 1.0))

    # -- classic full-batch EM -------------------------------------------------

    def _fit_full(self, dataset, cfg):
        p_lab = dataset.labeled_prior()
        sw, ss = _resolve_sigmas(self.sigma_weak, self.sigma_strong, dataset)
        params = self._warm_start(dataset, cfg, p_lab)
        frozen = self.frozen_unlabeled_prior
        if frozen is not None:
            frozen = check_distribution(frozen, "frozen_unlabeled_prior")
        mechanism = self._mechanism_for(dataset, p_lab, frozen,
                                        self._initial_propensity(dataset))
        state = EmState(
            classifier=params, mechanism=mechanism,
            labeled_counts=dataset.labeled_counts(),
            variant=self.variant, tau=cfg.confidence_threshold,
            p_unlabeled=frozen if frozen is not None
            else mechanism.implied_unlabeled_prior(p_lab),
            running_py=mix_priors(p_lab,
                                  frozen if frozen is not None else p_lab,
                                  dataset.p_a1),
            frozen_prior=frozen is not None, seed=cfg.seed,
            sigma_weak=sw, sigma_strong=ss,
        )
        history = []
        for epoch in range(cfg.epochs):
            state = e_step(state, dataset)
            state = m_step(state, dataset, cfg, steps=self.m_step_steps)
            if frozen is not None:
                state = replace(state, mechanism=mechanism, p_unlabeled=frozen)
            entry = self._history_entry(epoch, [], dataset, state.p_unlabeled)
            if self.track_loglik:
                entry["marginal_loglik"] = marginal_loglik(
                    state.classifier, state.mechanism, dataset)
            history.append(entry)
        self._finalize(dataset, state.classifier, state.mechanism,
                       state.p_unlabeled, history, self.variant == "simpro")

    def _mechanism_for(self, dataset, p_lab, frozen, pi0):
        if frozen is not None:
            return MissingnessMechanism.from_priors(
                p_lab, frozen, dataset.p_a1, clip_floor=self.clip_floor)
        return MissingnessMechanism(propensity=pi0, p_labeled=dataset.p_a1,
                                    clip_floor=self.clip_floor)

    # -- streaming EM (shared with the batch-update ablation) -----------------

    def _fit_stream(self, dataset, cfg, dr_batch_prior, dr_prior_momentum=0.999):
        simpro = self.variant == "simpro"
        p_lab = dataset.labeled_prior()
        counts_l = dataset.labeled_counts()
        n_u = dataset.n_unlabeled
        p_a1 = dataset.p_a1
        sw, ss = _resolve_sigmas(self.sigma_weak, self.sigma_strong, dataset)
        params = self._warm_start(dataset, cfg, p_lab)
        frozen = self.frozen_unlabeled_prior
        if frozen is not None:
            frozen = check_distribution(frozen, "frozen_unlabeled_prior")
            frozen_mech = MissingnessMechanism.from_priors(
                p_lab, frozen, p_a1, clip_floor=self.clip_floor)
        pi0 = self._initial_propensity(dataset)
        # r0 tracks the mean unlabeled target mass per class (zeta0 / n_u)
        r0 = p_lab * (1.0 - pi0) / pi0 * (counts_l.sum() / max(n_u, 1))
        r0 = np.clip(r0, 1e-12, None)
        run_py = mix_priors(p_lab, frozen if frozen is not None else p_lab, p_a1)
        # with no first stage there is no prior information: start uniform
        dr_prior = np.full(dataset.num_classes, 1.0 / dataset.num_classes)
        rng = substream(cfg.seed, "batch")
        arng = substream(cfg.seed, "augment")
        all_idx = np.arange(dataset.n)
        history = []
        prior_trace = []  # per-epoch snapshot of the posterior-weight prior
        opt = OptState.zeros(params.weights.size)

        def mechanism_now():
            if frozen is not None:
                return frozen_mech
            zeta0 = n_u * r0
            pi = np.clip(counts_l / np.maximum(counts_l + zeta0, 1e-12),
                         self.clip_floor, 1.0)
            return MissingnessMechanism(propensity=pi, p_labeled=p_a1,
                                        clip_floor=self.clip_floor)

        def unlabeled_prior_now():
            if frozen is not None:
                return frozen
            if dr_batch_prior:
                return dr_prior
            s = r0.sum()
            return r0 / s if s > 0 else np.full(dataset.num_classes,
                                                1.0 / dataset.num_classes)

        for epoch in range(cfg.epochs):
            losses = []
            epoch_mass = np.zeros(dataset.num_classes)
            epoch_rows = 0
            for batch in _batches(all_idx, cfg.batch_size, rng):
                yb = dataset.y[batch]
                lb = yb >= 0
                Xb = dataset.X[batch]
                T = np.zeros((len(batch), dataset.num_classes))
                if lb.any():
                    T[np.nonzero(lb)[0], yb[lb]] = 1.0
                weak = augment(Xb, "weak", arng, sigma_weak=sw, sigma_strong=ss)
                strong = augment(Xb, "strong", arng, sigma_weak=sw, sigma_strong=ss)
                ub = ~lb
                mass_u = None
                if ub.any():
                    if simpro:
                        post = softmax(forward(params, weak[ub]))
                        w = post * unlabeled_prior_now()[None, :]
                        mass = w.sum(axis=1, keepdims=True)
                        if np.any(mass <= 0):
                            raise DegeneratePosteriorError("pseudo-label weights collapsed")
                        w /= mass
                        T[ub] = pseudo_label(w, cfg.confidence_threshold)
                        mass_u = w if self.zeta_source == "soft" else T[ub]
                    else:
                        post = softmax(forward(params, Xb[ub]))
                        stay = 1.0 - mechanism_now().clipped
                        w = post * stay[None, :]
                        mass = w.sum(axis=1, keepdims=True)
                        if np.any(mass <= 0):
                            raise DegeneratePosteriorError(
                                "posterior weights collapsed; mechanism saturated")
                        T[ub] = w / mass
                        mass_u = T[ub]
                if simpro:
                    inputs = np.where(lb[:, None], weak, strong)
                    loss, grad = logit_adjusted_loss_and_grad(
                        params, inputs, T, run_py)
                else:
                    loss, grad = weighted_ce_loss_and_grad(params, Xb, T)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"EM loss diverged at epoch {epoch}")
                opt, w_new = _opt_step(opt, params.weights, grad, cfg)
                params = params.with_weights(w_new)
                losses.append(loss)
                mass_total = T.sum()
                if mass_total > 0:
                    batch_py = T.sum(axis=0) / mass_total
                    run_py = self.prior_momentum * run_py + \
                        (1.0 - self.prior_momentum) * batch_py
                    run_py = run_py / run_py.sum()
                if ub.any() and frozen is None:
                    epoch_mass += mass_u.sum(axis=0)
                    epoch_rows += int(ub.sum())
                    if self.mechanism_update == "batch":
                        r0 = self.mechanism_momentum * r0 + \
                            (1.0 - self.mechanism_momentum) * mass_u.mean(axis=0)
                if dr_batch_prior and frozen is None:
                    dr_prior = self._dr_batch_update(
                        params, mechanism_now(), Xb, yb, lb, p_lab, p_a1,
                        run_py, dr_prior, dr_prior_momentum)
            if self.mechanism_update == "epoch" and frozen is None and epoch_rows:
                r0 = epoch_mass / epoch_rows
            prior_trace.append(unlabeled_prior_now().copy())
            entry = self._history_entry(epoch, losses, dataset,
                                        unlabeled_prior_now())
            if self.track_loglik and not simpro:
                entry["marginal_loglik"] = marginal_loglik(
                    params, mechanism_now(), dataset)
            history.append(entry)
        mechanism = mechanism_now()
        p_unlab = unlabeled_prior_now()
        self._finalize(dataset, params, mechanism, p_unlab, history, simpro)
        self.running_py_ = run_py
        self.prior_trace_ = np.array(prior_trace)

    def _dr_batch_update(self, params, mechanism, Xb, yb, lb, p_lab, p_a1,
                         run_py, dr_prior, momentum):
        """One exponentially smoothed per-batch doubly robust prior update."""
        post = softmax(forward(params, Xb))
        if self.variant == "simpro":
            comb = mix_priors(p_lab, dr_prior, p_a1)
            post = post * comb[None, :]
            post /= post.sum(axis=1, keepdims=True)
        contrib = post.copy()
        if lb.any():
            y_lab = yb[lb]
            onehot = np.zeros((int(lb.sum()), post.shape[1]))
            onehot[np.arange(len(y_lab)), y_lab] = 1.0
            contrib[lb] += (onehot - post[lb]) / mechanism.clipped[y_lab][:, None]
        raw = contrib.mean(axis=0)
        if not 0.0 < p_a1 < 1.0:
            return dr_prior
        batch_prior = project_to_simplex((raw - p_a1 * p_lab) / (1.0 - p_a1))
        out = momentum * dr_prior + (1.0 - momentum) * batch_prior
        return out / out.sum()


class BatchUpdateDRClassifier(EMClassifier):
    """Ablation: pseudo-labeling EM whose posterior-weight prior is an
    exponentially smoothed per-batch doubly robust estimate instead of the
    mechanism-implied one. ``dr_prior_momentum=1.0`` never updates after
    initialization."""

    def __init__(self, n_classes=None, architecture="linear", hidden_width=32,
                 learning_rate=8e-3, epochs=45, batch_size=256,
                 optimizer="adam", beta1=0.9, beta2=0.999, adam_eps=1e-8,
                 weight_decay=0.0, confidence_threshold=0.95, warmup_epochs=5,
                 sigma_weak=None, sigma_strong=None, prior_momentum=0.999,
                 mechanism_momentum=0.99, mechanism_update="batch",
                 zeta_source="targets", clip_floor=DEFAULT_CLIP_FLOOR,
                 dr_prior_momentum=0.999, init_classifier=None,
                 init_propensity=None, seed=0):
        super().__init__(
            variant="simpro", n_classes=n_classes, architecture=architecture,
            hidden_width=hidden_width, learning_rate=learning_rate,
            epochs=epochs, batch_size=batch_size, optimizer=optimizer,
            beta1=beta1, beta2=beta2, adam_eps=adam_eps,
            weight_decay=weight_decay,
            confidence_threshold=confidence_threshold,
            warmup_epochs=warmup_epochs, sigma_weak=sigma_weak,
            sigma_strong=sigma_strong, prior_momentum=prior_momentum,
            mechanism_momentum=mechanism_momentum,
            mechanism_update=mechanism_update, zeta_source=zeta_source,
            clip_floor=clip_floor, em_mode="stream", m_step_steps=100,
            frozen_unlabeled_prior=None, init_classifier=init_classifier,
            init_propensity=init_propensity, track_loglik=False, seed=seed)
        self.dr_prior_momentum = dr_prior_momentum

    @property
    def _method(self):  # type: ignore[override]
        return "batch_update"

    def _fit(self, dataset: Dataset):
        cfg = self._config()
        if dataset.n_unlabeled == 0:
            self._fit_no_unlabeled(dataset, cfg)
            return
        self._fit_stream(dataset, cfg, dr_batch_prior=True,
                         dr_prior_momentum=self.dr_prior_momentum)


class DRRiskClassifier(_BaseLabelShift):
    """Trains the classifier by minimizing the doubly robust risk.

    Requires a mechanism from a previous stage; pseudo-labels come from the
    model's own thresholded weak-view predictions and labeled rows are
    reweighted by the inverse propensity, which grows unstable when labeled
    tail classes have small propensities.
    """

    _method = "dr_risk"

    def __init__(self, mechanism=None, propensity=None, n_classes=None,
                 architecture="linear", hidden_width=32, learning_rate=8e-3,
                 epochs=45, batch_size=256, optimizer="adam", beta1=0.9,
                 beta2=0.999, adam_eps=1e-8, weight_decay=0.0,
                 confidence_threshold=0.95, warmup_epochs=5, sigma_weak=None,
                 sigma_strong=None, clip_floor=DEFAULT_CLIP_FLOOR,
                 init_classifier=None, seed=0):
        self.mechanism = mechanism
        self.propensity = propensity
        self.n_classes = n_classes
        self.architecture = architecture
        self.hidden_width = hidden_width
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.weight_decay = weight_decay
        self.confidence_threshold = confidence_threshold
        self.warmup_epochs = warmup_epochs
        self.sigma_weak = sigma_weak
        self.sigma_strong = sigma_strong
        self.clip_floor = clip_floor
        self.init_classifier = init_classifier
        self.seed = seed

    def _resolve_mechanism(self, dataset) -> MissingnessMechanism:
        if self.mechanism is not None:
            return self.mechanism
        if self.propensity is not None:
            return MissingnessMechanism(
                propensity=np.clip(np.asarray(self.propensity, dtype=np.float64),
                                   self.clip_floor, 1.0),
                p_labeled=dataset.p_a1, clip_floor=self.clip_floor)
        raise DomainError(
            "doubly robust risk training requires a mechanism source "
            "(mechanism= or propensity=)")

    def _fit(self, dataset: Dataset):
        cfg = self._config()
        mechanism = self._resolve_mechanism(dataset)
        p_lab = dataset.labeled_prior()
        sw, ss = _resolve_sigmas(self.sigma_weak, self.sigma_strong, dataset)
        params = self._init_params(dataset)
        if self.init_classifier is None and self.warmup_epochs > 0:
            params = self._supervised_loop(dataset, params,
                                           self.warmup_epochs, cfg)
        opt = OptState.zeros(params.weights.size)
        rng = substream(cfg.seed, "batch")
        arng = substream(cfg.seed, "augment")
        all_idx = np.arange(dataset.n)
        history = []
        clip_events = 0
        p_unlab = mechanism.implied_unlabeled_prior(p_lab)
        for epoch in range(cfg.epochs):
            losses = []
            for batch in _batches(all_idx, cfg.batch_size, rng):
                Xb = dataset.X[batch]
                yb = dataset.y[batch]
                ab = yb >= 0
                weak = augment(Xb, "weak", arng, sigma_weak=sw, sigma_strong=ss)
                strong = augment(Xb, "strong", arng, sigma_weak=sw, sigma_strong=ss)
                pseudo = pseudo_label(softmax(forward(params, weak)),
                                      cfg.confidence_threshold)
                loss, grad, clips = dr_risk_loss_and_grad(
                    params, mechanism, strong, yb, ab, pseudo)
                clip_events += clips
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"doubly robust risk diverged at epoch {epoch}")
                opt, w = _opt_step(opt, params.weights, grad, cfg)
                params = params.with_weights(w)
                losses.append(loss)
            history.append(self._history_entry(epoch, losses, dataset, p_unlab))
        self._finalize(dataset, params, mechanism, p_unlab, history, False)
        self.clip_events_ = clip_events


class TwoStageClassifier(_BaseLabelShift):
    """Stage 1: pseudo-labeling EM plus a doubly robust estimate of the
    unlabeled prior. Stage 2: the same training again with that prior frozen
    in the posterior-weight update.

    ``stage1`` and ``stage2`` are estimator prototypes (cloned before use);
    defaults use a linear stage-1 network and a one-hidden-layer stage 2.
    ``cross_fit=K >= 2`` (the default) retrains the stage-1 nuisance per fold
    for the estimate, keeping it independent of the averaged samples;
    ``cross_fit=0`` reuses the single stage-1 fit.
    """

    _method = "two_stage"

    def __init__(self, stage1=None, stage2=None, estimator="dr", cross_fit=2,
                 n_classes=None, seed=0):
        self.stage1 = stage1
        self.stage2 = stage2
        self.estimator = estimator
        self.cross_fit = cross_fit
        self.n_classes = n_classes
        self.seed = seed

    def _default_stage1(self):
        return EMClassifier(variant="simpro", architecture="linear",
                            seed=self.seed)

    def _default_stage2(self):
        return EMClassifier(variant="simpro", architecture="mlp1",
                            seed=self.seed)

    def _fit(self, dataset: Dataset):
        stage1 = clone(self.stage1 if self.stage1 is not None
                       else self._default_stage1())
        stage1.fit_dataset(dataset)
        kwargs = {}
        if self.estimator == "dr" and self.cross_fit:
            proto = self.stage1 if self.stage1 is not None else self._default_stage1()

            def fitter(subset):
                return clone(proto).fit_dataset(subset).as_nuisance()

            kwargs = {"cross_fit": self.cross_fit, "fitter": fitter,
                      "seed": self.seed}
        elif self.estimator == "dr":
            kwargs = {"cross_fit": 0}
        report = run_estimator(self.estimator, stage1.as_nuisance(),
                               dataset, **kwargs)
        frozen = report.p_unlabeled
        stage2 = clone(self.stage2 if self.stage2 is not None
                       else self._default_stage2())
        stage2.set_params(frozen_unlabeled_prior=frozen)
        stage2.fit_dataset(dataset)
        self.stage1_ = stage1
        self.stage2_ = stage2
        self.report_ = report
        self.frozen_prior_ = frozen
        self._finalize(dataset, stage2.classifier_, stage2.mechanism_,
                       frozen, stage2.history_,
                       stage2._softmax_is_uniform_posterior_)


METHODS = {
    "supervised": SupervisedClassifier,
    "mle": MLEClassifier,
    "em": EMClassifier,
    "simpro": EMClassifier,
    "dr-risk": DRRiskClassifier,
    "two-stage": TwoStageClassifier,
    "batch-update": BatchUpdateDRClassifier,
}
