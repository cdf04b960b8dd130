"""Monte Carlo verification harness.

Three studies:

* ``run_replications``: repeated i.i.d. draws with oracle, corrupted or
  learned nuisances; records per-estimator errors, confidence-interval
  coverage and normality diagnostics for the doubly robust estimator.
* ``bias_decay_study``: injects nuisance errors shrinking at the fourth-root
  rate and fits log-log bias slopes; the doubly robust bias must decay at
  the product rate while single-nuisance estimators keep the slow rate.
* ``shape_sweep``: trains the semi-supervised methods across the five
  unlabeled-distribution shapes and tabulates estimation error and balanced
  test accuracy.

Replications own independent substreams keyed by replication index, so
results are invariant to worker count; aggregation reduces in index order.
``LSDR_THREADS`` caps process parallelism (default sequential).
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import clone

from .data import DEFAULT_CLIP_FLOOR, MissingnessMechanism
from .errors import DomainError
from .estimators import (
    NuisancePair,
    dr_estimate,
    ipw_estimate,
    or_estimate,
)
from .reporting import ExperimentRecord, uniform_test_eval
from .rng import substream
from .simplex import mix_priors, tv_distance
from .synth import (
    MixtureSpec,
    ShiftConfig,
    apply_shape,
    bayes_posterior_matrix,
    generate,
    sample_iid,
)
from .validation import check_distribution

REGIMES = (
    "oracle_both",
    "oracle_posterior_only",
    "oracle_propensity_only",
    "corrupted_both",
    "learned_both",
)


def ladder_prior(num_classes: int, gamma: float, shape: str = "consistent") -> np.ndarray:
    """Continuous long-tail prior: the count ladder normalized and shaped."""
    expo = -np.arange(num_classes, dtype=np.float64) / (num_classes - 1)
    raw = np.power(float(gamma), expo)
    if shape == "uniform":
        raw = np.ones(num_classes)
    else:
        raw = apply_shape(np.floor(raw * 10**9).astype(np.int64), shape).astype(float)
    return raw / raw.sum()


# -- nuisance corruption kinds ----------------------------------------------


def corrupt_posterior_temperature(P, alpha: float) -> np.ndarray:
    """Power transform on posterior rows; alpha > 1 sharpens."""
    Q = np.power(np.clip(P, 1e-300, None), alpha)
    return Q / Q.sum(axis=-1, keepdims=True)


def corrupt_posterior_mix(P, lam: float) -> np.ndarray:
    """Mix posterior rows toward uniform with weight lam.

    The induced error is exactly linear in lam, which makes it the right
    knob for rate measurements (the temperature map has only a second-order
    mean effect).
    """
    C = P.shape[-1]
    return (1.0 - lam) * P + lam / C


def corrupt_propensity_scale(pi, factor: float, clip_floor: float) -> np.ndarray:
    """Multiplicative propensity distortion, clipped into [clip_floor, 1]."""
    return np.clip(np.asarray(pi) * factor, clip_floor, 1.0)


@dataclass(frozen=True)
class McScenario:
    """One Monte Carlo configuration: sampling design plus nuisance regime."""

    mixture: MixtureSpec
    p_labeled: np.ndarray
    p_unlabeled: np.ndarray
    p_a1: float
    n_per_rep: int
    replications: int
    seed: int = 0
    regime: str = "oracle_both"
    posterior_temperature: float = 3.0      # used when the posterior is corrupted
    posterior_mix: Optional[float] = None   # overrides temperature when set
    propensity_factor: float = 2.0          # used when the propensity is corrupted
    clip_floor: float = DEFAULT_CLIP_FLOOR
    ci_level: float = 0.95
    trainer: Optional[object] = None        # estimator prototype for learned_both

    def __post_init__(self):
        object.__setattr__(self, "p_labeled", check_distribution(self.p_labeled))
        object.__setattr__(self, "p_unlabeled", check_distribution(self.p_unlabeled))
        if self.replications < 2:
            raise DomainError("replications must be >= 2")
        if self.n_per_rep < 10 * self.mixture.num_classes:
            raise DomainError("n_per_rep must be at least 10 * num_classes")
        if self.regime not in REGIMES:
            raise DomainError(f"unknown regime {self.regime!r}")
        if self.regime == "learned_both" and self.trainer is None:
            raise DomainError("learned_both regime requires a trainer prototype")

    @property
    def p_marginal(self) -> np.ndarray:
        return mix_priors(self.p_labeled, self.p_unlabeled, self.p_a1)

    @property
    def true_propensity(self) -> np.ndarray:
        return self.p_a1 * self.p_labeled / self.p_marginal


def _scenario_nuisance(scenario: McScenario, dataset) -> NuisancePair:
    truth_prior = scenario.p_marginal
    mix = scenario.mixture

    def oracle_posterior(X):
        return bayes_posterior_matrix(mix, truth_prior, X)

    posterior_fn = oracle_posterior
    pi = np.clip(scenario.true_propensity, scenario.clip_floor, 1.0)
    corrupt_post = scenario.regime in ("oracle_propensity_only", "corrupted_both")
    corrupt_prop = scenario.regime in ("oracle_posterior_only", "corrupted_both")
    if scenario.regime == "learned_both":
        model = clone(scenario.trainer)
        model.fit_dataset(dataset.without_hidden())
        return model.as_nuisance()
    if corrupt_post:
        if scenario.posterior_mix is not None:
            lam = scenario.posterior_mix

            def posterior_fn(X):
                return corrupt_posterior_mix(oracle_posterior(X), lam)
        else:
            alpha = scenario.posterior_temperature

            def posterior_fn(X):
                return corrupt_posterior_temperature(oracle_posterior(X), alpha)
    if corrupt_prop:
        pi = corrupt_propensity_scale(scenario.true_propensity,
                                      scenario.propensity_factor,
                                      scenario.clip_floor)
    mechanism = MissingnessMechanism(propensity=pi, p_labeled=scenario.p_a1,
                                     clip_floor=scenario.clip_floor)
    return NuisancePair(posterior_fn=posterior_fn, mechanism=mechanism)


def _one_replication(scenario: McScenario, r: int):
    rng = substream(scenario.seed, f"mc/r={r}")
    dataset = sample_iid(scenario.mixture, scenario.p_labeled,
                         scenario.p_unlabeled, scenario.p_a1,
                         scenario.n_per_rep, rng)
    nuisance = _scenario_nuisance(scenario, dataset)
    truth = scenario.p_marginal
    out = {}
    rep_or = or_estimate(nuisance, dataset)
    rep_ipw = ipw_estimate(nuisance, dataset)
    rep_dr = dr_estimate(nuisance, dataset, 0, level=scenario.ci_level)
    out["or"] = rep_or.raw - truth
    out["ipw"] = rep_ipw.raw - truth
    out["dr"] = rep_dr.raw - truth
    out["dr_variance"] = rep_dr.influence_variance
    out["covered"] = (np.abs(rep_dr.raw - truth) <= rep_dr.ci_half_widths)
    out["clip_events"] = rep_dr.clip_events
    return out


@dataclass
class McReport:
    """Aggregated replication study results (see ``to_dict``)."""

    scenario: dict
    replications_done: int
    failures: int
    per_estimator: dict
    coverage: np.ndarray
    coverage_band: tuple
    mean_plugin_variance: np.ndarray
    scaled_error_variance: np.ndarray
    variance_ratio: np.ndarray
    normality: dict
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [conv(x) for x in v]
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            return v

        return {
            "scenario": conv(self.scenario),
            "replications_done": self.replications_done,
            "failures": self.failures,
            "per_estimator": conv(self.per_estimator),
            "coverage": conv(self.coverage),
            "coverage_band": conv(self.coverage_band),
            "mean_plugin_variance": conv(self.mean_plugin_variance),
            "scaled_error_variance": conv(self.scaled_error_variance),
            "variance_ratio": conv(self.variance_ratio),
            "normality": conv(self.normality),
            "notes": conv(self.notes),
        }


def binomial_band(n: int, p: float, z_sigma: float = 3.0) -> tuple:
    """Central coverage band from the exact Binomial(n, p) distribution.

    Returns (lo, hi) proportions whose tail mass each is at most the normal
    z_sigma tail; computed by walking the pmf, no approximation.
    """
    from math import lgamma, log
    from statistics import NormalDist

    tail = 1.0 - NormalDist().cdf(z_sigma)
    ks = np.arange(n + 1)
    log_pmf = (
        np.array([lgamma(n + 1) - lgamma(k + 1) - lgamma(n - k + 1) for k in ks])
        + ks * log(p) + (n - ks) * log(1 - p)
    )
    pmf = np.exp(log_pmf)
    cdf = np.cumsum(pmf)
    k_lo = int(np.searchsorted(cdf, tail))
    k_hi = int(np.searchsorted(cdf, 1.0 - tail))
    return k_lo / n, min(k_hi, n) / n


def _max_workers() -> int:
    return max(1, int(os.environ.get("LSDR_THREADS", "1")))


def run_replications(scenario: McScenario) -> McReport:
    """Run the replication study and aggregate in replication order."""
    R = scenario.replications
    workers = _max_workers()
    results = [None] * R
    failures = 0
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {r: pool.submit(_one_replication, scenario, r)
                       for r in range(R)}
            for r in range(R):
                try:
                    results[r] = futures[r].result()
                except Exception as exc:  # recorded, run continues
                    warnings.warn(f"replication {r} failed: {exc}")
                    failures += 1
    else:
        for r in range(R):
            try:
                results[r] = _one_replication(scenario, r)
            except Exception as exc:
                warnings.warn(f"replication {r} failed: {exc}")
                failures += 1
    done = [res for res in results if res is not None]
    if not done:
        raise DomainError("all replications failed")
    n = scenario.n_per_rep
    per_estimator = {}
    for name in ("or", "ipw", "dr"):
        errs = np.array([res[name] for res in done])
        scaled = np.sqrt(n) * errs
        per_estimator[name] = {
            "bias": errs.mean(axis=0),
            "bias_se": errs.std(axis=0, ddof=1) / np.sqrt(len(done)),
            "rmse": np.sqrt((errs ** 2).mean(axis=0)),
            "scaled_mean": scaled.mean(axis=0),
            "scaled_variance": scaled.var(axis=0, ddof=1),
        }
    covered = np.array([res["covered"] for res in done])
    coverage = covered.mean(axis=0)
    band = binomial_band(len(done), scenario.ci_level)
    plug = np.array([res["dr_variance"] for res in done]).mean(axis=0)
    scaled_var = per_estimator["dr"]["scaled_variance"]
    dr_scaled = np.sqrt(n) * np.array([res["dr"] for res in done])
    centered = dr_scaled - dr_scaled.mean(axis=0)
    s = centered.std(axis=0, ddof=1)
    skew = (centered ** 3).mean(axis=0) / s ** 3
    kurt = (centered ** 4).mean(axis=0) / s ** 4 - 3.0
    return McReport(
        scenario={
            "regime": scenario.regime, "n_per_rep": n,
            "replications": R, "seed": scenario.seed,
            "num_classes": scenario.mixture.num_classes,
            "p_labeled": scenario.p_labeled, "p_unlabeled": scenario.p_unlabeled,
            "p_a1": scenario.p_a1, "ci_level": scenario.ci_level,
            "posterior_temperature": scenario.posterior_temperature,
            "posterior_mix": scenario.posterior_mix,
            "propensity_factor": scenario.propensity_factor,
        },
        replications_done=len(done), failures=failures,
        per_estimator=per_estimator, coverage=coverage, coverage_band=band,
        mean_plugin_variance=plug, scaled_error_variance=scaled_var,
        variance_ratio=scaled_var / plug,
        normality={"skewness": skew, "excess_kurtosis": kurt},
    )


_BENCH_DIRECTIONS = np.array([[0.0, 0.0], [1.0, 0.23], [0.35, 1.08]])


def benchmark_scenario(*, n_per_rep, replications, seed=0, regime="oracle_both",
                       separation=2.6, p_labeled=(0.7, 0.2, 0.1),
                       p_unlabeled=(0.2, 0.3, 0.5), p_a1=0.2,
                       posterior_temperature=3.0, posterior_mix=None,
                       propensity_factor=2.0, clip_floor=DEFAULT_CLIP_FLOOR,
                       ci_level=0.95, trainer=None) -> McScenario:
    """Three-class benchmark used by the verification studies.

    Long-tailed labeled prior, unlabeled-heavy tail, every propensity at most
    1/2 so the doubled-propensity corruption never hits the upper clip
    (keeping the corruption ratio constant across classes). ``separation``
    scales the triangle of class means; the default leaves real class
    overlap, bias-rate studies use a larger value.
    """
    mixture = MixtureSpec(3, 2, separation * _BENCH_DIRECTIONS, 1.0)
    return McScenario(
        mixture=mixture, p_labeled=np.asarray(p_labeled, dtype=np.float64),
        p_unlabeled=np.asarray(p_unlabeled, dtype=np.float64), p_a1=p_a1,
        n_per_rep=n_per_rep, replications=replications, seed=seed,
        regime=regime, posterior_temperature=posterior_temperature,
        posterior_mix=posterior_mix, propensity_factor=propensity_factor,
        clip_floor=clip_floor, ci_level=ci_level, trainer=trainer,
    )


# -- bias decay under fourth-root corruption ----------------------------------


def bias_decay_study(scenario: McScenario, n_grid: Sequence[int],
                     magnitude_coef: float = 0.5,
                     replications: Optional[int] = None,
                     corrupt: str = "both") -> dict:
    """Bias of OR, IPW and DR under nuisance errors of size coef * N^(-1/4).

    The posterior is mixed toward uniform with weight lam and the propensity
    is shrunk by 1/(1+lam), lam = coef * N^(-1/4); both errors are exactly
    proportional to lam. ``corrupt`` restricts the injection to one nuisance
    ("posterior" or "propensity"), which isolates the structural
    independences (outcome regression never sees the propensity and either
    single corruption leaves the doubly robust estimate unbiased).

    Bias is measured by a paired corrupted-minus-clean evaluation on common
    draws, collapsed over the labeling indicator (its conditional mean given
    the hidden label is exact), which removes the Monte Carlo variance that
    would otherwise swamp the doubly robust bias. Returns per-N bias tables
    and fitted log-log slopes.
    """
    if len(n_grid) < 3:
        raise DomainError("bias decay needs at least 3 grid points")
    if corrupt not in ("both", "posterior", "propensity"):
        raise DomainError("corrupt must be 'both', 'posterior' or 'propensity'")
    R = replications or scenario.replications
    mix = scenario.mixture
    truth_prior = scenario.p_marginal
    pi_true = np.clip(scenario.true_propensity, scenario.clip_floor, 1.0)
    rows = []
    for n in n_grid:
        lam = magnitude_coef * float(n) ** -0.25
        diffs = {"or": [], "ipw": [], "dr": []}
        for r in range(R):
            rng = substream(scenario.seed, f"mc/decay/n={n}/r={r}")
            ds = sample_iid(mix, scenario.p_labeled, scenario.p_unlabeled,
                            scenario.p_a1, int(n), rng)
            y_true = ds.hidden_y
            post = bayes_posterior_matrix(mix, truth_prior, ds.X)
            post_c = post
            pi_c = pi_true
            if corrupt in ("both", "posterior"):
                post_c = corrupt_posterior_mix(post, lam)
            if corrupt in ("both", "propensity"):
                pi_c = corrupt_propensity_scale(
                    scenario.true_propensity, 1.0 / (1.0 + lam),
                    scenario.clip_floor)
            ratio = pi_true[y_true] / pi_c[y_true]
            dpost = post_c - post
            diffs["or"].append(dpost.mean(axis=0))
            onehot = np.zeros_like(post)
            onehot[np.arange(ds.n), y_true] = 1.0
            diffs["ipw"].append((onehot * (ratio - 1.0)[:, None]).mean(axis=0))
            diffs["dr"].append((dpost * (1.0 - ratio)[:, None]).mean(axis=0))
        row = {"n": int(n), "lambda": lam}
        for name, arr in diffs.items():
            arr = np.array(arr)
            bias_vec = arr.mean(axis=0)
            row[name] = {
                "bias": bias_vec,
                "bias_l1_half": 0.5 * float(np.abs(bias_vec).sum()),
                "noise_l1_half": 0.5 * float(
                    (arr.std(axis=0, ddof=1) / np.sqrt(R)).sum()),
            }
        rows.append(row)
    slopes = {}
    logn = np.log([row["n"] for row in rows])
    for name in ("or", "ipw", "dr"):
        logb = np.log([max(row[name]["bias_l1_half"], 1e-300) for row in rows])
        slopes[name] = float(np.polyfit(logn, logb, 1)[0])
    return {
        "grid": rows,
        "slopes": slopes,
        "magnitude_coef": magnitude_coef,
        "corrupt": corrupt,
        "replications": R,
        "seed": scenario.seed,
        "reference_margins": {"dr_slope_max": -0.45, "or_slope_min": -0.35},
        "measurement": "paired corrupted-minus-clean, collapsed over labeling",
    }


# -- five-shape sweep ---------------------------------------------------------


def shape_sweep(mixture: MixtureSpec, *, gamma_l: float, gamma_u: float,
                n1: int, m1: int, methods: dict, seeds: Sequence[int],
                shapes: Sequence[str] = ("consistent", "uniform", "reversed",
                                         "middle", "headtail"),
                estimators: Sequence[str] = ("or", "ipw", "dr"),
                n_test: int = 5000, eval_seed: int = 777):
    """Train each method on each shape and tabulate TV error plus accuracy.

    ``methods`` maps method name to an estimator prototype (cloned per run).
    Returns (records, baseline_rows): records carry one row per
    (method, estimator, shape, seed); baselines give the no-information
    labeled-prior TV per shape.
    """
    records = []
    baselines = []
    for shape in shapes:
        gu = 1.0 if shape == "uniform" else gamma_u
        for seed in seeds:
            cfg = ShiftConfig(gamma_l=gamma_l, gamma_u=gu, shape=shape,
                              n1=n1, m1=m1, seed=seed)
            dataset = generate(mixture, cfg)
            truth_pu = dataset.truth.p_unlabeled
            baselines.append({
                "shape": shape, "seed": seed,
                "baseline_tv": tv_distance(dataset.labeled_prior(), truth_pu),
            })
            for name, proto in methods.items():
                model = clone(proto)
                if hasattr(model, "seed"):
                    model.set_params(seed=seed)
                t0 = time.perf_counter()
                model.fit_dataset(dataset)
                wall = time.perf_counter() - t0
                acc = uniform_test_eval(model, mixture, n_test,
                                        seed=eval_seed + seed)
                nuisance = model.as_nuisance()
                for est_name in estimators:
                    if est_name == "or":
                        rep = or_estimate(nuisance, dataset)
                    elif est_name == "ipw":
                        rep = ipw_estimate(nuisance, dataset)
                    else:
                        rep = dr_estimate(nuisance, dataset, 0)
                    records.append(ExperimentRecord(
                        method=name, estimator=est_name, shape=shape,
                        gamma_l=gamma_l, gamma_u=gu, seed=seed,
                        tv=tv_distance(rep.p_unlabeled, truth_pu),
                        top1=acc, wall_clock=wall,
                    ))
    return records, baselines
