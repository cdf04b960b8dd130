"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line per criterion. The heavy studies run
through the command line interface so the artifacts double as determinism
probes (criterion 9 re-runs the same commands and hash-compares bytes).
"""

import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import assert_grad_close, finite_diff_grad
from lsdr import (
    Dataset,
    MissingnessMechanism,
    MixtureSpec,
    NuisancePair,
    benchmark_scenario,
    dr_estimate,
    dr_risk_loss_and_grad,
    dr_risk_loss_direct,
    influence_values,
    recover_unlabeled_prior,
    run_replications,
)
from lsdr.cli import main
from lsdr.estimators import influence_tangent_terms
from lsdr.io import read_table
from lsdr.network import (
    forward,
    init_params,
    logit_adjusted_loss_and_grad,
    pseudo_label,
    softmax,
    weighted_ce_loss_and_grad,
)
from lsdr.rng import substream
from lsdr.simplex import mix_priors
from lsdr.training import _mle_batch_grads, unlabeled_objective_terms


@pytest.fixture()
def report(capsys):
    """Print one pass/fail line per criterion, visible even under capture."""

    def _report(criterion, ok, detail):
        status = "PASS" if ok else "FAIL"
        with capsys.disabled():
            print(f"[{status}] criterion {criterion}: {detail}")
        assert ok, f"criterion {criterion} failed: {detail}"

    return _report


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness


class TestCriterion1Gradients:
    def test_all_loss_gradients(self, report):
        rng = np.random.default_rng(41)
        worst = {}

        def record(name, analytic, w, loss_fn):
            numeric = finite_diff_grad(loss_fn, w)
            scale = np.maximum(1.0, np.maximum(np.abs(analytic),
                                               np.abs(numeric)))
            err = float(np.max(np.abs(analytic - numeric) / scale))
            worst[name] = max(worst.get(name, 0.0), err)
            assert_grad_close(analytic, numeric, tol=1e-5)

        for arch, hidden in (("linear", 0), ("mlp1", 6)):
            for _ in range(10):
                params = init_params(arch, 3, 4, hidden, rng)
                X = rng.normal(0, 1, (7, 3))
                T = rng.random((7, 4))
                T[rng.random(7) < 0.25] = 0.0
                w = rng.random(7) + 0.5
                prior = rng.random(4) + 0.2
                prior /= prior.sum()

                _, g = weighted_ce_loss_and_grad(params, X, T, w)
                record("weighted_ce", g, params.weights,
                       lambda v: weighted_ce_loss_and_grad(
                           params.with_weights(v), X, T, w)[0])

                _, g = logit_adjusted_loss_and_grad(params, X, T, prior, w)
                record("logit_adjusted", g, params.weights,
                       lambda v: logit_adjusted_loss_and_grad(
                           params.with_weights(v), X, T, prior, w)[0])

        for _ in range(10):
            params = init_params("linear", 3, 3, 0, rng)
            y = rng.integers(-1, 3, 30)
            if not (y >= 0).any():
                y[0] = 0
            X = rng.normal(0, 1, (30, 3))
            lam = rng.normal(0, 0.5, 3)
            _, gw, gl = _mle_batch_grads(params, lam, X, y)
            record("marginal_loglik_classifier", gw, params.weights,
                   lambda v: _mle_batch_grads(params.with_weights(v), lam,
                                              X, y)[0])
            record("marginal_loglik_mechanism", gl, lam,
                   lambda v: _mle_batch_grads(params, v, X, y)[0])

        for _ in range(10):
            params = init_params("linear", 2, 3, 0, rng)
            X = rng.normal(0, 1, (9, 2))
            y = rng.integers(0, 3, 9)
            a = rng.random(9) < 0.5
            y = np.where(a, y, -1)
            pseudo = pseudo_label(softmax(forward(params, X)), 0.5)
            mech = MissingnessMechanism(rng.uniform(0.15, 0.9, 3), 0.5)
            _, g, _ = dr_risk_loss_and_grad(params, mech, X, y, a, pseudo)
            record("dr_risk", g, params.weights,
                   lambda v: dr_risk_loss_and_grad(
                       params.with_weights(v), mech, X, y, a, pseudo)[0])

        detail = "; ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
        report(1, all(v <= 1e-5 for v in worst.values()), detail)


# ---------------------------------------------------------------------------
# criterion 2: exact algebraic identities


class TestCriterion2Identities:
    def test_identities(self, report):
        rng = np.random.default_rng(42)
        gaps = {}

        # doubly robust collapse under full labels and unit propensity
        y = rng.integers(0, 3, 60)
        ds = Dataset(X=rng.normal(0, 1, (60, 2)), y=y, num_classes=3)
        mech = MissingnessMechanism(np.ones(3), 1.0)

        def messy(X):
            P = rng.random((len(X), 3))
            return P / P.sum(axis=1, keepdims=True)

        rep = dr_estimate(NuisancePair(messy, mech), ds, 0)
        freq = np.bincount(y, minlength=3) / len(y)
        gaps["dr_collapse"] = float(np.max(np.abs(rep.raw - freq)))

        # doubly robust risk: correction form equals meta-target form
        gap = 0.0
        for _ in range(10):
            params = init_params("linear", 2, 3, 0, rng)
            X = rng.normal(0, 1, (12, 2))
            yy = rng.integers(0, 3, 12)
            aa = rng.random(12) < 0.5
            yy = np.where(aa, yy, -1)
            pseudo = pseudo_label(softmax(forward(params, X)), 0.4)
            mech2 = MissingnessMechanism(rng.uniform(0.2, 0.9, 3), 0.5)
            loss, _, _ = dr_risk_loss_and_grad(params, mech2, X, yy, aa, pseudo)
            direct = dr_risk_loss_direct(params, mech2, X, yy, aa, pseudo)
            gap = max(gap, abs(loss - direct))
        gaps["dr_risk_paths"] = gap

        # influence function tangent decomposition
        from lsdr.synth import bayes_posterior_matrix, sample_iid

        mix = MixtureSpec.orthogonal(3, 3, separation=4.0)
        ds2 = sample_iid(mix, [0.5, 0.3, 0.2], [0.2, 0.3, 0.5], 0.4, 500,
                         substream(2, "mc/r=0"))
        p_y = ds2.truth.p_marginal

        def posterior(X):
            return bayes_posterior_matrix(mix, p_y, X)

        nuisance = NuisancePair(posterior, ds2.truth.mechanism())
        phi = influence_values(nuisance, ds2, p_y)
        t1, t2, t3 = influence_tangent_terms(nuisance, ds2, p_y,
                                             labels=ds2.hidden_y)
        gaps["tangent_sum"] = float(np.max(np.abs(t1 + t2 + t3 - phi)))

        # prior recovery round trip
        gap = 0.0
        for _ in range(50):
            c = rng.integers(2, 9)
            p_l = rng.random(c) + 0.05
            p_l /= p_l.sum()
            p_u = rng.random(c) + 0.05
            p_u /= p_u.sum()
            p_a1 = rng.uniform(0.1, 0.9)
            back = recover_unlabeled_prior(mix_priors(p_l, p_u, p_a1),
                                           p_l, p_a1)
            gap = max(gap, float(np.max(np.abs(back - p_u))))
        gaps["prior_round_trip"] = gap

        detail = "; ".join(f"{k}={v:.2e}" for k, v in gaps.items())
        report(2, all(v <= 1e-10 for v in gaps.values()), detail)


# ---------------------------------------------------------------------------
# criterion 3: double robustness at N=20000, R=200


class TestCriterion3DoubleRobustness:
    def test_corrupted_posterior_oracle_propensity(self, report):
        scenario = benchmark_scenario(
            n_per_rep=20_000, replications=200, seed=11,
            regime="oracle_propensity_only", posterior_temperature=3.0)
        rep = run_replications(scenario)
        z_dr = np.abs(rep.per_estimator["dr"]["bias"]) / \
            rep.per_estimator["dr"]["bias_se"]
        z_or = np.abs(rep.per_estimator["or"]["bias"]) / \
            rep.per_estimator["or"]["bias_se"]
        ok = bool(np.all(z_dr <= 3.0) and np.all(z_or > 5.0))
        report("3a", ok,
               f"temperature-3 posterior: DR |z| {np.round(z_dr, 2)} <= 3, "
               f"OR |z| {np.round(z_or, 1)} > 5")

    def test_corrupted_propensity_oracle_posterior(self, report):
        scenario = benchmark_scenario(
            n_per_rep=20_000, replications=200, seed=12,
            regime="oracle_posterior_only", propensity_factor=2.0)
        rep = run_replications(scenario)
        z_dr = np.abs(rep.per_estimator["dr"]["bias"]) / \
            rep.per_estimator["dr"]["bias_se"]
        z_ipw = np.abs(rep.per_estimator["ipw"]["bias"]) / \
            rep.per_estimator["ipw"]["bias_se"]
        ok = bool(np.all(z_dr <= 3.0) and np.all(z_ipw > 5.0))
        report("3b", ok,
               f"doubled propensity: DR |z| {np.round(z_dr, 2)} <= 3, "
               f"IPW |z| {np.round(z_ipw, 0)} > 5")


# ---------------------------------------------------------------------------
# CLI-produced artifacts shared by criteria 4, 5, 6, 7 and 9


COVERAGE_ARGS = ["montecarlo", "coverage", "--regime", "oracle-both",
                 "--n", "5000", "--reps", "500", "--seed", "21"]

DECAY_ARGS = ["montecarlo", "bias-decay", "--n-grid", "1000,4000,16000",
              "--coef", "0.5", "--reps", "200", "--separation", "4.0",
              "--seed", "22"]

SWEEP_ESTIMATION_ARGS = [
    "montecarlo", "sweep", "--shapes", "all", "--seeds", "3",
    "--methods", "mle,em,simpro", "--classes", "10", "--dim", "8",
    "--gamma", "50", "--n1", "300", "--m1", "800",
    "--min-distance", "3.2", "--mean-scale", "2.2", "--mixture-seed", "2024",
    "--epochs", "45", "--lr", "8e-3", "--batch-size", "256",
    "--tau", "0.95", "--warmup", "5", "--prior-momentum", "0.99",
    "--mechanism-momentum", "0.99", "--mechanism-lr", "1e-2",
    "--n-test", "5000",
]

SWEEP_ACCURACY_ARGS = [
    "montecarlo", "sweep", "--shapes", "all", "--seeds", "3",
    "--methods", "simpro,two-stage,batch-update,dr-risk",
    "--classes", "10", "--dim", "8", "--gamma", "100",
    "--n1", "300", "--m1", "800",
    "--min-distance", "2.3", "--mean-scale", "1.55", "--mixture-seed", "2024",
    "--epochs", "45", "--lr", "8e-3", "--batch-size", "256",
    "--tau", "0.95", "--warmup", "5", "--prior-momentum", "0.99",
    "--mechanism-momentum", "0.99", "--zeta-source", "soft",
    "--dr-prior-momentum", "0.999", "--stage2-arch", "linear",
    "--n-test", "20000",
]


@pytest.fixture(scope="module")
def coverage_artifact(tmp_path_factory):
    out = tmp_path_factory.mktemp("coverage") / "coverage.json"
    assert main(COVERAGE_ARGS + ["--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def decay_artifact(tmp_path_factory):
    out = tmp_path_factory.mktemp("decay") / "decay.json"
    assert main(DECAY_ARGS + ["--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def estimation_sweep_dir(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("sweep_estimation")
    assert main(SWEEP_ESTIMATION_ARGS + ["--out-dir", str(out_dir)]) == 0
    return out_dir


@pytest.fixture(scope="module")
def accuracy_sweep_dir(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("sweep_accuracy")
    assert main(SWEEP_ACCURACY_ARGS + ["--out-dir", str(out_dir)]) == 0
    return out_dir


def mean_tv(records, method, estimator, shape):
    vals = [float(r["tv"]) for r in records
            if r["method"] == method and r["estimator"] == estimator
            and r["shape"] == shape]
    assert len(vals) == 3
    return float(np.mean(vals))


def mean_top1(records, method, shape):
    vals = {(r["seed"]): float(r["top1"]) for r in records
            if r["method"] == method and r["shape"] == shape}
    assert len(vals) == 3
    return float(np.mean(list(vals.values())))


SHAPES = ("consistent", "uniform", "reversed", "middle", "headtail")


# ---------------------------------------------------------------------------
# criterion 4: coverage and variance calibration


class TestCriterion4Coverage:
    def test_coverage_within_binomial_band(self, coverage_artifact, report):
        doc = json.loads(coverage_artifact.read_text())
        coverage = np.array(doc["coverage"])
        lo, hi = doc["coverage_band"]
        ratio = np.array(doc["variance_ratio"])
        ok_cov = bool(np.all((coverage >= lo) & (coverage <= hi)))
        ok_var = bool(np.all((ratio >= 0.7) & (ratio <= 1.4)))
        report(4, ok_cov and ok_var,
               f"coverage {np.round(coverage, 4)} in [{lo:.4f}, {hi:.4f}]; "
               f"scaled-error variance / plug-in {np.round(ratio, 3)} "
               f"in [0.7, 1.4]")


# ---------------------------------------------------------------------------
# criterion 5: bias decay slopes


class TestCriterion5BiasDecay:
    def test_slopes(self, decay_artifact, report):
        doc = json.loads(decay_artifact.read_text())
        dr = doc["slopes"]["dr"]
        orr = doc["slopes"]["or"]
        ok = dr <= -0.45 and orr >= -0.35
        biases = {row["n"]: row["dr"]["bias_l1_half"] for row in doc["grid"]}
        report(5, ok,
               f"log-log slopes: DR {dr:.3f} <= -0.45, OR {orr:.3f} >= -0.35 "
               f"(DR bias by N: {biases})")


# ---------------------------------------------------------------------------
# criterion 6: estimation quality orderings


class TestCriterion6EstimationQuality:
    def test_semi_supervised_beats_baseline_and_dr_wins(
            self, estimation_sweep_dir, report):
        records = read_table(estimation_sweep_dir / "records.csv")
        baselines = read_table(estimation_sweep_dir / "baselines.csv")
        base = {s: float(np.mean([float(b["baseline_tv"]) for b in baselines
                                  if b["shape"] == s])) for s in SHAPES}
        wins = {}
        for method in ("mle", "em", "simpro"):
            wins[method] = sum(
                mean_tv(records, method, "dr", s) < base[s] for s in SHAPES)
        ok_baseline = all(v >= 4 for v in wins.values())

        dr_best = 0
        for s in SHAPES:
            dr = mean_tv(records, "simpro", "dr", s)
            if dr <= mean_tv(records, "simpro", "or", s) and \
               dr <= mean_tv(records, "simpro", "ipw", s):
                dr_best += 1
        ok_dr = dr_best >= 3
        report(6, ok_baseline and ok_dr,
               f"beats-baseline shapes per method {wins} (need >=4/5 each); "
               f"doubly robust best-of-three on {dr_best}/5 shapes "
               f"(need >=3)")


# ---------------------------------------------------------------------------
# criterion 7: two-stage accuracy orderings


class TestCriterion7TwoStage:
    def test_orderings(self, accuracy_sweep_dir, report):
        records = read_table(accuracy_sweep_dir / "records.csv")
        two = {s: mean_top1(records, "two-stage", s) for s in SHAPES}
        sim = {s: mean_top1(records, "simpro", s) for s in SHAPES}
        batch = {s: mean_top1(records, "batch-update", s) for s in SHAPES}
        drr = {s: mean_top1(records, "dr-risk", s) for s in SHAPES}
        deltas = {s: 100 * (two[s] - sim[s]) for s in SHAPES}
        ok_floor = all(d >= -0.5 for d in deltas.values())
        strict = sum(d > 0 for d in deltas.values())
        ok_batch = batch["consistent"] < two["consistent"]
        ok_drrisk = drr["reversed"] < min(two["reversed"], batch["reversed"])
        ok = ok_floor and strict >= 3 and ok_batch and ok_drrisk
        report(7, ok,
               f"two-stage minus simpro (points): "
               f"{ {s: round(d, 2) for s, d in deltas.items()} } "
               f"(floor -0.5, strictly greater on {strict}/5, need >=3); "
               f"consistent: batch-update {100 * batch['consistent']:.2f} < "
               f"two-stage {100 * two['consistent']:.2f}; reversed: dr-risk "
               f"{100 * drr['reversed']:.2f} worst of trio")


# ---------------------------------------------------------------------------
# criterion 8: reduction to the consistency-training unlabeled loss


class TestCriterion8FixMatchReduction:
    def test_term_by_term_equality(self, report):
        rng = np.random.default_rng(48)
        params = init_params("linear", 4, 5, 0, rng)
        X_weak = rng.normal(0, 1, (40, 4))
        X_strong = X_weak + rng.normal(0, 0.4, X_weak.shape)
        mech = MissingnessMechanism(np.full(5, 0.25), 0.25)
        tau = 0.7
        terms = unlabeled_objective_terms(params, mech, X_weak, X_strong, tau)
        from lsdr.network import log_softmax

        delta = pseudo_label(softmax(forward(params, X_weak)), tau)
        direct = -(delta * log_softmax(forward(params, X_strong))).sum(axis=1)
        gap = float(np.max(np.abs(terms - direct)))
        active = int(delta.sum())
        report(8, gap <= 1e-10 and 0 < active < len(X_weak),
               f"term-by-term gap {gap:.2e} <= 1e-10 with thresholding "
               f"active ({active}/{len(X_weak)} rows confident)")


# ---------------------------------------------------------------------------
# criterion 9: bit reproducibility of the CLI artifacts


class TestCriterion9Determinism:
    def test_coverage_artifact_reproducible(self, coverage_artifact, report):
        first = sha(coverage_artifact)
        # second run of the same command in a separate process
        cmd = [sys.executable, "-m", "lsdr.cli"] + COVERAGE_ARGS + \
            ["--out", str(coverage_artifact)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        second = sha(coverage_artifact)
        report("9a", first == second,
               f"coverage artifact sha256 {first[:16]}... identical across "
               f"two process-level runs")

    def test_sweep_artifacts_reproducible(self, estimation_sweep_dir, report):
        names = ("records.csv", "aggregated.csv", "baselines.csv")
        before = {n: sha(estimation_sweep_dir / n) for n in names}
        assert main(SWEEP_ESTIMATION_ARGS +
                    ["--out-dir", str(estimation_sweep_dir)]) == 0
        after = {n: sha(estimation_sweep_dir / n) for n in names}
        ok = before == after
        report("9b", ok,
               f"sweep artifacts {names} byte-identical across two runs")
