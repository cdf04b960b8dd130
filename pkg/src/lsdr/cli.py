"""Command-line interface.

Commands: ``synth`` (dataset generation), ``train`` (the method family),
``estimate`` (class-prior estimators over a checkpoint or oracle nuisance),
``montecarlo`` (coverage, bias-decay and shape-sweep studies), ``eval``
(balanced test accuracy) and ``report`` (aggregate record tables).

Every command takes ``--seed`` and is bit-reproducible for a fixed seed;
every output file embeds a format version and its fully resolved config.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import io as lio
from .data import DEFAULT_CLIP_FLOOR, MissingnessMechanism
from .errors import DomainError
from .estimators import NuisancePair, run_estimator
from .montecarlo import (
    McScenario,
    benchmark_scenario,
    bias_decay_study,
    run_replications,
    shape_sweep,
)
from .reporting import ExperimentRecord, aggregate, records_to_dicts, uniform_test_eval
from .simplex import tv_distance
from .synth import (
    SHAPES,
    MixtureSpec,
    ShiftConfig,
    bayes_posterior_matrix,
    generate,
)
from .training import (
    BatchUpdateDRClassifier,
    DRRiskClassifier,
    EMClassifier,
    MLEClassifier,
    SupervisedClassifier,
    TwoStageClassifier,
)

RECORD_COLUMNS = ("config_hash", "method", "estimator", "shape", "gamma_l",
                  "gamma_u", "seed", "tv", "top1")


def _resolved(args, skip=("func",)) -> dict:
    return {k: v for k, v in sorted(vars(args).items())
            if k not in skip and not k.startswith("_")}


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    mixture = MixtureSpec.spread(
        args.classes, args.dim, min_distance=args.min_distance,
        scale=args.mean_scale, cov_scale=args.cov_scale, seed=args.mixture_seed)
    cfg = ShiftConfig(gamma_l=args.gamma_l, gamma_u=args.gamma_u,
                      shape=args.shape, n1=args.n1, m1=args.m1, seed=args.seed)
    dataset = generate(mixture, cfg)
    lio.write_dataset(dataset, args.out, config=_resolved(args))
    truth = dataset.truth
    print(f"wrote {dataset.n} rows ({dataset.n_labeled} labeled, "
          f"{dataset.n_unlabeled} unlabeled) to {args.out}")
    print(f"P(A=1) = {truth.p_a1:.6f}")
    print("P(Y|A=1) =", np.array2string(truth.p_labeled, precision=4))
    print("P(Y|A=0) =", np.array2string(truth.p_unlabeled, precision=4))
    return 0


# -- train -----------------------------------------------------------------------


def _trainer_from_args(args, parser):
    common = dict(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        optimizer=args.optimizer, weight_decay=args.weight_decay,
        clip_floor=args.clip, seed=args.seed,
    )
    em_common = dict(
        common, confidence_threshold=args.tau, warmup_epochs=args.warmup,
        prior_momentum=args.prior_momentum,
        mechanism_momentum=args.mechanism_momentum,
        mechanism_update=args.mechanism_update,
        zeta_source=args.zeta_source,
    )
    method = args.method
    if method == "supervised":
        return SupervisedClassifier(architecture=args.arch,
                                    hidden_width=args.hidden, **common)
    if method == "mle":
        return MLEClassifier(architecture=args.arch, hidden_width=args.hidden,
                             mechanism_learning_rate=args.mechanism_lr, **common)
    if method in ("em", "simpro"):
        return EMClassifier(variant="plain" if method == "em" else "simpro",
                            architecture=args.arch, hidden_width=args.hidden,
                            em_mode=args.em_mode, **em_common)
    if method == "batch-update":
        return BatchUpdateDRClassifier(
            architecture=args.arch, hidden_width=args.hidden,
            dr_prior_momentum=args.dr_prior_momentum, **em_common)
    if method == "dr-risk":
        if not args.mechanism:
            parser.error("--method dr-risk requires --mechanism "
                         "(a checkpoint to take P(A|Y) from)")
        source = args.mechanism
        if source.startswith("from:"):
            source = source[len("from:"):]
        stage1 = lio.load_checkpoint(source)
        return DRRiskClassifier(
            mechanism=stage1.mechanism_, architecture=args.arch,
            hidden_width=args.hidden, confidence_threshold=args.tau,
            warmup_epochs=args.warmup, **common)
    if method == "two-stage":
        stage1 = EMClassifier(variant="simpro", architecture=args.stage1_arch,
                              hidden_width=args.hidden, **em_common)
        stage2 = EMClassifier(variant="simpro", architecture=args.stage2_arch,
                              hidden_width=args.hidden, **em_common)
        return TwoStageClassifier(stage1=stage1, stage2=stage2,
                                  estimator=args.estimator,
                                  cross_fit=args.cross_fit, seed=args.seed)
    parser.error(f"unknown method {method!r}")


def cmd_train(args, parser) -> int:
    dataset = lio.read_dataset(args.data)
    model = _trainer_from_args(args, parser)
    model.fit_dataset(dataset)
    config = _resolved(args)
    lio.save_checkpoint(model, args.out, config=config)
    if args.history:
        with open(args.history, "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"format": "lsdr-history/1", "config": config,
                       "history": model.history_}, fh, sort_keys=True)
            fh.write("\n")
    final = model.history_[-1] if model.history_ else {}
    print(f"trained method={model.method_} epochs={args.epochs} -> {args.out}")
    if "tv_unlabeled" in final:
        print(f"final TV(est P(Y|A=0), truth) = {final['tv_unlabeled']:.4f}")
    return 0


# -- estimate ---------------------------------------------------------------------


def _oracle_nuisance(dataset, clip_floor):
    truth = dataset.truth
    if truth is None or truth.mixture is None:
        raise DomainError("--nuisance oracle requires truth metadata in the dataset")
    prior = truth.p_marginal
    mixture = truth.mixture

    def posterior_fn(X):
        return bayes_posterior_matrix(mixture, prior, X)

    mechanism = MissingnessMechanism(
        propensity=np.clip(truth.propensity, clip_floor, 1.0),
        p_labeled=truth.p_a1, clip_floor=clip_floor)
    return NuisancePair(posterior_fn=posterior_fn, mechanism=mechanism)


def cmd_estimate(args, parser) -> int:
    dataset = lio.read_dataset(args.data)
    if args.cross_fit is None:
        args.cross_fit = 0 if args.nuisance == "oracle" else 2
    kwargs = {}
    if args.nuisance == "oracle":
        nuisance = _oracle_nuisance(dataset, args.clip)
        fitter = None
    else:
        if not args.model:
            parser.error("--nuisance model requires --model CHECKPOINT")
        model = lio.load_checkpoint(args.model)
        mech = model.mechanism_
        if args.clip != mech.clip_floor:
            model.mechanism_ = MissingnessMechanism(
                propensity=mech.propensity, p_labeled=mech.p_labeled,
                clip_floor=args.clip)
        nuisance = model.as_nuisance()

        def fitter(subset):
            from sklearn.base import clone

            refit = clone(model)
            return refit.fit_dataset(subset).as_nuisance()

    if args.estimator == "dr":
        kwargs["cross_fit"] = args.cross_fit
        if args.cross_fit >= 2:
            if fitter is None:
                parser.error("cross-fitting requires --nuisance model")
            kwargs["fitter"] = fitter
            kwargs["seed"] = args.seed
        kwargs["level"] = args.level
    report = run_estimator(args.estimator, nuisance, dataset, **kwargs)
    lio.write_estimate_report(report, args.out, config=_resolved(args))
    print(f"{args.estimator} raw     =", np.array2string(report.raw, precision=4))
    print(f"{args.estimator} P(Y)    =",
          np.array2string(report.p_combined, precision=4))
    print(f"{args.estimator} P(Y|A=0)=",
          np.array2string(report.p_unlabeled, precision=4))
    if dataset.truth is not None:
        print("TV to truth P(Y|A=0) =",
              f"{tv_distance(report.p_unlabeled, dataset.truth.p_unlabeled):.4f}")
    if report.clip_events:
        print(f"clip events: {report.clip_events}")
    return 0


# -- montecarlo -------------------------------------------------------------------


def _coverage_scenario(args) -> McScenario:
    return benchmark_scenario(
        n_per_rep=args.n, replications=args.reps, seed=args.seed,
        regime=args.regime.replace("-", "_"), separation=args.separation,
        posterior_temperature=args.temperature,
        posterior_mix=args.mix, propensity_factor=args.prop_factor,
        clip_floor=args.clip, ci_level=args.level)


def cmd_mc_coverage(args) -> int:
    scenario = _coverage_scenario(args)
    report = run_replications(scenario)
    lio.write_mc_report(report.to_dict(), args.out, config=_resolved(args))
    lo, hi = report.coverage_band
    print(f"coverage per class: {np.array2string(report.coverage, precision=4)} "
          f"(binomial 3-sigma band [{lo:.4f}, {hi:.4f}])")
    print("variance ratio emp/plugin:",
          np.array2string(report.variance_ratio, precision=3))
    print(f"failures: {report.failures}/{scenario.replications}")
    if report.failures and not args.allow_partial:
        return 1
    return 0


def cmd_mc_bias_decay(args) -> int:
    grid = [int(x) for x in args.n_grid.split(",")]
    scenario = benchmark_scenario(
        n_per_rep=max(grid), replications=args.reps, seed=args.seed,
        separation=args.separation, clip_floor=args.clip)
    result = bias_decay_study(scenario, grid, magnitude_coef=args.coef,
                              replications=args.reps, corrupt=args.corrupt)
    lio.write_mc_report(result, args.out, config=_resolved(args))
    for row in result["grid"]:
        print(f"N={row['n']:>7d} lambda={row['lambda']:.4f} "
              f"|bias| dr={row['dr']['bias_l1_half']:.2e} "
              f"or={row['or']['bias_l1_half']:.2e} "
              f"ipw={row['ipw']['bias_l1_half']:.2e}")
    s = result["slopes"]
    print(f"slopes: dr={s['dr']:.3f} or={s['or']:.3f} ipw={s['ipw']:.3f}")
    return 0


def _sweep_methods(args):
    em_common = dict(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        confidence_threshold=args.tau, warmup_epochs=args.warmup,
        prior_momentum=args.prior_momentum,
        mechanism_momentum=args.mechanism_momentum,
        zeta_source=args.zeta_source, clip_floor=args.clip,
    )
    catalog = {
        "supervised": lambda: SupervisedClassifier(
            learning_rate=args.lr, epochs=args.epochs,
            batch_size=args.batch_size, clip_floor=args.clip),
        "mle": lambda: MLEClassifier(
            learning_rate=args.lr, epochs=args.epochs,
            batch_size=args.batch_size, clip_floor=args.clip,
            mechanism_learning_rate=args.mechanism_lr),
        "em": lambda: EMClassifier(variant="plain", **em_common),
        "simpro": lambda: EMClassifier(variant="simpro", **em_common),
        "two-stage": lambda: TwoStageClassifier(
            stage1=EMClassifier(variant="simpro", architecture="linear",
                                **em_common),
            stage2=EMClassifier(variant="simpro", architecture=args.stage2_arch,
                                hidden_width=args.hidden, **em_common),
            estimator="dr", cross_fit=0),  # single-fit regime, as trained in practice
        "batch-update": lambda: BatchUpdateDRClassifier(
            dr_prior_momentum=args.dr_prior_momentum, **em_common),
        "dr-risk": lambda: "dr-risk",  # resolved per shape inside the sweep
    }
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    for name in names:
        if name not in catalog:
            raise DomainError(f"unknown sweep method {name!r}")
    return names, catalog, em_common


def cmd_mc_sweep(args) -> int:
    mixture = MixtureSpec.spread(
        args.classes, args.dim, min_distance=args.min_distance,
        scale=args.mean_scale, seed=args.mixture_seed)
    shapes = list(SHAPES) if args.shapes == "all" else [
        s.strip() for s in args.shapes.split(",")]
    seeds = list(range(1, args.seeds + 1))
    names, catalog, em_common = _sweep_methods(args)
    methods = {}
    for name in names:
        if name == "dr-risk":
            continue
        methods[name] = catalog[name]()
    records, baselines = shape_sweep(
        mixture, gamma_l=args.gamma, gamma_u=args.gamma, n1=args.n1,
        m1=args.m1, methods=methods, seeds=seeds, shapes=shapes,
        n_test=args.n_test)
    if "dr-risk" in names:
        records += _sweep_dr_risk(args, mixture, shapes, seeds, em_common)
    config = _resolved(args)
    rows = records_to_dicts(records)
    lio.write_table([{k: r[k] for k in RECORD_COLUMNS} for r in rows],
                    f"{args.out_dir}/records.csv", config=config,
                    columns=RECORD_COLUMNS)
    lio.write_table(
        [{k: r[k] for k in ("config_hash", "method", "estimator", "shape",
                            "seed", "wall_clock")} for r in rows],
        f"{args.out_dir}/timings.csv", config=config,
        columns=("config_hash", "method", "estimator", "shape", "seed",
                 "wall_clock"))
    agg = aggregate(records)
    lio.write_table(agg, f"{args.out_dir}/aggregated.csv", config=config)
    lio.write_table(baselines, f"{args.out_dir}/baselines.csv", config=config,
                    columns=("shape", "seed", "baseline_tv"))
    print(f"{len(records)} records -> {args.out_dir}/records.csv")
    for row in agg:
        if row["estimator"] == "dr":
            extra = (f" top1={row['top1_mean']:.4f}"
                     if "top1_mean" in row else "")
            print(f"  {row['method']:<12} {row['shape']:<10} "
                  f"TV={row['tv_mean']:.4f}±{row['tv_sd']:.4f}{extra}")
    return 0


def _sweep_dr_risk(args, mixture, shapes, seeds, em_common):
    """The doubly robust risk ablation needs a stage-1 mechanism per run."""
    import time as _time

    records = []
    for shape in shapes:
        gu = 1.0 if shape == "uniform" else args.gamma
        for seed in seeds:
            cfg = ShiftConfig(gamma_l=args.gamma, gamma_u=gu, shape=shape,
                              n1=args.n1, m1=args.m1, seed=seed)
            dataset = generate(mixture, cfg)
            stage1 = EMClassifier(variant="simpro", architecture="linear",
                                  seed=seed, **em_common)
            stage1.fit_dataset(dataset)
            model = DRRiskClassifier(
                mechanism=stage1.mechanism_, learning_rate=args.lr,
                epochs=args.epochs, batch_size=args.batch_size,
                confidence_threshold=args.tau, warmup_epochs=args.warmup,
                clip_floor=args.clip, seed=seed)
            t0 = _time.perf_counter()
            model.fit_dataset(dataset)
            wall = _time.perf_counter() - t0
            acc = uniform_test_eval(model, mixture, args.n_test,
                                    seed=777 + seed)
            rep = model.estimate_report(dataset, "dr")
            records.append(ExperimentRecord(
                method="dr-risk", estimator="dr", shape=shape,
                gamma_l=args.gamma, gamma_u=gu, seed=seed,
                tv=tv_distance(rep.p_unlabeled, dataset.truth.p_unlabeled),
                top1=acc, wall_clock=wall))
    return records


# -- eval and report ----------------------------------------------------------------


def cmd_eval(args) -> int:
    dataset = lio.read_dataset(args.data)
    if dataset.truth is None or dataset.truth.mixture is None:
        raise DomainError("eval requires a dataset with mixture truth metadata")
    model = lio.load_checkpoint(args.model)
    acc = uniform_test_eval(model, dataset.truth.mixture, args.n_test,
                            seed=args.seed, adjusted=not args.unadjusted)
    print(f"balanced top-1 accuracy: {acc:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"format": "lsdr-eval/1", "config": _resolved(args),
                       "top1": acc}, fh, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.records:
        for raw in lio.read_table(path):
            rows.append(ExperimentRecord(
                method=raw["method"], estimator=raw["estimator"],
                shape=raw["shape"], gamma_l=float(raw["gamma_l"]),
                gamma_u=float(raw["gamma_u"]), seed=int(raw["seed"]),
                tv=float(raw["tv"]),
                top1=float(raw["top1"]) if raw.get("top1") else None))
    agg = aggregate(rows)
    lio.write_table(agg, args.out, config=_resolved(args, skip=("func", "records")))
    print(f"aggregated {len(rows)} records into {len(agg)} groups -> {args.out}")
    return 0


# -- parser ---------------------------------------------------------------------


def _add_train_flags(p, include_em=True):
    p.add_argument("--arch", default="linear", choices=("linear", "mlp1"))
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--lr", type=float, default=8e-3)
    p.add_argument("--epochs", type=int, default=45)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--optimizer", default="adam", choices=("adam", "sgd"))
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--clip", type=float, default=DEFAULT_CLIP_FLOOR,
                   help="propensity clipping floor")
    if include_em:
        p.add_argument("--tau", type=float, default=0.95,
                       help="pseudo-label confidence threshold")
        p.add_argument("--warmup", type=int, default=5)
        p.add_argument("--prior-momentum", type=float, default=0.999)
        p.add_argument("--mechanism-momentum", type=float, default=0.99)
        p.add_argument("--mechanism-update", default="batch",
                       choices=("batch", "epoch"))
        p.add_argument("--mechanism-lr", type=float, default=1e-3)
        p.add_argument("--zeta-source", default="targets",
                       choices=("targets", "soft"))
        p.add_argument("--dr-prior-momentum", type=float, default=0.999)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsdr",
        description="Label-shift semi-supervised estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--n1", type=int, required=True)
    p.add_argument("--m1", type=int, required=True)
    p.add_argument("--gamma-l", type=float, required=True)
    p.add_argument("--gamma-u", type=float, required=True)
    p.add_argument("--shape", required=True, choices=SHAPES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cov-scale", type=float, default=1.0)
    p.add_argument("--min-distance", type=float, default=3.2)
    p.add_argument("--mean-scale", type=float, default=2.2)
    p.add_argument("--mixture-seed", type=int, default=2024)
    p.add_argument("--out", required=True)
    p.set_defaults(func=lambda a, pr: cmd_synth(a))

    p = sub.add_parser("train", help="train a classifier plus mechanism")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True,
                   choices=("supervised", "mle", "em", "simpro", "dr-risk",
                            "two-stage", "batch-update"))
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.add_argument("--em-mode", default="stream", choices=("stream", "full"))
    p.add_argument("--mechanism", default=None,
                   help="checkpoint supplying P(A|Y) for dr-risk "
                        "(accepts a 'from:PATH' prefix)")
    p.add_argument("--stage1-arch", default="linear", choices=("linear", "mlp1"))
    p.add_argument("--stage2-arch", default="mlp1", choices=("linear", "mlp1"))
    p.add_argument("--estimator", default="dr", choices=("or", "ipw", "dr"))
    p.add_argument("--cross-fit", type=int, default=2)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="estimate class priors from a model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--nuisance", default="model", choices=("model", "oracle"))
    p.add_argument("--estimator", required=True, choices=("or", "ipw", "dr"))
    p.add_argument("--cross-fit", type=int, default=None,
                   help="folds for nuisance re-training; defaults to 2 with "
                        "--nuisance model and 0 with --nuisance oracle")
    p.add_argument("--clip", type=float, default=DEFAULT_CLIP_FLOOR)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("montecarlo", help="verification studies")
    mc_sub = p.add_subparsers(dest="mc_command", required=True)

    q = mc_sub.add_parser("coverage", help="replication study of the estimators")
    q.add_argument("--regime", default="oracle-both",
                   choices=("oracle-both", "oracle-posterior-only",
                            "oracle-propensity-only", "corrupted-both"))
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--reps", type=int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--separation", type=float, default=2.6)
    q.add_argument("--temperature", type=float, default=3.0)
    q.add_argument("--mix", type=float, default=None)
    q.add_argument("--prop-factor", type=float, default=2.0)
    q.add_argument("--clip", type=float, default=DEFAULT_CLIP_FLOOR)
    q.add_argument("--level", type=float, default=0.95)
    q.add_argument("--allow-partial", action="store_true")
    q.add_argument("--out", required=True)
    q.set_defaults(func=lambda a, pr: cmd_mc_coverage(a))

    q = mc_sub.add_parser("bias-decay", help="bias under shrinking corruption")
    q.add_argument("--n-grid", default="1000,4000,16000")
    q.add_argument("--coef", type=float, default=0.5)
    q.add_argument("--corrupt", default="both",
                   choices=("both", "posterior", "propensity"))
    q.add_argument("--reps", type=int, default=200)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--separation", type=float, default=4.0)
    q.add_argument("--clip", type=float, default=DEFAULT_CLIP_FLOOR)
    q.add_argument("--out", required=True)
    q.set_defaults(func=lambda a, pr: cmd_mc_bias_decay(a))

    q = mc_sub.add_parser("sweep", help="five-shape method sweep")
    q.add_argument("--shapes", default="all")
    q.add_argument("--seeds", type=int, default=3)
    q.add_argument("--methods", default="mle,em,simpro")
    q.add_argument("--classes", type=int, default=10)
    q.add_argument("--dim", type=int, default=8)
    q.add_argument("--gamma", type=float, default=20.0)
    q.add_argument("--n1", type=int, default=300)
    q.add_argument("--m1", type=int, default=800)
    q.add_argument("--n-test", type=int, default=5000)
    q.add_argument("--min-distance", type=float, default=3.2)
    q.add_argument("--mean-scale", type=float, default=2.2)
    q.add_argument("--mixture-seed", type=int, default=2024)
    q.add_argument("--stage2-arch", default="mlp1", choices=("linear", "mlp1"))
    _add_train_flags(q)
    q.add_argument("--out-dir", required=True)
    q.set_defaults(func=lambda a, pr: cmd_mc_sweep(a))

    p = sub.add_parser("eval", help="balanced-test accuracy of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--n-test", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unadjusted", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=lambda a, pr: cmd_eval(a))

    p = sub.add_parser("report", help="aggregate record CSVs")
    p.add_argument("--records", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=lambda a, pr: cmd_report(a))

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (DomainError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
