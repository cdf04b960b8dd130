"""Persistence formats.

* Datasets: JSON lines. First line is a header object
  ``{"format": "lsdr-dataset/1", "C": ..., "d": ..., "truth": ..., "config": ...}``,
  each following line one observation
  ``{"x": [...], "a": 0|1, "y": int|null, "hidden_y": int|null}``.
  Class indices are 1-based in files (the interchange convention) and
  0-based in memory.
* Checkpoints, estimate reports, Monte Carlo reports: single JSON documents
  with explicit ``format`` version keys and the fully resolved config.
* Tables: CSV, first line a ``#`` comment carrying the format version and
  config. Wall-clock timings go to a separate sidecar so the primary
  artifacts stay bit-reproducible under a fixed seed.
"""

from __future__ import annotations

import csv
import io as _io
import json
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, GenerationTruth, MissingnessMechanism
from .errors import DomainError
from .estimators import EstimateReport
from .network import ClassifierParams
from .synth import MixtureSpec

DATASET_FORMAT = "lsdr-dataset/1"
CHECKPOINT_FORMAT = "lsdr-checkpoint/1"
ESTIMATE_FORMAT = "lsdr-estimate/1"
MC_FORMAT = "lsdr-mc/1"
TABLE_FORMAT = "lsdr-table/1"


def _jsonify(value):
    """Recursively convert to JSON-serializable builtins."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonify(v) for v in value]
    if isinstance(value, ClassifierParams):
        return {"__classifier_params__": True,
                "architecture": value.architecture,
                "weights": value.weights.tolist(),
                "dims": list(value.dims)}
    if isinstance(value, MissingnessMechanism):
        return {"__mechanism__": True,
                "propensity": value.propensity.tolist(),
                "p_labeled": value.p_labeled,
                "clip_floor": value.clip_floor}
    if hasattr(value, "get_params") and not isinstance(value, type):
        return {"__estimator__": type(value).__name__,
                "params": _jsonify(value.get_params(deep=False))}
    return value


def _dejsonify(value):
    if isinstance(value, dict):
        if value.get("__classifier_params__"):
            return ClassifierParams(architecture=value["architecture"],
                                    weights=np.array(value["weights"]),
                                    dims=tuple(value["dims"]))
        if value.get("__mechanism__"):
            return MissingnessMechanism(
                propensity=np.array(value["propensity"]),
                p_labeled=value["p_labeled"],
                clip_floor=value["clip_floor"])
        if "__estimator__" in value:
            from . import training

            cls = getattr(training, value["__estimator__"])
            return cls(**_dejsonify(value["params"]))
        return {k: _dejsonify(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_dejsonify(v) for v in value]
    return value


def _dump(obj) -> str:
    return json.dumps(_jsonify(obj), sort_keys=True, separators=(",", ":"))


# -- datasets ------------------------------------------------------------------


def _truth_to_dict(truth: Optional[GenerationTruth]):
    if truth is None:
        return None
    out = {
        "p_labeled": truth.p_labeled, "p_unlabeled": truth.p_unlabeled,
        "p_a1": truth.p_a1, "propensity": truth.propensity,
        "config": truth.config, "mixture": None,
    }
    if truth.mixture is not None:
        mix = truth.mixture
        out["mixture"] = {
            "num_classes": mix.num_classes, "feature_dim": mix.feature_dim,
            "means": mix.means, "cov_scale": mix.cov_scale,
        }
    return out


def _truth_from_dict(d) -> Optional[GenerationTruth]:
    if d is None:
        return None
    mixture = None
    if d.get("mixture") is not None:
        m = d["mixture"]
        mixture = MixtureSpec(m["num_classes"], m["feature_dim"],
                              np.array(m["means"]), m["cov_scale"])
    return GenerationTruth(
        p_labeled=np.array(d["p_labeled"]),
        p_unlabeled=np.array(d["p_unlabeled"]),
        p_a1=d["p_a1"], propensity=np.array(d["propensity"]),
        mixture=mixture, config=d.get("config", {}),
    )


def write_dataset(dataset: Dataset, path, config: Optional[dict] = None) -> None:
    header = {
        "format": DATASET_FORMAT,
        "C": dataset.num_classes,
        "d": dataset.feature_dim,
        "truth": _truth_to_dict(dataset.truth),
        "config": config or {},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dump(header) + "\n")
        hidden = dataset.hidden_y
        for i in range(dataset.n):
            yi = int(dataset.y[i])
            row = {
                "x": dataset.X[i].tolist(),
                "a": int(yi >= 0),
                "y": yi + 1 if yi >= 0 else None,  # 1-based on disk
                "hidden_y": int(hidden[i]) + 1 if hidden is not None else None,
            }
            fh.write(_dump(row) + "\n")


def read_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise DomainError(f"not a {DATASET_FORMAT} file: {path}")
        C, d = header["C"], header["d"]
        xs, ys, hidden = [], [], []
        any_hidden = False
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            xs.append(row["x"])
            ys.append(row["y"] - 1 if row["y"] is not None else -1)
            if row.get("hidden_y") is not None:
                hidden.append(row["hidden_y"] - 1)
                any_hidden = True
            else:
                hidden.append(-1)
    X = np.array(xs, dtype=np.float64).reshape(len(xs), d)
    return Dataset(
        X=X, y=np.array(ys, dtype=np.int64), num_classes=C,
        hidden_y=np.array(hidden, dtype=np.int64) if any_hidden else None,
        truth=_truth_from_dict(header.get("truth")),
    )


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model, path, config: Optional[dict] = None) -> None:
    """Serialize a fitted trainer (classifier, mechanism, priors, history)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "method": model.method_,
        "config": _jsonify(config or {}),
        "trainer_params": _jsonify(model.get_params(deep=False)),
        "trainer_class": type(model).__name__,
        "classifier": model.classifier_,
        "mechanism": model.mechanism_,
        "labeled_prior": model.labeled_prior_,
        "unlabeled_prior": model.unlabeled_prior_,
        "combined_prior": model.combined_prior_,
        "p_a1": model.p_a1_,
        "n_classes": model.n_classes_,
        "softmax_is_uniform_posterior": model._softmax_is_uniform_posterior_,
        "history": model.history_,
    }
    if hasattr(model, "frozen_prior_"):
        doc["frozen_prior"] = model.frozen_prior_
        doc["stage1_report"] = estimate_report_to_dict(model.report_)
        doc["stage1"] = {
            "method": model.stage1_.method_,
            "classifier": model.stage1_.classifier_,
            "mechanism": model.stage1_.mechanism_,
            "unlabeled_prior": model.stage1_.unlabeled_prior_,
        }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dump(doc) + "\n")


def load_checkpoint(path):
    """Rebuild a fitted trainer from a checkpoint document."""
    from . import training

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DomainError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    cls = getattr(training, doc.get("trainer_class", "EMClassifier"))
    model = cls(**_dejsonify(doc["trainer_params"]))
    model.classifier_ = _dejsonify(doc["classifier"])
    model.mechanism_ = _dejsonify(doc["mechanism"])
    model.labeled_prior_ = np.array(doc["labeled_prior"])
    model.unlabeled_prior_ = np.array(doc["unlabeled_prior"])
    model.combined_prior_ = np.array(doc["combined_prior"])
    model.p_a1_ = doc["p_a1"]
    model.n_classes_ = doc["n_classes"]
    model.n_features_in_ = model.classifier_.feature_dim
    model.classes_ = np.arange(model.n_classes_)
    model._softmax_is_uniform_posterior_ = doc["softmax_is_uniform_posterior"]
    model.history_ = doc["history"]
    model.method_ = doc["method"]
    if "frozen_prior" in doc:
        model.frozen_prior_ = np.array(doc["frozen_prior"])
    return model


# -- estimate and Monte Carlo reports --------------------------------------------


def estimate_report_to_dict(report: EstimateReport) -> dict:
    return _jsonify({
        "estimator": report.estimator,
        "raw": report.raw,
        "p_combined": report.p_combined,
        "p_unlabeled": report.p_unlabeled,
        "n_samples": report.n_samples,
        "p_labeled": report.p_labeled,
        "p_a1": report.p_a1,
        "influence_variance": report.influence_variance,
        "ci_half_widths": report.ci_half_widths,
        "ci_level": report.ci_level,
        "cross_fit_folds": report.cross_fit_folds,
        "clip_events": report.clip_events,
        "extras": report.extras,
    })


def write_estimate_report(report: EstimateReport, path,
                          config: Optional[dict] = None) -> None:
    doc = {"format": ESTIMATE_FORMAT, "config": config or {}}
    doc.update(estimate_report_to_dict(report))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dump(doc) + "\n")


def read_estimate_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != ESTIMATE_FORMAT:
        raise DomainError(f"not an {ESTIMATE_FORMAT} file: {path}")
    return doc


def write_mc_report(report_dict: dict, path, config: Optional[dict] = None) -> None:
    doc = {"format": MC_FORMAT, "config": config or {}}
    doc.update(_jsonify(report_dict))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dump(doc) + "\n")


def read_mc_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MC_FORMAT:
        raise DomainError(f"not a {MC_FORMAT} file: {path}")
    return doc


# -- CSV tables -------------------------------------------------------------------


def write_table(rows: Sequence[dict], path, config: Optional[dict] = None,
                columns: Optional[Sequence[str]] = None) -> None:
    """CSV with a leading comment line carrying format version and config."""
    if rows and columns is None:
        columns = list(rows[0].keys())
    buf = _io.StringIO()
    buf.write(f"# format={TABLE_FORMAT} config={_dump(config or {})}\n")
    writer = csv.DictWriter(buf, fieldnames=columns or [], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in columns or []})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def read_table(path):
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise DomainError(f"missing table header comment in {path}")
        reader = csv.DictReader(fh)
        return list(reader)
