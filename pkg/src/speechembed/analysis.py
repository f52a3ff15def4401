"""Hyperparameter regression and the quality/latency frontier."""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTargetError, SingularityError
from .zoo import ModelConfig

PREDICTORS = ("size_small", "size_large", "width", "gap", "compression", "qat")
TARGETS = ("quality", "latency", "size")


@dataclass(frozen=True)
class BenchRecord:
    config: ModelConfig
    quality: float
    latency_ms: float
    size_bytes: int

    def __post_init__(self):
        if not (math.isfinite(self.quality) and math.isfinite(self.latency_ms)):
            raise ValueError(f"non-finite record for {self.config.name}")
        if self.latency_ms <= 0 or self.size_bytes <= 0:
            raise ValueError(f"latency and size must be positive for {self.config.name}")


def encode_predictors(config):
    """Dummy-coded size (tiny is the reference), numeric width, 0/1 flags."""
    return np.array([
        float(config.mv3_size == "small"),
        float(config.mv3_size == "large"),
        config.width,
        float(config.gap),
        float(config.compressed),
        float(config.qat),
    ])


@dataclass(frozen=True)
class RegressionResult:
    weights: dict
    intercept: float
    target: str
    residuals: np.ndarray | None = None

    def to_dict(self):
        return {"target": self.target, "intercept": self.intercept,
                "weights": {k: self.weights[k] for k in self.weights}}


def _collinear_columns(X, names, tol):
    found = []
    for j in range(1, X.shape[1]):
        prev = X[:, :j]
        coef, *_ = np.linalg.lstsq(prev, X[:, j], rcond=None)
        resid = X[:, j] - prev @ coef
        if np.linalg.norm(resid) <= tol * max(np.linalg.norm(X[:, j]), 1.0):
            found.append(names[j])
    return found


def ols_standardized(X, y, target="quality", names=None):
    """Least squares of the z-scored target on ``X`` plus an intercept."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if n <= p:
        raise SingularityError(f"need more rows than predictors, got {n} x {p}")
    sd = y.std()
    if not sd > 0:
        raise DegenerateTargetError(f"target {target!r} is constant; cannot standardize")
    z = (y - y.mean()) / sd
    A = np.hstack([np.ones((n, 1)), X])
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    tol = 1e-10 * max(diag.max(), 1.0)
    if diag.min() <= tol:
        cols = _collinear_columns(A, ["intercept"] + names, 1e-10)
        raise SingularityError(f"design matrix is rank deficient; collinear columns: {cols}", cols)
    beta = np.linalg.solve(R, Q.T @ z)
    resid = z - A @ beta
    return RegressionResult(dict(zip(names, beta[1:].tolist())), float(beta[0]), target, resid)


def regress_records(records):
    X = np.stack([encode_predictors(r.config) for r in records])
    targets = {
        "quality": [r.quality for r in records],
        "latency": [r.latency_ms for r in records],
        "size": [float(r.size_bytes) for r in records],
    }
    return {t: ols_standardized(X, targets[t], t, PREDICTORS) for t in TARGETS}


def regression_json(results):
    """Weight magnitudes per predictor per target, fixed order."""
    out = {t: {"intercept": results[t].intercept,
               "weights": {p: results[t].weights[p] for p in PREDICTORS},
               "magnitudes": {p: abs(results[t].weights[p]) for p in PREDICTORS}}
           for t in TARGETS if t in results}
    return json.dumps(out, indent=2)


def frontier(records):
    """Records not beaten on both latency and quality, ordered by latency.

    Exact (latency, quality) ties keep the smallest file.
    """
    ordered = sorted(records, key=lambda r: (r.latency_ms, -r.quality, r.size_bytes))
    out = []
    best = -math.inf
    for r in ordered:
        if r.quality > best:
            out.append(r)
            best = r.quality
    return out


def read_records(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"config", "quality", "latency_ms", "size_bytes"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [BenchRecord(ModelConfig.parse(row["config"]), float(row["quality"]),
                            float(row["latency_ms"]), int(row["size_bytes"])) for row in reader]


def write_records(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "quality", "latency_ms", "size_bytes"])
        for r in records:
            w.writerow([r.config.name, repr(r.quality), repr(r.latency_ms), r.size_bytes])
