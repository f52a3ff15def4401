"""Probe-classifier evaluation of frozen embeddings and the aggregate quality score."""

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import NormalizationUnavailableError, NumericError, TaskMismatchError

PROBES = ("logreg", "lda")
LOGREG_L2 = 1e-4
LOGREG_ITERS = 500
LDA_RIDGE = 1e-6


@dataclass(frozen=True)
class Row:
    utterance_id: str
    speaker_id: str | None
    label: str
    split: str
    embedding: np.ndarray


class EmbeddingTable:
    def __init__(self, rows):
        self.rows = list(rows)
        dims = {r.embedding.shape for r in self.rows}
        if len(dims) > 1:
            raise ValueError(f"embeddings have mixed shapes {sorted(dims)}")
        bad = {r.split for r in self.rows} - {"train", "test"}
        if bad:
            raise ValueError(f"unknown split names {sorted(bad)}")
        train_ids = {r.utterance_id for r in self.rows if r.split == "train"}
        overlap = train_ids & {r.utterance_id for r in self.rows if r.split == "test"}
        if overlap:
            raise ValueError(f"utterances in both splits: {sorted(overlap)[:5]}")

    def __len__(self):
        return len(self.rows)

    def split(self, name):
        rows = [r for r in self.rows if r.split == name]
        if not rows:
            return np.zeros((0, self.dim)), []
        return np.stack([r.embedding for r in rows]), [r.label for r in rows]

    @property
    def dim(self):
        return self.rows[0].embedding.shape[0] if self.rows else 0

    def unseen_test_labels(self):
        train = {r.label for r in self.rows if r.split == "train"}
        return sorted({r.label for r in self.rows if r.split == "test"} - train)

    @property
    def has_speakers(self):
        return bool(self.rows) and all(r.speaker_id not in (None, "") for r in self.rows)

    @classmethod
    def from_arrays(cls, X, labels, splits, speakers=None, ids=None):
        X = np.asarray(X, dtype=np.float64)
        ids = ids if ids is not None else [f"u{i}" for i in range(len(X))]
        speakers = speakers if speakers is not None else [None] * len(X)
        return cls(Row(str(i), s, str(l), sp, x) for i, s, l, sp, x in zip(ids, speakers, labels, splits, X))


def read_table(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:4] != ["utterance_id", "speaker_id", "label", "split"]:
            raise ValueError(f"{path}: header must start with utterance_id,speaker_id,label,split")
        rows = [Row(r[0], r[1] or None, r[2], r[3], np.array([float(v) for v in r[4:]]))
                for r in reader if r]
    return EmbeddingTable(rows)


def write_table(path, table):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["utterance_id", "speaker_id", "label", "split"] + [f"e{i}" for i in range(table.dim)])
        for r in table.rows:
            w.writerow([r.utterance_id, r.speaker_id or "", r.label, r.split] + [repr(float(v)) for v in r.embedding])


def time_average(per_context_embeddings):
    return np.mean(np.asarray(per_context_embeddings, dtype=np.float64), axis=0)


def speaker_normalize(table):
    """Subtract each speaker's train-split mean, then scale rows to unit L2 norm.

    Speakers that only occur in the test split use the mean of their own rows.
    Rows that end up exactly zero are passed through unchanged.
    """
    if not table.has_speakers:
        raise NormalizationUnavailableError("speaker normalization needs a speaker_id on every row")
    by_speaker = {}
    for r in table.rows:
        by_speaker.setdefault(r.speaker_id, []).append(r)
    means = {}
    for spk, rows in by_speaker.items():
        train = [r.embedding for r in rows if r.split == "train"] or [r.embedding for r in rows]
        means[spk] = np.mean(train, axis=0)
    out = []
    for r in table.rows:
        v = r.embedding - means[r.speaker_id]
        norm = np.linalg.norm(v)
        out.append(replace(r, embedding=v / norm if norm > 0 else v))
    return EmbeddingTable(out)


@dataclass(frozen=True)
class TaskResult:
    task_name: str
    accuracy: float
    probe: str
    normalized: bool


def _encode(labels, classes):
    index = {c: i for i, c in enumerate(classes)}
    return np.array([index.get(l, -1) for l in labels])


def _standardizer(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


class LogisticRegressionProbe:
    """Multinomial logistic regression, full-batch gradient descent with backtracking."""

    def __init__(self, l2=LOGREG_L2, iterations=LOGREG_ITERS):
        self.l2 = l2
        self.iterations = iterations

    def _objective(self, Wb, Xa, Y):
        logits = Xa @ Wb
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        n = len(Xa)
        W = Wb[:-1]
        loss = -np.sum(Y * logp) / n + 0.5 * self.l2 * np.sum(W * W)
        grad = Xa.T @ (np.exp(logp) - Y) / n
        grad[:-1] += self.l2 * W
        return loss, grad

    def fit(self, X, labels):
        self.classes = sorted(set(labels))
        y = _encode(labels, self.classes)
        self.mu, self.sd = _standardizer(X)
        Xa = np.hstack([(X - self.mu) / self.sd, np.ones((len(X), 1))])
        Y = np.eye(len(self.classes))[y]
        Wb = np.zeros((Xa.shape[1], len(self.classes)))
        lr = 1.0
        loss, grad = self._objective(Wb, Xa, Y)
        for _ in range(self.iterations):
            gg = float(np.sum(grad * grad))
            if gg < 1e-20:
                break
            lr = min(lr * 2.0, 1e6)
            while True:
                cand = Wb - lr * grad
                new_loss, new_grad = self._objective(cand, Xa, Y)
                if new_loss <= loss - 0.5 * lr * gg or lr < 1e-12:
                    break
                lr *= 0.5
            Wb, loss, grad = cand, new_loss, new_grad
        self.weights = Wb
        return self

    def predict(self, X):
        Xa = np.hstack([(X - self.mu) / self.sd, np.ones((len(X), 1))])
        return [self.classes[i] for i in np.argmax(Xa @ self.weights, axis=1)]


class LDAProbe:
    """Linear discriminant analysis with a pooled, ridge-stabilized covariance."""

    def __init__(self, ridge=LDA_RIDGE, max_condition=1e15):
        self.ridge = ridge
        self.max_condition = max_condition

    def fit(self, X, labels):
        self.classes = sorted(set(labels))
        y = _encode(labels, self.classes)
        means = np.stack([X[y == k].mean(axis=0) for k in range(len(self.classes))])
        centered = X - means[y]
        cov = centered.T @ centered / max(len(X) - len(self.classes), 1)
        cov[np.diag_indices_from(cov)] += self.ridge
        eig = np.linalg.eigvalsh(cov)
        cond = eig[-1] / eig[0] if eig[0] > 0 else math.inf
        if not cond < self.max_condition:
            raise NumericError(
                f"pooled covariance is singular despite ridge {self.ridge}: "
                f"condition number {cond:.3g}, eigenvalue range [{eig[0]:.3g}, {eig[-1]:.3g}]"
            )
        solved = np.linalg.solve(cov, means.T)  # Sigma^-1 mu_k as columns
        priors = np.bincount(y, minlength=len(self.classes)) / len(y)
        self.coef = solved
        self.intercept = -0.5 * np.einsum("kd,dk->k", means, solved) + np.log(priors)
        return self

    def decision_function(self, X):
        return X @ self.coef + self.intercept

    def predict(self, X):
        return [self.classes[i] for i in np.argmax(self.decision_function(X), axis=1)]


def _run_probe(probe, table, task_name, normalized):
    X_train, y_train = table.split("train")
    X_test, y_test = table.split("test")
    if len(set(y_train)) < 2:
        raise ValueError(f"task {task_name!r}: need at least 2 classes in the train split")
    if not y_test:
        raise ValueError(f"task {task_name!r}: empty test split")
    model = (LogisticRegressionProbe() if probe == "logreg" else LDAProbe()).fit(X_train, y_train)
    pred = model.predict(X_test)
    acc = sum(p == t for p, t in zip(pred, y_test)) / len(y_test)
    return TaskResult(task_name, acc, probe, normalized)


def train_probe_logreg(table, task_name="task", normalized=False):
    return _run_probe("logreg", table, task_name, normalized)


def train_probe_lda(table, task_name="task", normalized=False):
    return _run_probe("lda", table, task_name, normalized)


def evaluate_variants(table, task_name="task"):
    """Every runnable (probe, normalization) result in tie-break order."""
    variants = [(table, False)]
    if table.has_speakers:
        variants.append((speaker_normalize(table), True))
    results = []
    for t, normalized in variants:
        for probe in PROBES:
            try:
                results.append(_run_probe(probe, t, task_name, normalized))
            except NumericError:
                continue
    return results


def best_accuracy(table, task_name="task"):
    """Best result; ties go to the earliest of (logreg, raw), (lda, raw), (logreg, norm), (lda, norm)."""
    return pick_best(evaluate_variants(table, task_name))


def pick_best(results):
    if not results:
        raise ValueError("no probe variant could be evaluated")
    best = results[0]
    for r in results[1:]:
        if r.accuracy > best.accuracy:
            best = r
    return best


@dataclass(frozen=True)
class QualityScore:
    per_task_delta: dict
    aggregate: float  # percentage points

    @property
    def aggregate_fraction(self):
        return self.aggregate / 100.0

    def to_dict(self):
        return {"per_task_delta": dict(self.per_task_delta), "aggregate": self.aggregate,
                "aggregate_fraction": self.aggregate_fraction}


def aggregate_quality(student_acc, teacher_acc):
    """Mean per-task accuracy difference from the teacher, in the units given."""
    s, t = set(student_acc), set(teacher_acc)
    if s != t:
        raise TaskMismatchError(
            f"task sets differ: only in student {sorted(s - t)}, only in teacher {sorted(t - s)}")
    if not s:
        raise ValueError("no tasks given")
    deltas = {task: float(student_acc[task]) - float(teacher_acc[task]) for task in sorted(s)}
    return QualityScore(deltas, math.fsum(deltas.values()) / len(deltas))


def format_table(rows, tasks):
    """Aligned text table; ``rows`` maps model name -> {task: accuracy percent}."""
    headers = ["Model"] + list(tasks)
    body = [[name] + [f"{accs[t]:.1f}" for t in tasks] for name, accs in rows.items()]
    widths = [max(len(str(r[i])) for r in [headers] + body) for i in range(len(headers))]
    lines = ["  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [headers] + body]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def results_json(results, score=None):
    out = {"tasks": [r.__dict__ for r in results]}
    if score is not None:
        out["quality"] = score.to_dict()
    return json.dumps(out, indent=2, sort_keys=True)
