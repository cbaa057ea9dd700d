"""Sources of class probabilities.

* :class:`SyntheticSoftmaxClassifier` is a linear-softmax model
  ``softmax(W x + b)`` with an analytic input gradient, used for desk-scale
  experiments and white-box attacks.
* :class:`SyntheticTaskSpec` describes isotropic Gaussian classes; its
  Bayes-optimal classifier is linear-softmax.
* :class:`ProbabilityTable` carries externally computed probabilities read
  from CSV or JSON.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import SeedLike, as_generator
from .errors import DataError
from .noise import PerturbationBudget
from .scores import PROB_TOL, RENORM_TOL, check_score_kind


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class SyntheticSoftmaxClassifier:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        W = np.array(self.weights, dtype=float)
        b = np.array(self.bias, dtype=float)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ValueError(f"weights must be (C, d) and bias (C,), got {W.shape} and {b.shape}")
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise ValueError("classifier parameters must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"input has trailing dimension {x.shape[-1:]} but classifier expects {self.dim}")
        if not np.isfinite(x).all():
            raise ValueError("input must be finite")
        return x

    def logits(self, x) -> np.ndarray:
        return self._affine(self._check_x(x))

    def _affine(self, x: np.ndarray) -> np.ndarray:
        # einsum without BLAS keeps each row bit-identical whatever the batch
        # size, so results do not depend on chunking or thread count.
        return np.einsum("...d,cd->...c", x, self.weights, optimize=False) + self.bias

    def predict_proba(self, x) -> np.ndarray:
        """``softmax(W x + b)`` for one input ``(d,)`` or a batch ``(..., d)``."""
        return _softmax(self.logits(x))

    def true_prob_grad(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Probability of label ``y`` and its gradient with respect to ``x``.

        ``d p_y / d x = p_y (W_y - p^T W)``.
        """
        x = self._check_x(x)
        p = _softmax(self._affine(x))
        y = np.asarray(y, dtype=np.intp)
        py = np.take_along_axis(p, y[..., None], axis=-1)
        grad = py * (self.weights[y] - p @ self.weights)
        return py[..., 0], grad

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSoftmaxClassifier":
        return cls(np.asarray(d["weights"], dtype=float), np.asarray(d["bias"], dtype=float))


def predict_proba(clf: SyntheticSoftmaxClassifier, x) -> np.ndarray:
    return clf.predict_proba(x)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Gaussian classes ``x | y ~ N(means[y], sigma_x^2 I)`` with given priors."""

    means: np.ndarray
    sigma_x: float = 1.0
    priors: np.ndarray | None = None

    def __post_init__(self):
        mu = np.array(self.means, dtype=float)
        if mu.ndim != 2:
            raise ValueError("means must be a (C, d) array")
        if not self.sigma_x > 0:
            raise ValueError("sigma_x must be > 0")
        pri = np.full(mu.shape[0], 1.0 / mu.shape[0]) if self.priors is None else np.array(self.priors, dtype=float)
        if pri.shape != (mu.shape[0],) or (pri < 0).any() or abs(pri.sum() - 1.0) > 1e-9:
            raise ValueError("priors must be a non-negative vector of length C summing to 1")
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "priors", pri)

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def axis_aligned(
        cls, n_classes: int = 4, dim: int = 8, spacing: float = 2.5, sigma_x: float = 1.0
    ) -> "SyntheticTaskSpec":
        """Means at ``+spacing * e_k`` then ``-spacing * e_k`` (up to ``2 * dim`` classes)."""
        if not 2 <= n_classes <= 2 * dim:
            raise ValueError(f"axis-aligned task supports 2..{2 * dim} classes in dim {dim}")
        mu = np.zeros((n_classes, dim))
        for c in range(n_classes):
            mu[c, c % dim] = spacing if c < dim else -spacing
        return cls(mu, sigma_x)

    def bayes_classifier(self) -> SyntheticSoftmaxClassifier:
        """Posterior ``P(y | x)`` of this task, which is exactly linear-softmax."""
        s2 = self.sigma_x**2
        with np.errstate(divide="ignore"):
            log_prior = np.log(np.maximum(self.priors, 1e-300))
        W = self.means / s2
        b = -0.5 * (self.means**2).sum(axis=1) / s2 + log_prior
        return SyntheticSoftmaxClassifier(W, b)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "sigma_x": self.sigma_x, "priors": self.priors.tolist()}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.y.size


def generate_synthetic_dataset(spec: SyntheticTaskSpec, n: int, seed: SeedLike = None) -> Dataset:
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = as_generator(seed)
    y = rng.choice(spec.n_classes, size=n, p=spec.priors)
    x = spec.means[y] + spec.sigma_x * rng.standard_normal((n, spec.dim))
    return Dataset(x, y.astype(np.int64))


def inflation_bound(clf: SyntheticSoftmaxClassifier, budget: PerturbationBudget, score_kind: str = "hps") -> float:
    """Uniform inflation constant ``M_r = 0.5 * ||W||_2 * r`` for HPS.

    The HPS score moves by ``|p_y(x) - p_y(x + eps)|``. Row ``y`` of the
    softmax Jacobian has norm ``p_y ||e_y - p|| <= sqrt(2) p_y (1 - p_y) <= 0.5``,
    so ``p_y`` is ``0.5 * ||W||_2``-Lipschitz in ``x``.
    """
    kind = check_score_kind(score_kind)
    if kind != "hps":
        raise NotImplementedError("no analytic inflation bound for APS; supply M_r explicitly")
    if budget.dim != clf.dim:
        raise ValueError(f"budget dim {budget.dim} does not match classifier dim {clf.dim}")
    return 0.5 * float(np.linalg.norm(clf.weights, 2)) * budget.radius


@dataclass
class ProbabilityTable:
    ids: list
    labels: np.ndarray
    probs: np.ndarray
    renormalized: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2:
            raise DataError("probability table must be two-dimensional")
        if len(self.ids) != self.labels.size or self.labels.size != self.probs.shape[0]:
            raise DataError("ids, labels and probability rows differ in length")

    @property
    def class_count(self) -> int:
        return self.probs.shape[1]

    def __len__(self) -> int:
        return self.labels.size


def _fmt(v: float) -> str:
    # repr is the shortest string that round-trips a float exactly.
    return repr(float(v))


def _validate_rows(ids, labels, probs, n_classes) -> tuple[np.ndarray, list[int]]:
    seen: set = set()
    errors = []
    renorm = []
    for i, (sid, lab, row) in enumerate(zip(ids, labels, probs), start=1):
        where = f"row {i} (id {sid!r})"
        if sid in seen:
            errors.append(f"{where}: duplicate sample id")
        seen.add(sid)
        if not 0 <= lab < n_classes:
            errors.append(f"{where}: label {lab} outside [0, {n_classes})")
        if not np.isfinite(row).all() or (row < 0).any() or (row > 1).any():
            errors.append(f"{where}: probabilities must lie in [0, 1]")
            continue
        dev = abs(math.fsum(row) - 1.0)
        if dev > RENORM_TOL:
            errors.append(f"{where}: probabilities sum to {math.fsum(row):.6g}, not 1")
        elif dev > PROB_TOL:
            renorm.append(i)
    if errors:
        raise DataError("invalid probability table:\n  " + "\n  ".join(errors[:20]))
    probs = np.asarray(probs, dtype=float)
    if renorm:
        idx = np.asarray(renorm) - 1
        probs[idx] = probs[idx] / probs[idx].sum(axis=1, keepdims=True)
    return probs, renorm


def _parse_id(raw: str):
    try:
        return int(raw)
    except ValueError:
        return raw


def load_probability_table(path, format: str | None = None) -> ProbabilityTable:
    """Read ``id,label,p0,...`` CSV or the equivalent JSON document."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".") or "csv").lower()
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    ids: list = []
    labels: list[int] = []
    rows: list[list[float]] = []
    if fmt == "csv":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if not header or [h.strip() for h in header[:2]] != ["id", "label"] or len(header) < 3:
            raise DataError(f"{path}: header must be id,label,p0,...,p{{C-1}}")
        n_classes = len(header) - 2
        if [h.strip() for h in header[2:]] != [f"p{k}" for k in range(n_classes)]:
            raise DataError(f"{path}: probability columns must be named p0..p{n_classes - 1}")
        for lineno, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != n_classes + 2:
                raise DataError(f"{path}: row {lineno} has {len(rec)} fields, expected {n_classes + 2}")
            try:
                ids.append(_parse_id(rec[0].strip()))
                labels.append(int(rec[1]))
                rows.append([float(v) for v in rec[2:]])
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno} is malformed: {exc}") from exc
    elif fmt == "json":
        try:
            doc = json.loads(text)
            n_classes = int(doc["class_count"])
            for rec in doc["rows"]:
                ids.append(rec["id"])
                labels.append(int(rec["label"]))
                rows.append([float(v) for v in rec["probs"]])
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: malformed JSON probability table: {exc}") from exc
        for i, r in enumerate(rows, start=1):
            if len(r) != n_classes:
                raise DataError(f"{path}: row {i} has {len(r)} probabilities, expected {n_classes}")
    else:
        raise DataError(f"unsupported table format {fmt!r}")
    probs = np.asarray(rows, dtype=float).reshape(len(rows), n_classes)
    probs, renorm = _validate_rows(ids, labels, probs, n_classes)
    return ProbabilityTable(ids, np.asarray(labels, dtype=np.int64), probs, renorm)


def probability_table_text(table: ProbabilityTable, format: str = "csv") -> str:
    C = table.class_count
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "label"] + [f"p{k}" for k in range(C)])
        for sid, lab, row in zip(table.ids, table.labels, table.probs):
            w.writerow([sid, int(lab)] + [_fmt(v) for v in row])
        return buf.getvalue()
    if format == "json":
        doc = {
            "class_count": C,
            "rows": [
                {"id": sid, "label": int(lab), "probs": [float(v) for v in row]}
                for sid, lab, row in zip(table.ids, table.labels, table.probs)
            ],
        }
        return json.dumps(doc, indent=1) + "\n"
    raise ValueError(f"unsupported table format {format!r}")


def dataset_text(data: Dataset, dim: int) -> str:
    """CSV with header ``id,label,x0,...,x{d-1}``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label"] + [f"x{k}" for k in range(dim)])
    for i, (xi, yi) in enumerate(zip(data.x, data.y)):
        w.writerow([i, int(yi)] + [_fmt(v) for v in xi])
    return buf.getvalue()


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[:2] != ["id", "label"] or len(header) < 3:
        raise DataError(f"{path}: header must be id,label,x0,...")
    d = len(header) - 2
    xs, ys = [], []
    for lineno, rec in enumerate(reader, start=1):
        if not rec:
            continue
        if len(rec) != d + 2:
            raise DataError(f"{path}: row {lineno} has {len(rec)} fields, expected {d + 2}")
        try:
            ys.append(int(rec[1]))
            xs.append([float(v) for v in rec[2:]])
        except ValueError as exc:
            raise DataError(f"{path}: row {lineno} is malformed: {exc}") from exc
    return Dataset(np.asarray(xs, dtype=float).reshape(len(xs), d), np.asarray(ys, dtype=np.int64))
