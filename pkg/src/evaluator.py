#!/usr/bin/env python3
"""
Evaluator - Accuracy, inter-classifier agreement, the PCA + kNN feature probe and the metrics stream.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

import autodiff as ad
from config import LossWeights, ProbeConfig
from datagen import DomainDataset, one_hot
from errors import DataError, ShapeError
from objective import DomainBatch, VatTargets, coda_total

logger = logging.getLogger(__name__)

EVAL_LOSS_SAMPLES = 500


class MetricsRecord(BaseModel):
    """One evaluation point; serialized in declaration order, unset optionals omitted."""
    model_config = ConfigDict(extra="forbid")

    iter: int = Field(ge=0)
    acc_tgt_1: float = Field(ge=0, le=1)
    acc_tgt_2: Optional[float] = Field(None, ge=0, le=1)
    acc_src_1: float = Field(ge=0, le=1)
    acc_src_2: Optional[float] = Field(None, ge=0, le=1)
    agree: Optional[float] = Field(None, ge=0, le=1)
    l_p: Optional[float] = None
    l_d_1: float = 0.0
    l_d_2: Optional[float] = None
    l_y_1: float = 0.0
    l_y_2: Optional[float] = None
    l_ce_1: float = 0.0
    l_ce_2: Optional[float] = None
    d_g: Optional[float] = None
    acc_tgt_ens: Optional[float] = Field(None, ge=0, le=1)
    acc_val_1: Optional[float] = Field(None, ge=0, le=1)
    acc_val_2: Optional[float] = Field(None, ge=0, le=1)
    knn: Optional[Dict[str, float]] = None

    def to_json(self) -> str:
        return json.dumps(self.model_dump(exclude_none=True))


def _predict(model, x: np.ndarray) -> np.ndarray:
    probs = model.predict_proba(x) if hasattr(model, "predict_proba") else model(x)
    return np.argmax(probs, axis=1)  # first maximum = smallest class index


def accuracy(model, data: DomainDataset) -> float:
    if data.labels is None:
        raise DataError(f"accuracy: {data.domain} dataset has no labels")
    if len(data) == 0:
        raise DataError("accuracy: empty dataset")
    return float(np.mean(_predict(model, data.inputs) == data.labels))


def agreement_rate(f1, f2, target: DomainDataset) -> float:
    """Fraction of target samples on which both hypotheses predict the same class."""
    if len(target) == 0:
        raise DataError("agreement_rate: empty dataset")
    return float(np.mean(_predict(f1, target.inputs) == _predict(f2, target.inputs)))


def ensemble_accuracy(members: Sequence, data: DomainDataset) -> float:
    if data.labels is None:
        raise DataError(f"ensemble_accuracy: {data.domain} dataset has no labels")
    probs = np.mean([m.predict_proba(data.inputs) for m in members], axis=0)
    return float(np.mean(np.argmax(probs, axis=1) == data.labels))


@dataclass
class PcaProjection:
    mean: np.ndarray
    basis: np.ndarray  # (d, out_dims), orthonormal columns
    eigenvalues: np.ndarray
    rank_deficient: bool = False

    @property
    def dims(self) -> int:
        return self.basis.shape[1]

    def explained_variance_ratio(self) -> np.ndarray:
        total = self.eigenvalues.sum()
        return self.eigenvalues / total if total > 0 else np.zeros_like(self.eigenvalues)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        if x.shape[1] != self.mean.shape[0]:
            raise ShapeError(f"pca transform: {x.shape[1]} features, projection fitted on {self.mean.shape[0]}")
        return (x - self.mean) @ self.basis


def pca_fit(features: np.ndarray, out_dims: int = 50) -> PcaProjection:
    """Exact covariance eigendecomposition, components sorted by descending eigenvalue.

    Each basis vector is signed so that its largest-magnitude entry is positive,
    which makes the result independent of sample order up to round-off.
    """
    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    n, d = x.shape
    if n < 2:
        raise ShapeError(f"pca_fit: need at least 2 samples, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals, kind="stable")[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    tol = max(eigvals[0], 1.0) * max(n, d) * np.finfo(np.float64).eps
    rank = int(np.sum(eigvals > tol))
    keep = min(out_dims, d, rank)
    deficient = keep < out_dims
    if deficient:
        logger.warning(f"pca_fit: only {keep} usable components (requested {out_dims}, rank {rank}, dim {d})")
    keep = max(keep, 1)

    basis = eigvecs[:, :keep]
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(keep)])
    signs[signs == 0] = 1.0
    return PcaProjection(mean, basis * signs, eigvals[:keep], deficient)


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = np.empty((len(a), len(b)))
    for start in range(0, len(a), chunk):
        diff = a[start:start + chunk, None, :] - b[None, :, :]
        out[start:start + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def knn_predict(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, k: int,
                n_classes: Optional[int] = None) -> np.ndarray:
    """Brute-force Euclidean kNN; distance ties go to the lower training index, vote ties to the lower class."""
    if k < 1:
        raise ValueError(f"knn: k must be >= 1, got {k}")
    if k > len(train_x):
        raise DataError(f"knn: k={k} exceeds training size {len(train_x)}")
    n_classes = n_classes or int(train_y.max()) + 1
    dists = _pairwise_sq_dists(np.asarray(test_x, dtype=np.float64), np.asarray(train_x, dtype=np.float64))
    nearest = np.argsort(dists, axis=1, kind="stable")[:, :k]
    votes = train_y[nearest]
    return np.array([np.argmax(np.bincount(row, minlength=n_classes)) for row in votes])


def knn_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
              k_values: Iterable[int]) -> Dict[int, float]:
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    return {k: float(np.mean(knn_predict(train_x, train_y, test_x, k, n_classes) == test_y)) for k in k_values}


def _subsample(data: DomainDataset, limit: int, seed: int) -> DomainDataset:
    if len(data) <= limit:
        return data
    index = np.sort(np.random.default_rng([seed, 11]).choice(len(data), size=limit, replace=False))
    return data.subset(index)


def feature_probe(hypothesis, source: DomainDataset, target: DomainDataset, probe: ProbeConfig,
                  seed: int = 0) -> Dict[int, float]:
    """kNN accuracy on target features, trained on source features, after a source-fitted PCA."""
    if target.labels is None:
        raise DataError("feature_probe: target labels are required for evaluation")
    src = _subsample(source, probe.max_samples, seed)
    tgt = _subsample(target, probe.max_samples, seed + 1)
    f_src = hypothesis.extract_features(src.inputs)
    f_tgt = hypothesis.extract_features(tgt.inputs)
    projection = pca_fit(f_src, probe.pca_dims)
    result = knn_probe(projection.transform(f_src), src.labels, projection.transform(f_tgt), tgt.labels,
                       probe.k_values)
    logger.info("kNN probe: " + ", ".join(f"k={k} {acc:.4f}" for k, acc in result.items()))
    return result


def evaluation_batch(source: DomainDataset, target: DomainDataset, limit: int = EVAL_LOSS_SAMPLES) -> DomainBatch:
    """Fixed leading slice of both domains used to report loss values."""
    n_s, n_t = min(limit, len(source)), min(limit, len(target))
    return DomainBatch(source_x=source.inputs[:n_s], source_y=one_hot(source.labels[:n_s], source.n_classes),
                       target_x=target.inputs[:n_t])


def evaluate_pair(pair, iteration: int, source: DomainDataset, target: DomainDataset, weights: LossWeights,
                  validation: Optional[DomainDataset] = None, knn: Optional[Dict[int, float]] = None) -> MetricsRecord:
    """Metrics for the pair in its current state; callers put it in eval mode with the weights to report."""
    members = pair.members
    batch = evaluation_batch(source, target)
    n = min(len(batch.source_x), len(batch.target_x))
    batch = DomainBatch(batch.source_x[:n], batch.source_y[:n], batch.target_x[:n])
    with ad.no_grad():
        _, breakdown = coda_total(pair, batch, weights, [VatTargets() for _ in members])

    values = {"iter": iteration}
    for i, (m, terms) in enumerate(zip(members, breakdown.hypotheses), start=1):
        values[f"acc_tgt_{i}"] = accuracy(m, target)
        values[f"acc_src_{i}"] = accuracy(m, source)
        values[f"l_d_{i}"] = terms.l_d
        values[f"l_y_{i}"] = terms.l_y
        values[f"l_ce_{i}"] = terms.l_ce
        if validation is not None:
            values[f"acc_val_{i}"] = accuracy(m, validation)
    if len(members) == 2:
        values["agree"] = agreement_rate(members[0], members[1], target)
        values["l_p"] = breakdown.l_p
        values["d_g"] = breakdown.d_g
        values["acc_tgt_ens"] = ensemble_accuracy(members, target)
    if knn is not None:
        values["knn"] = {str(k): v for k, v in knn.items()}
    return MetricsRecord(**values)


class MetricsWriter:
    """Append-only JSONL stream, flushed per record so it can be tailed while training runs."""

    def __init__(self, path: Path):
        self.path = Path(path)
        try:
            self._fh = open(self.path, "w")
        except OSError as e:
            raise OSError(f"cannot open metrics file {self.path}: {e}") from e

    def write(self, record: MetricsRecord) -> None:
        self._fh.write(record.to_json() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def emit_metrics(records: Iterable[MetricsRecord], path: Path) -> int:
    count = 0
    with MetricsWriter(path) as writer:
        for record in records:
            writer.write(record)
            count += 1
    if count == 0:
        logger.warning(f"No metrics records; wrote empty {path}")
    return count


def read_metrics(path: Path) -> List[MetricsRecord]:
    try:
        with open(path, "r") as f:
            lines = [line for line in f if line.strip()]
    except OSError as e:
        raise OSError(f"cannot read metrics file {path}: {e}") from e
    try:
        return [MetricsRecord.model_validate_json(line) for line in lines]
    except ValidationError as e:
        raise DataError(f"malformed metrics file {path}: {e.error_count()} error(s), first: {e.errors()[0]['msg']}") from None
