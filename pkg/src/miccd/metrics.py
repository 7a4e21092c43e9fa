"""Evaluation metrics and the z-score baseline ranking."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import EmptyInput, LengthMismatch, NoRelevantItems, ZeroReference, ZeroVariance


def f1_score(pred, truth, mode: str = "binary", positive=1) -> float:
    """Binary F1 for class ``positive``, or the unweighted mean over classes."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.size} predictions for {truth.size} labels")
    if pred.size == 0:
        raise EmptyInput("no labels")
    if mode == "binary":
        return _f1_one(pred, truth, positive)
    if mode == "macro":
        classes = np.union1d(np.unique(pred), np.unique(truth))
        return float(np.mean([_f1_one(pred, truth, c) for c in classes]))
    raise ValueError(f"unknown F1 mode {mode!r}")


def _f1_one(pred, truth, c) -> float:
    tp = np.sum((pred == c) & (truth == c))
    fp = np.sum((pred == c) & (truth != c))
    fn = np.sum((pred != c) & (truth == c))
    if tp == 0:
        return 0.0
    return float(2 * tp / (2 * tp + fp + fn))


def normalized_cost(plan_cost: float, reference_cost: float) -> float:
    if not reference_cost > 0:
        raise ZeroReference(f"reference cost must be positive, got {reference_cost}")
    return float(plan_cost) / float(reference_cost)


def ndcg_at_k(ranking: Sequence[int], relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise NoRelevantItems("nDCG needs at least one relevant item")
    top = list(ranking)[:k]
    dcg = sum(1.0 / np.log2(i + 2) for i, item in enumerate(top) if int(item) in relevant)
    ideal = sum(1.0 / np.log2(i + 2) for i in range(min(k, len(relevant))))
    return float(dcg / ideal)


def r_mse(pred, truth) -> float:
    """MSE divided by the population variance of ``truth``."""
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.size} predictions for {truth.size} targets")
    var = truth.var()
    if not var > 0:
        raise ZeroVariance("truth has zero variance")
    return float(np.mean((pred - truth) ** 2) / var)


def naive_rca_rank(sample, mean, std) -> list:
    """Variables by descending |z-score|; ties go to the lower index."""
    sample = np.asarray(sample, dtype=float)
    mean = np.asarray(mean, dtype=float)
    std = np.maximum(np.asarray(std, dtype=float), 1e-8)
    if not sample.shape == mean.shape == std.shape:
        raise LengthMismatch("sample and statistics must have equal length")
    score = np.abs((sample - mean) / std)
    return sorted(range(sample.size), key=lambda i: (-score[i], i))
