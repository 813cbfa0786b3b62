"""Evaluation metrics: partition agreement, optimal-transport distances,
rank-statistic AUC, and coefficient-recovery scoring with expert alignment."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .library import rescale_theta

__all__ = [
    "PartitionScore",
    "RecoveryReport",
    "ari",
    "nmi",
    "partition_score",
    "wasserstein_1d",
    "wasserstein_joint",
    "roc_auc",
    "best_permutation",
    "recovery_report",
    "metric_record",
]


# ---------------------------------------------------------------------------
# partition metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionScore:
    ari: float
    nmi: float


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def ari(a, b) -> float:
    """Adjusted Rand index from pair counting.

    Expected-index correction: random partitions score near 0, identical
    partitions score 1. Two constant partitions are identical, hence 1.0.
    """
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError("label arrays must have equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two points")
    table = _contingency(a, b)

    def comb2(x):
        return x * (x - 1) / 2.0

    index = comb2(table).sum()
    row = comb2(table.sum(axis=1)).sum()
    col = comb2(table.sum(axis=0)).sum()
    expected = row * col / comb2(n)
    max_index = 0.5 * (row + col)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def nmi(a, b) -> float:
    """Mutual information normalized by the arithmetic mean of the marginal
    entropies; 0 when either partition carries no information."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError("label arrays must have equal length")
    n = a.size
    if n < 1:
        raise ValueError("need at least one point")
    table = _contingency(a, b).astype(float)
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n

    def entropy(p):
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    ha, hb = entropy(pa), entropy(pb)
    if ha == 0.0 or hb == 0.0:
        return 0.0
    pj = table / n
    nz = pj > 0
    mi = float((pj[nz] * np.log(pj[nz] / np.outer(pa, pb)[nz])).sum())
    return mi / (0.5 * (ha + hb))


def partition_score(a, b) -> PartitionScore:
    return PartitionScore(ari=ari(a, b), nmi=nmi(a, b))


# ---------------------------------------------------------------------------
# transport distances
# ---------------------------------------------------------------------------

def wasserstein_1d(a, b, p: int = 1) -> float:
    """Order-statistic transport distance between two 1-D samples.

    Equal sizes pair sorted values directly; unequal sizes evaluate both
    empirical quantile functions on a shared midpoint grid of the larger
    size, so pushforwards with dropped particles remain comparable.
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size != b.size:
        m = max(a.size, b.size)
        q = (np.arange(m) + 0.5) / m
        a = np.quantile(a, q, method="inverted_cdf")
        b = np.quantile(b, q, method="inverted_cdf")
    cost = np.mean(np.abs(a - b) ** p)
    return float(cost ** (1.0 / p))


def wasserstein_joint(A, B, p: int = 1, cap: int = 1024, seed: int = 0) -> float:
    """Exact balanced-assignment transport distance between point clouds.

    Both clouds are subsampled (seeded, without replacement) to
    ``m = min(len(A), len(B), cap)`` points, matched by an exact assignment
    on Euclidean cost to the power p, and scored as (mean matched
    cost)^(1/p).
    """
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.size == 0 or B.size == 0:
        raise ValueError("empty sample")
    if A.shape[1] != B.shape[1]:
        raise ValueError("dimension mismatch between point clouds")
    m = min(A.shape[0], B.shape[0], cap)
    rng = np.random.default_rng(seed)
    if A.shape[0] > m:
        A = A[rng.choice(A.shape[0], size=m, replace=False)]
    if B.shape[0] > m:
        B = B[rng.choice(B.shape[0], size=m, replace=False)]
    diff = A[:, None, :] - B[None, :, :]
    cost = np.sqrt((diff ** 2).sum(axis=2)) ** p
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean() ** (1.0 / p))


# ---------------------------------------------------------------------------
# rank-statistic AUC
# ---------------------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic with
    midrank tie handling."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# coefficient recovery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecoveryReport:
    alignment: tuple          # alignment[k] = true-expert index matched to fitted k
    table: tuple              # rows: (expert, term, output, true, estimated, error)
    max_true_term_error: float
    max_spurious_magnitude: float


def best_permutation(fitted: np.ndarray, truth: np.ndarray) -> tuple:
    """Min-total-L2 bijection between fitted and true coefficient stacks."""
    K = fitted.shape[0]
    if truth.shape[0] != K:
        raise ValueError("expert count mismatch")
    cost = np.empty((K, K))
    for i in range(K):
        for j in range(K):
            cost[i, j] = np.linalg.norm(fitted[i] - truth[j])
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(K, dtype=int)
    perm[rows] = cols
    return tuple(int(v) for v in perm)


def recovery_report(model, truth: np.ndarray, state_scale=None,
                    velocity_scale=None) -> RecoveryReport:
    """Score fitted expert coefficients against ground-truth tables.

    ``truth`` is a (K, n_terms, dim) stack in raw coordinates and the
    model library's term order. When the model was fitted on rescaled data,
    pass the stored scale vectors so the fitted coefficients are mapped back
    to raw units before comparison. Experts are aligned by the min-cost
    bijection on coefficient distance; the table runs over terms in the
    library's graded order.
    """
    lib = model.library
    truth = np.asarray(truth, dtype=float)
    if truth.ndim != 3 or truth.shape[1:] != (lib.n_terms, lib.dim):
        raise ValueError("truth tables do not match the model's term library")
    K = model.thetas.shape[0]
    if truth.shape[0] != K:
        raise ValueError("expert count mismatch between model and truth")
    if state_scale is None:
        fitted = np.array(model.thetas, dtype=float)
    else:
        if velocity_scale is None:
            raise ValueError("state_scale and velocity_scale go together")
        fitted = np.stack([
            rescale_theta(lib, model.thetas[k], state_scale, velocity_scale,
                          to_raw=True)
            for k in range(K)
        ])
    perm = best_permutation(fitted, truth)
    rows = []
    worst_true = 0.0
    worst_spurious = 0.0
    for k in range(K):
        t = truth[perm[k]]
        f = fitted[k]
        for pi, term in enumerate(lib.terms):
            for j in range(lib.dim):
                err = abs(f[pi, j] - t[pi, j])
                rows.append((k, term, j, float(t[pi, j]), float(f[pi, j]), float(err)))
                if t[pi, j] != 0.0:
                    worst_true = max(worst_true, err)
                else:
                    worst_spurious = max(worst_spurious, abs(float(f[pi, j])))
    return RecoveryReport(
        alignment=perm,
        table=tuple(rows),
        max_true_term_error=worst_true,
        max_spurious_magnitude=worst_spurious,
    )


def metric_record(metric: str, value: float, **fields) -> dict:
    """JSON-ready record for a metric value; None-valued fields dropped."""
    rec = {"metric": metric, "value": float(value)}
    for key, val in fields.items():
        if val is not None:
            rec[key] = val
    return rec
