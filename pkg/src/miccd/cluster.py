"""Gaussian mixture fitted by EM (full or diagonal covariance), used to label anomaly patterns."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .errors import DegenerateComponent, ShapeMismatch
from .scm import make_rng

VAR_FLOOR = 1e-6
LOG2PI = np.log(2 * np.pi)


@dataclass
class GmmModel:
    means: np.ndarray        # (K, m)
    covariances: np.ndarray  # (K, m, m); off-diagonals are zero for "diag"
    weights: np.ndarray      # (K,)
    covariance_type: str = "full"
    loglik: float = float("nan")
    history: list = field(default_factory=list, repr=False)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def variances(self) -> np.ndarray:
        return np.diagonal(self.covariances, axis1=1, axis2=2).copy()

    def n_params(self) -> int:
        m = self.means.shape[1]
        per = m + (m if self.covariance_type == "diag" else m * (m + 1) // 2)
        return self.K * (per + 1) - 1

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "covariance_type": self.covariance_type,
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "covariances": self.covariances.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        means = np.asarray(d["means"], float)
        if "covariances" in d:
            cov = np.asarray(d["covariances"], float)
        else:
            cov = np.stack([np.diag(v) for v in np.asarray(d["variances"], float)])
        return cls(means, cov, np.asarray(d["weights"], float),
                   d.get("covariance_type", "full"))


@dataclass
class PatternLabels:
    hard: np.ndarray              # (n,)
    responsibilities: np.ndarray  # (n, K)

    def one_hot(self, width: int = None) -> np.ndarray:
        return one_hot(self.hard, width or self.responsibilities.shape[1])


def _log_joint(data, means, covs, weights):
    # (n, K): log w_k + log N(x | mu_k, Sigma_k)
    n, m = data.shape
    out = np.empty((n, means.shape[0]))
    for k in range(means.shape[0]):
        L = np.linalg.cholesky(covs[k])
        sol = np.linalg.solve(L, (data - means[k]).T)
        out[:, k] = -0.5 * (np.sum(sol ** 2, axis=0) + m * LOG2PI) - np.sum(np.log(np.diag(L)))
    with np.errstate(divide="ignore"):
        return out + np.log(weights)[None]


def _kmeanspp(data, K, rng):
    n = data.shape[0]
    centers = [data[rng.integers(n)]]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(data[idx])
        d2 = np.minimum(d2, np.sum((data - data[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step_cov(data, resp, nk, means, cov_type, floor):
    K, m = means.shape
    covs = np.empty((K, m, m))
    for k in range(K):
        diff = data - means[k]
        if cov_type == "diag":
            v = (resp[:, k] @ (diff ** 2)) / nk[k]
            covs[k] = np.diag(np.maximum(v, floor))
        else:
            c = (resp[:, k, None] * diff).T @ diff / nk[k]
            c = 0.5 * (c + c.T)
            # floor the spectrum so every component stays non-singular
            w, V = np.linalg.eigh(c)
            covs[k] = (V * np.maximum(w, floor)) @ V.T
    return covs


def _em_run(data, K, rng, tol, max_iter, var_floor, cov_type):
    n, m = data.shape
    base_var = np.maximum(data.var(axis=0), var_floor)
    means = _kmeanspp(data, K, rng)
    covs = np.tile(np.diag(base_var), (K, 1, 1))
    weights = np.full(K, 1.0 / K)
    history = []
    reseeds = 0
    it = 0
    while it < max_iter:
        lj = _log_joint(data, means, covs, weights)
        lse = logsumexp(lj, axis=1)
        ll = float(lse.sum())
        if history:
            prev = history[-1]
            # spectral flooring is a projection, so allow float noise only
            assert ll >= prev - 1e-8 * max(1.0, abs(prev)), "EM log-likelihood decreased"
            if (ll - prev) / n < tol:
                history.append(ll)
                break
        history.append(ll)
        resp = np.exp(lj - lse[:, None])
        nk = resp.sum(axis=0)
        bad = np.flatnonzero(nk < 1.0)
        if bad.size:
            reseeds += 1
            if reseeds > 3:
                raise DegenerateComponent(
                    f"component(s) {bad.tolist()} collapsed after 3 re-seeds")
            worst = np.argsort(lse)[:bad.size]
            means = means.copy()
            covs = covs.copy()
            means[bad] = data[worst]
            covs[bad] = np.diag(base_var)
            weights = np.full(K, 1.0 / K)
            history = []
            it = 0
            continue
        weights = nk / n
        means = (resp.T @ data) / nk[:, None]
        covs = _m_step_cov(data, resp, nk, means, cov_type, var_floor)
        it += 1
    return GmmModel(means, covs, weights, cov_type, history[-1], history)


def fit_gmm(data, K: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 200,
            restarts: int = 5, var_floor: float = VAR_FLOOR,
            covariance_type: str = "full") -> GmmModel:
    """Best-of-``restarts`` EM fit; k-means++ seeding per restart."""
    if covariance_type not in ("full", "diag"):
        raise ValueError(f"unknown covariance type {covariance_type!r}")
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    n = data.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    best = None
    for r in range(restarts):
        model = _em_run(data, K, make_rng(seed, "gmm", K, r), tol, max_iter, var_floor,
                        covariance_type)
        if best is None or model.loglik > best.loglik:
            best = model
    return best


def assign_labels(gmm: GmmModel, data) -> PatternLabels:
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[1] != gmm.means.shape[1]:
        raise ShapeMismatch(f"data has {data.shape[1]} columns, model expects {gmm.means.shape[1]}")
    lj = _log_joint(data, gmm.means, gmm.covariances, gmm.weights)
    resp = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    # argmax returns the first maximum, i.e. the lowest index on ties
    return PatternLabels(np.argmax(resp, axis=1), resp)


def bic(gmm: GmmModel, n: int) -> float:
    return -2.0 * gmm.loglik + gmm.n_params() * np.log(n)


def select_k(data, k_min: int = 1, k_max: int = 6, seed: int = 0, **fit_kw) -> int:
    if k_min > k_max:
        raise ValueError("k_min must not exceed k_max")
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if k_min == k_max:
        return k_min
    scores = []
    for k in range(k_min, min(k_max, data.shape[0]) + 1):
        scores.append((bic(fit_gmm(data, k, seed=seed, **fit_kw), data.shape[0]), k))
    return min(scores)[1]


def aligned_accuracy(pred, truth) -> float:
    """Accuracy after the best one-to-one relabelling of predicted clusters."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    ps, ts = np.unique(pred), np.unique(truth)
    conf = np.array([[np.sum((pred == p) & (truth == t)) for t in ts] for p in ps])
    r, c = linear_sum_assignment(-conf)
    return float(conf[r, c].sum() / len(pred))


def label_dataset(gmm: GmmModel, full: np.ndarray, abnormal: np.ndarray) -> np.ndarray:
    """Cluster index for abnormal rows, reserved index ``K`` for the rest."""
    labels = np.full(full.shape[0], gmm.K, dtype=int)
    rows = np.flatnonzero(abnormal)
    if rows.size:
        labels[rows] = assign_labels(gmm, full[rows]).hard
    return labels


CLUSTER_MODES = ("all", "y_abnormal", "flagged")


@dataclass
class Clustering:
    gmm: GmmModel
    labels: np.ndarray   # pattern index per row; K marks the normal regime
    K: int
    mode: str
    normal_component: int = -1

    def predict(self, full, mask=None) -> np.ndarray:
        """Labels for new rows; masked modes need the row mask of the new data."""
        full = np.asarray(full, dtype=float)
        if self.mode == "all":
            return _renumber(self.K, self.normal_component)[assign_labels(self.gmm, full).hard]
        if mask is None:
            raise ValueError(f"mode {self.mode!r} needs its row mask")
        return label_dataset(self.gmm, full, np.asarray(mask, bool))

    def to_dict(self) -> dict:
        return {"K": self.K, "mode": self.mode, "normal_component": self.normal_component,
                "gmm": self.gmm.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, labels=None) -> "Clustering":
        labels = np.zeros(0, int) if labels is None else np.asarray(labels, int)
        return cls(GmmModel.from_dict(d["gmm"]), labels, int(d["K"]), d["mode"],
                   int(d["normal_component"]))


def _renumber(K: int, normal: int) -> np.ndarray:
    # pattern components keep their relative order; the normal one becomes K
    remap = np.empty(K + 1, dtype=int)
    remap[[k for k in range(K + 1) if k != normal]] = np.arange(K)
    remap[normal] = K
    return remap


def cluster_patterns(full, K: int, mode: str = "all", seed: int = 0, y_abnormal=None,
                     flagged=None, **fit_kw) -> Clustering:
    """Produce pattern labels for every row.

    ``all`` fits K+1 components to every row and takes the heaviest one as the
    normal regime. ``y_abnormal`` and ``flagged`` fit K components to the rows
    selected by the given mask; unselected rows get label K.
    """
    if mode not in CLUSTER_MODES:
        raise ValueError(f"unknown cluster mode {mode!r}")
    full = np.asarray(full, dtype=float)
    if mode == "all":
        gmm = fit_gmm(full, K + 1, seed=seed, **fit_kw)
        hard = assign_labels(gmm, full).hard
        normal = int(np.argmax(gmm.weights))
        return Clustering(gmm, _renumber(K, normal)[hard], K, mode, normal)
    mask = y_abnormal if mode == "y_abnormal" else flagged
    if mask is None:
        raise ValueError(f"mode {mode!r} needs its row mask")
    mask = np.asarray(mask, bool)
    if mask.sum() < K:
        raise ValueError(f"only {int(mask.sum())} selected rows for K={K}")
    gmm = fit_gmm(full[mask], K, seed=seed, **fit_kw)
    return Clustering(gmm, label_dataset(gmm, full, mask), K, mode)


def one_hot(labels, width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.shape[0], width))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def save_gmm(gmm: GmmModel, path) -> None:
    Path(path).write_text(json.dumps(gmm.to_dict(), sort_keys=True) + "\n")


def load_gmm(path) -> GmmModel:
    return GmmModel.from_dict(json.loads(Path(path).read_text()))
