"""Classical baselines: ordered PCA compression and two ID estimators."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = [
    "PcaModel",
    "TwoNnStats",
    "pca_fit",
    "pca_reconstruct",
    "pca_nmse_curve",
    "twonn_ratios",
    "twonn_estimate",
    "pca_id_broken_stick",
    "broken_stick_expectation",
]


@dataclass
class PcaModel:
    """Mean, orthonormal components (rows, by descending eigenvalue) and eigenvalues.

    Eigenvalues are population variances (divided by n, not n - 1) so they
    sum to ``p`` times the pooled population variance.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_features(self):
        return len(self.mean)


def _flatten(data):
    data = np.asarray(data, dtype=np.float64)
    return data.reshape(len(data), -1)


def pca_fit(data):
    """Eigendecomposition of the covariance via SVD of the centered data."""
    x = _flatten(data)
    n, p = x.shape
    if n < 1:
        raise DomainError("pca_fit needs at least one sample")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    eig = s**2 / n
    if vt.shape[0] < p:
        # fewer samples than features: complete the basis with the null space
        q, _ = np.linalg.qr(np.concatenate([vt.T, np.eye(p)], axis=1))
        vt = np.concatenate([vt, q[:, vt.shape[0] : p].T])
        eig = np.concatenate([eig, np.zeros(p - len(eig))])
    return PcaModel(mean, vt, np.maximum(eig, 0.0))


def pca_reconstruct(model, x, k):
    """Project onto the top ``k`` components and map back (k=0 gives the mean)."""
    p = model.n_features
    if not 0 <= k <= p:
        raise DomainError(f"k={k} outside [0, {p}]")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(len(x), -1)
    basis = model.components[:k]
    recon = model.mean + ((flat - model.mean) @ basis.T) @ basis
    return recon.reshape(x.shape)


def pca_nmse_curve(model, data, variance, ks=None):
    """Rows ``(k, per-sample normalized MSE array)`` for each width."""
    x = _flatten(data)
    ks = range(model.n_features + 1) if ks is None else ks
    out = []
    for k in ks:
        err = pca_reconstruct(model, x, k) - x
        out.append((k, np.mean(err * err, axis=1) / variance))
    return out


@dataclass
class TwoNnStats:
    mu: np.ndarray
    dimension: float
    n_used: int
    n_duplicates: int


def _two_nearest(x, chunk=1024):
    sq = np.einsum("ij,ij->i", x, x)
    n = len(x)
    r = np.empty((n, 2))
    for i in range(0, n, chunk):
        block = x[i : i + chunk]
        d2 = sq[i : i + chunk, None] + sq[None, :] - 2.0 * block @ x.T
        np.maximum(d2, 0.0, out=d2)
        d2[np.arange(len(block)), np.arange(i, i + len(block))] = np.inf
        two = np.partition(d2, 1, axis=1)[:, :2]
        r[i : i + chunk] = np.sqrt(np.sort(two, axis=1))
    return r


def twonn_ratios(data, subsample=5000, seed=0):
    """``mu_i = r2 / r1`` from brute-force neighbour search on a subsample."""
    x = _flatten(data)
    if len(x) < 3:
        raise DomainError("TwoNN needs at least three points")
    if subsample is not None and len(x) > subsample:
        rng = np.random.default_rng(seed)
        x = x[np.sort(rng.choice(len(x), size=subsample, replace=False))]
    r = _two_nearest(x)
    dup = r[:, 0] <= 0
    if dup.any():
        warnings.warn(f"TwoNN: excluding {int(dup.sum())} points with a duplicate neighbour", RuntimeWarning)
    return r[~dup, 1] / r[~dup, 0], int(dup.sum())


def twonn_estimate(data, subsample=5000, seed=0, return_stats=False):
    """Maximum-likelihood TwoNN dimension ``n / sum(log mu_i)``."""
    mu, n_dup = twonn_ratios(data, subsample, seed)
    logs = np.log(mu)
    total = logs.sum()
    if total <= 0:
        raise DomainError("TwoNN: all neighbour ratios equal one")
    d = len(mu) / total
    if return_stats:
        return TwoNnStats(mu, float(d), len(mu), n_dup)
    return float(d)


def broken_stick_expectation(p):
    """``b_i = (1/p) sum_{j=i}^{p} 1/j`` for ``i = 1..p``."""
    inv = 1.0 / np.arange(1, p + 1)
    return np.cumsum(inv[::-1])[::-1] / p


def pca_id_broken_stick(model):
    """Number of leading components whose variance share beats the broken stick."""
    eig = np.asarray(model.eigenvalues, dtype=np.float64)
    total = eig.sum()
    if total <= 0:
        return 0
    share = eig / total
    exceeds = share > broken_stick_expectation(len(eig))
    return int(np.argmin(exceeds)) if not exceeds.all() else len(eig)
