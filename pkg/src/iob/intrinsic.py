"""Global intrinsic dimensionality from nested likelihood-ratio tests.

Test inputs are encoded once by the frozen encoder.  Under hypothesis ``H_k``
only the first ``k`` entries of a real-valued mask ``e`` may be nonzero, and
the decoder log-likelihood of the test targets given ``decode(z * e)`` is
maximized over those entries.  Consecutive hypotheses differ by one free
parameter, so ``D_k = 2 (L_{k+1} - L_k)`` is compared with the chi-square(1)
quantile; the dimensionality is the first ``k`` where the gain is not
significant.
"""

from __future__ import annotations

import io
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import nn
from .errors import DimensionError, DomainError

__all__ = [
    "MaskParams",
    "MaskOptConfig",
    "IdReport",
    "chi2_threshold",
    "encode_dataset",
    "latent_loglik",
    "latent_loglik_grad",
    "maximize_masked_loglik",
    "wilks_sweep",
    "estimate_id",
]

MODES = ("total", "averaged")


@dataclass
class MaskParams:
    """Mask ``e`` with only the first ``k`` entries free (the rest held at 0)."""

    e: np.ndarray
    k: int

    def __post_init__(self):
        self.e = np.array(self.e, dtype=np.float64)
        if not 0 <= self.k <= len(self.e):
            raise DomainError(f"free count {self.k} outside [0, {len(self.e)}]")
        self.e[self.k :] = 0.0

    @property
    def k_max(self):
        return len(self.e)

    @classmethod
    def initial(cls, k, k_max):
        return cls(np.ones(k_max), k)

    def extended(self):
        """Warm start for ``k + 1``: keep the solution, open the next unit at 1."""
        e = self.e.copy()
        e[self.k] = 1.0
        return MaskParams(e, self.k + 1)


@dataclass
class MaskOptConfig:
    lr: float = 1e-2
    max_iter: int = 500
    tol: float = 1e-6
    window: int = 20
    chunk: int = 2048


def chi2_threshold(alpha=0.05, dof=1):
    """Upper ``1 - alpha`` quantile of chi-square with ``dof`` degrees of freedom."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    return float(stats.chi2.ppf(1.0 - alpha, dof))


def encode_dataset(model, data, chunk=2048):
    """Latents of ``data`` under the model's encoder (no tape)."""
    out = [model.encoder(nn.Tensor(data[i : i + chunk])).data for i in range(0, len(data), chunk)]
    return np.concatenate(out) if out else np.zeros((0, model.k_max), np.float32)


@contextmanager
def _frozen(decoder):
    params = decoder.params()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def _check(latents, targets, e):
    if latents.ndim != 2 or latents.shape[1] != len(e):
        raise DimensionError(f"latents {latents.shape} do not match a mask of width {len(e)}")
    if len(targets) != len(latents):
        raise DimensionError(f"{len(latents)} latents but {len(targets)} targets")


def latent_loglik_grad(decoder, latents, targets, mask, variance, chunk=2048):
    """Total Gaussian log-likelihood of ``targets`` and its gradient in ``e``.

    The gradient is zero outside the ``k`` free components.
    """
    e = mask.e if isinstance(mask, MaskParams) else np.asarray(mask, dtype=np.float64)
    k = mask.k if isinstance(mask, MaskParams) else len(e)
    latents = np.asarray(latents)
    _check(latents, targets, e)
    total = 0.0
    grad = np.zeros(len(e))
    with _frozen(decoder):
        for i in range(0, len(latents), chunk):
            z = latents[i : i + chunk]
            y = targets[i : i + chunk]
            et = nn.Tensor(e.astype(z.dtype), requires_grad=k > 0)
            with nn.Tape() as tape:
                yhat = decoder(nn.multiply(nn.Tensor(z), et))
                nll = nn.gaussian_nll(yhat, y, variance, weights=np.ones(len(z)))
            total -= float(nll.data)
            if k > 0:
                nn.backward(tape, nll)
                grad -= et.grad.astype(np.float64)
    grad[k:] = 0.0
    return total, grad


def latent_loglik(decoder, z, y, mask, variance, chunk=2048):
    """Total Gaussian log-likelihood of ``y`` given ``decode(z * e)``."""
    e = mask.e if isinstance(mask, MaskParams) else np.asarray(mask, dtype=np.float64)
    z = np.asarray(z)
    _check(z, y, e)
    total = 0.0
    for i in range(0, len(z), chunk):
        zc = z[i : i + chunk]
        yhat = decoder(nn.Tensor(zc * e.astype(zc.dtype)))
        total -= float(nn.gaussian_nll(yhat, y[i : i + chunk], variance, weights=np.ones(len(zc))).data)
    return total


@dataclass
class MaskFit:
    mask: MaskParams
    loglik: float
    converged: bool
    iterations: int


def maximize_masked_loglik(decoder, latents, targets, k, variance, opt_config=None, init=None, floor=None):
    """Adam ascent on the ``k`` free mask entries.

    ``init`` is the starting mask (default: free entries at 1).  ``floor`` is
    an optional ``(MaskParams, loglik)`` pair that seeds the best-so-far, so a
    warm-started nested fit can never score below the smaller hypothesis.
    Returns a :class:`MaskFit` holding the best mask seen.
    """
    cfg = opt_config or MaskOptConfig()
    k_max = latents.shape[1]
    mask = init if init is not None else MaskParams.initial(k, k_max)
    if mask.k != k:
        raise DomainError(f"initial mask frees {mask.k} units, expected {k}")
    if k == 0:
        value = latent_loglik(decoder, latents, targets, mask, variance, cfg.chunk)
        return MaskFit(mask, value, True, 0)
    e = mask.e.copy()
    m = np.zeros(k_max)
    v = np.zeros(k_max)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best_e, best_l = None, -np.inf
    if floor is not None:
        best_e, best_l = floor[0].e.copy(), float(floor[1])
    own_best = -np.inf
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        value, grad = latent_loglik_grad(decoder, latents, targets, MaskParams(e, k), variance, cfg.chunk)
        if not np.isfinite(value):
            break
        if value > best_l:
            best_e, best_l = e.copy(), value
        own_best = max(own_best, value)
        trace.append(own_best)
        if len(trace) > cfg.window:
            old = trace[-cfg.window - 1]
            if (own_best - old) <= cfg.tol * max(abs(own_best), 1e-12):
                converged = True
                break
        # ascent: minimize -L
        g = -grad
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        e = e - cfg.lr * (m / (1 - b1**it)) / (np.sqrt(v / (1 - b2**it)) + eps)
        e[k:] = 0.0
    if best_e is None:
        best_e, best_l = e, value
    return MaskFit(MaskParams(best_e, k), best_l, converged, it)


@dataclass
class IdReport:
    """Outcome of a nested sweep.

    ``loglik[k]`` is the maximized total log-likelihood ``L_k``; ``statistic[k]``
    is ``D_k = 2 (L_{k+1} - L_k)`` (divided by the test-set size in averaged
    mode) for each tested ``k``.
    """

    alpha: float
    threshold: float
    mode: str
    n_test: int
    loglik: list = field(default_factory=list)
    statistic: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    k_hat: int = 0
    saturated: bool = False

    @property
    def p_values(self):
        return [float(stats.chi2.sf(d, 1)) for d in self.statistic]

    @property
    def reject(self):
        return [d > self.threshold for d in self.statistic]

    def to_csv(self):
        buf = io.StringIO()
        buf.write("k,L_k,D_k,threshold,reject\n")
        for k, l_k in enumerate(self.loglik):
            if k < len(self.statistic):
                d = self.statistic[k]
                buf.write(f"{k},{l_k:.10g},{d:.10g},{self.threshold:.6f},{int(d > self.threshold)}\n")
            else:
                buf.write(f"{k},{l_k:.10g},,{self.threshold:.6f},\n")
        return buf.getvalue()

    def summary(self):
        flag = " saturated" if self.saturated else ""
        return f"k_hat={self.k_hat}{flag}"


def wilks_sweep(decoder, latents, targets, k_max=None, variance=1.0, alpha=0.05, mode="total",
                opt_config=None, full=False):
    """Sequential likelihood-ratio tests ``H_k`` against ``H_{k+1}``.

    Stops at the first non-significant gain unless ``full`` is set, in which
    case every width is fitted (the estimate is unchanged).  ``mode="averaged"``
    divides the statistic by the number of test samples.
    """
    if mode not in MODES:
        raise DomainError(f"mode must be one of {MODES}, got {mode!r}")
    latents = np.asarray(latents)
    k_max = latents.shape[1] if k_max is None else int(k_max)
    if k_max != latents.shape[1]:
        raise DimensionError(f"k_max={k_max} but latents have width {latents.shape[1]}")
    cfg = opt_config or MaskOptConfig()
    threshold = chi2_threshold(alpha)
    n = len(latents)
    scale = 1.0 / n if mode == "averaged" else 1.0
    report = IdReport(alpha, threshold, mode, n)

    fit = maximize_masked_loglik(decoder, latents, targets, 0, variance, cfg, MaskParams(np.zeros(k_max), 0))
    report.loglik.append(fit.loglik)
    report.masks.append(fit.mask.e)
    report.converged.append(True)
    decided = None
    for k in range(k_max):
        prev = fit
        fit = maximize_masked_loglik(
            decoder, latents, targets, k + 1, variance, cfg, prev.mask.extended(),
            floor=(MaskParams(prev.mask.e, k + 1), prev.loglik),
        )
        report.loglik.append(fit.loglik)
        report.masks.append(fit.mask.e)
        report.converged.append(fit.converged)
        d = 2.0 * (fit.loglik - prev.loglik) * scale
        report.statistic.append(d)
        if decided is None and d <= threshold:
            decided = k
            if not full:
                break
    if decided is None:
        report.k_hat, report.saturated = k_max, True
    else:
        report.k_hat = decided
    return report


def estimate_id(model, bundle, alpha=0.05, mode="total", opt_config=None, full=False, split="val"):
    """Sweep on a trained model with its bundle's test split and training variance."""
    data = bundle.val if split == "val" else bundle.train
    latents = encode_dataset(model, data)
    return wilks_sweep(model.decoder, latents, data, model.k_max, bundle.population_variance, alpha, mode,
                       opt_config, full)
