"""Information-ordered bottleneck: masking, per-width weights and objectives.

A latent vector of width ``k_max`` is truncated to its first ``k`` units by an
elementwise product with a prefix-of-ones mask.  Training weights the
reconstruction likelihood of every width ``k = 0..k_max``:

* linear scheme: uniform weights, all widths evaluated every step;
* geometric scheme: ``rho_k ~ (1 - r)**k * r``, one width sampled per batch,
  with unit sweeping freezing converged low-index units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .errors import DimensionError, DomainError

__all__ = [
    "MaskVector",
    "UnitSweepConfig",
    "IobConfig",
    "WeightProfile",
    "mask_vector",
    "mask_matrix",
    "apply_mask",
    "weight_profile",
    "geometric_pmf",
    "shifted_geometric_pmf",
    "sample_width",
    "composite_loss_exact",
    "composite_loss_stochastic",
    "sweep_advance",
    "relative_improvement",
]


@dataclass(frozen=True)
class MaskVector:
    k: int
    k_max: int
    values: np.ndarray

    def apply(self, z):
        return apply_mask(z, self)


def mask_vector(k, k_max):
    """Binary vector with ones in the first ``k`` of ``k_max`` positions."""
    k, k_max = int(k), int(k_max)
    if k_max < 0 or not 0 <= k <= k_max:
        raise DomainError(f"mask width k={k} outside [0, {k_max}]")
    values = (np.arange(k_max) < k).astype(np.float32)
    return MaskVector(k, k_max, values)


def mask_matrix(k_max, ks=None, dtype=np.float32):
    """Rows are the masks for each width in ``ks`` (default ``0..k_max``)."""
    ks = range(k_max + 1) if ks is None else ks
    return np.stack([mask_vector(k, k_max).values for k in ks]).astype(dtype) if len(ks) else np.zeros((0, k_max), dtype)


def apply_mask(z, mask):
    """``z * e_k``; closed units pass neither values nor gradients."""
    values = mask.values if isinstance(mask, MaskVector) else np.asarray(mask)
    z = z if isinstance(z, nn.Tensor) else nn.Tensor(z)
    if z.shape[-1] != values.shape[-1]:
        raise DimensionError(f"mask of width {values.shape[-1]} applied to latent {z.shape}")
    return nn.multiply(z, values.astype(z.dtype))


@dataclass
class UnitSweepConfig:
    """Frontier-unit convergence rule and state for unit sweeping.

    ``frozen`` is the number of low-index latent units already frozen; it only
    grows.  ``history`` collects validation losses at the current frontier.
    """

    rate: float
    convergence_threshold: float = 0.01
    patience_epochs: int = 10
    frozen: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.rate < 1.0:
            raise DomainError(f"geometric rate must lie in (0, 1), got {self.rate}")
        if self.patience_epochs < 1:
            raise DomainError("patience_epochs must be >= 1")
        if self.convergence_threshold < 0:
            raise DomainError("convergence_threshold must be >= 0")
        if self.frozen < 0:
            raise DomainError("frozen prefix must be >= 0")


@dataclass
class IobConfig:
    k_max: int
    scheme: str = "linear"
    rate: Optional[float] = None
    summation: Optional[str] = None
    sweep: Optional[UnitSweepConfig] = None

    def __post_init__(self):
        if self.k_max < 0:
            raise DomainError("k_max must be >= 0")
        if self.scheme == "linear":
            if self.summation is None:
                self.summation = "exact"
            if self.summation != "exact":
                raise DomainError("the linear scheme sums all widths exactly")
        elif self.scheme == "geometric":
            if self.rate is None and self.sweep is not None:
                self.rate = self.sweep.rate
            if self.rate is None or not 0.0 < self.rate < 1.0:
                raise DomainError(f"geometric rate must lie in (0, 1), got {self.rate}")
            if self.summation is None:
                self.summation = "stochastic"
            if self.summation != "stochastic":
                raise DomainError("the geometric scheme samples one width per batch")
            if self.sweep is None:
                self.sweep = UnitSweepConfig(rate=self.rate)
        else:
            raise DomainError(f"unknown weighting scheme {self.scheme!r}")

    @classmethod
    def linear(cls, k_max):
        return cls(k_max=k_max, scheme="linear")

    @classmethod
    def geometric(cls, k_max, rate, **sweep_kwargs):
        return cls(k_max=k_max, scheme="geometric", rate=rate, sweep=UnitSweepConfig(rate=rate, **sweep_kwargs))


@dataclass(frozen=True)
class WeightProfile:
    rho: np.ndarray

    @property
    def k_max(self):
        return len(self.rho) - 1


def geometric_pmf(rate, n):
    """Untruncated ``(1 - r)**j * r`` for ``j = 0..n-1``."""
    if not 0.0 < rate < 1.0:
        raise DomainError(f"geometric rate must lie in (0, 1), got {rate}")
    j = np.arange(n, dtype=np.float64)
    return (1.0 - rate) ** j * rate


def shifted_geometric_pmf(rate, frozen, k_max):
    """Distribution of ``k = frozen + Geom(rate)`` truncated to ``k <= k_max``.

    Returns an array over ``k = 0..k_max`` with zeros below ``frozen``.
    """
    if not 0 <= frozen <= k_max:
        raise DomainError(f"frozen prefix {frozen} outside [0, {k_max}]")
    pmf = np.zeros(k_max + 1)
    tail = geometric_pmf(rate, k_max - frozen + 1)
    pmf[frozen:] = tail / tail.sum()
    return pmf


def weight_profile(config):
    if config.scheme == "linear":
        rho = np.full(config.k_max + 1, 1.0 / (config.k_max + 1))
    else:
        rho = geometric_pmf(config.rate, config.k_max + 1)
        rho = rho / rho.sum()
    return WeightProfile(rho)


def sample_width(rate, frozen, k_max, rng):
    """Draw ``frozen + Geom(rate)`` restricted to ``k <= k_max``.

    Draws above the cap are rejected, which yields the renormalized
    truncation of :func:`shifted_geometric_pmf`.
    """
    span = k_max - frozen
    if span < 0:
        raise DomainError(f"frozen prefix {frozen} exceeds k_max {k_max}")
    if span == 0:
        return k_max
    while True:
        # numpy's geometric counts trials (>= 1)
        j = int(rng.geometric(rate)) - 1
        if j <= span:
            return frozen + j


def _nll(yhat, y, variance, weights=None):
    return nn.gaussian_nll(yhat, y, variance, weights)


def composite_loss_exact(encoder, decoder, batch, k_max, rho, variance, target=None, return_terms=False):
    """``sum_k rho_k NLL_k`` over every width, in one stacked decoder pass.

    The batch is encoded once; the latent is replicated under each prefix mask
    and all ``k_max + 1`` branches are decoded as a single large batch.
    With ``return_terms`` the per-width NLLs are returned as well.
    """
    rho = np.asarray(rho.rho if isinstance(rho, WeightProfile) else rho, dtype=np.float64)
    if rho.shape != (k_max + 1,):
        raise DimensionError(f"weight vector of length {rho.shape} for k_max={k_max}")
    x = batch if isinstance(batch, nn.Tensor) else nn.Tensor(batch)
    y = x.data if target is None else np.asarray(target.data if isinstance(target, nn.Tensor) else target)
    z = encoder(x)
    if z.shape[1] != k_max:
        raise DimensionError(f"encoder produced width {z.shape[1]}, expected k_max={k_max}")
    live = np.flatnonzero(rho > 0)
    masks = mask_matrix(k_max, list(live), dtype=z.dtype)
    yhat = decoder(nn.expand_masks(z, masks))
    b = x.shape[0]
    weights = np.repeat(rho[live] / b, b)
    ys = np.broadcast_to(y[None], (len(live),) + y.shape).reshape((len(live) * b,) + y.shape[1:])
    loss = _nll(yhat, ys, variance, weights)
    if not return_terms:
        return loss
    diff = (yhat.data - ys).reshape(len(live), b, -1).astype(np.float64)
    dims = diff.shape[-1]
    terms = np.full(k_max + 1, np.nan)
    terms[live] = (np.square(diff).sum(axis=2) / (2 * variance)).mean(axis=1) + 0.5 * dims * np.log(
        2 * np.pi * variance
    )
    return loss, terms


def composite_loss_stochastic(encoder, decoder, batch, config, sweep_state, variance, rng, target=None):
    """Single-width NLL at ``k = frozen + Geom(r)``; returns ``(loss, k)``."""
    if config.scheme != "geometric":
        raise DomainError("stochastic summation requires the geometric scheme")
    frozen = sweep_state.frozen if sweep_state is not None else 0
    k = sample_width(config.rate, min(frozen, config.k_max), config.k_max, rng)
    x = batch if isinstance(batch, nn.Tensor) else nn.Tensor(batch)
    y = x.data if target is None else np.asarray(target.data if isinstance(target, nn.Tensor) else target)
    z = encoder(x)
    if z.shape[1] != config.k_max:
        raise DimensionError(f"encoder produced width {z.shape[1]}, expected k_max={config.k_max}")
    yhat = decoder(apply_mask(z, mask_vector(k, config.k_max)))
    return _nll(yhat, y, variance), k


def relative_improvement(history, window):
    """Fractional drop of the best loss across a window of ``window`` epochs.

    The reference is the best value up to the first epoch of the window; the
    gain is how far the remaining epochs improved on it.  ``None`` while the
    history is shorter than the window.
    """
    n = len(history)
    if n < max(window, 2):
        return None
    start = n - window + 1 if window > 1 else n - 1
    before = min(history[:start])
    after = min(history[start:])
    scale = abs(before) if before != 0 else 1.0
    return (before - after) / scale


def sweep_advance(sweep_state, validation_history=None, layer=None, k_max=None):
    """Advance the frozen prefix once the frontier unit has converged.

    ``validation_history`` defaults to ``sweep_state.history``.  On advance the
    output row of ``layer`` (the final encoder layer) feeding unit
    ``sweep_state.frozen`` is frozen, the history is cleared and True is
    returned.  Training is finished once ``frozen > k_max``.
    """
    history = sweep_state.history if validation_history is None else validation_history
    gain = relative_improvement(list(history), sweep_state.patience_epochs)
    if gain is None or gain >= sweep_state.convergence_threshold:
        return False
    unit = sweep_state.frozen
    if layer is not None and (k_max is None or unit < k_max):
        layer.freeze_rows(unit)
    sweep_state.frozen += 1
    sweep_state.history = []
    return True
