"""Compression curves, latent interpolation and complexity-ordering reports.

Everything here is read-only over trained models and emits plain CSV or PGM
files.  Percentiles use the nearest-rank rule.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import PcaModel, pca_reconstruct
from .bottleneck import mask_vector
from .datasets import export_pgm
from .errors import DomainError, UsageError
from .training import Autoencoder, nearest_rank_percentile, per_sample_nmse

__all__ = [
    "CurveRow",
    "CurveTable",
    "InterpolationSpec",
    "Interpolation",
    "HeterogeneousReport",
    "score_model",
    "compression_comparison",
    "interpolate_latents",
    "heterogeneous_report",
    "tile_images",
]

CSV_HEADER = "k,estimator,mean,p16,p84"


@dataclass(frozen=True)
class CurveRow:
    k: int
    estimator: str
    center: float
    p16: float
    p84: float


@dataclass
class CurveTable:
    """Rows of ``(k, estimator, center, p16, p84)``.

    ``center`` is the mean for compression tables and the median for the
    per-population tables of :func:`heterogeneous_report`; it names the
    third CSV column.
    """

    rows: list = field(default_factory=list)
    center: str = "mean"

    def add(self, k, estimator, scores):
        s = np.asarray(scores, dtype=np.float64)
        mid = float(s.mean()) if self.center == "mean" else nearest_rank_percentile(s, 50)
        self.rows.append(
            CurveRow(int(k), estimator, mid, nearest_rank_percentile(s, 16), nearest_rank_percentile(s, 84))
        )

    @property
    def estimators(self):
        return list(dict.fromkeys(r.estimator for r in self.rows))

    def curve(self, estimator):
        """``{k: center}`` for one estimator."""
        return {r.k: r.center for r in self.rows if r.estimator == estimator}

    def row(self, k, estimator):
        for r in self.rows:
            if r.k == k and r.estimator == estimator:
                return r
        raise KeyError((k, estimator))

    def to_csv(self):
        buf = io.StringIO()
        buf.write(CSV_HEADER.replace("mean", self.center) + "\n")
        for r in self.rows:
            buf.write(f"{r.k},{r.estimator},{r.center:.8g},{r.p16:.8g},{r.p84:.8g}\n")
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text):
        lines = text.strip().splitlines()
        center = lines[0].split(",")[2]
        rows = []
        for line in lines[1:]:
            k, est, c, lo, hi = line.split(",")
            rows.append(CurveRow(int(k), est, float(c), float(lo), float(hi)))
        return cls(rows, center)


def score_model(model, data, variance, ks):
    """``{k: per-sample normalized MSE}`` for any supported model type.

    Accepts an :class:`Autoencoder` (masked at each width), a dict of
    fixed-width autoencoders keyed by width, or a :class:`PcaModel`.
    """
    if isinstance(model, PcaModel):
        flat = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
        out = {}
        for k in ks:
            if k <= model.n_features:
                err = pca_reconstruct(model, flat, k) - flat
                out[k] = np.mean(err * err, axis=1) / variance
        return out
    if isinstance(model, dict):
        return {k: per_sample_nmse(model[k], data, k, variance, width=k) for k in ks if k in model}
    if isinstance(model, Autoencoder):
        return {k: per_sample_nmse(model, data, k, variance) for k in ks if k <= model.k_max}
    raise UsageError(f"cannot score a model of type {type(model).__name__}")


def compression_comparison(models, bundle, ks=None, split="val"):
    """Normalized-MSE curves of several estimators on one bundle.

    ``models`` maps an estimator name (e.g. ``linear_iob``, ``pca``) to a
    model; entries that are None are skipped with a warning.
    """
    data = bundle.val if split == "val" else bundle.train
    var = bundle.population_variance
    if ks is None:
        widths = [m.k_max for m in models.values() if isinstance(m, Autoencoder)]
        widths += [max(m) for m in models.values() if isinstance(m, dict) and m]
        ks = range(max(widths, default=int(np.prod(bundle.sample_shape))) + 1)
    table = CurveTable()
    for name, model in models.items():
        if model is None:
            warnings.warn(f"no model for estimator {name!r}; rows omitted", RuntimeWarning)
            continue
        for k, scores in score_model(model, data, var, ks).items():
            table.add(k, name, scores)
    return table


@dataclass(frozen=True)
class InterpolationSpec:
    a: int
    b: int
    steps: int = 8
    k: int = None

    def __post_init__(self):
        if self.steps < 2:
            raise DomainError("interpolation needs at least 2 steps")


@dataclass
class Interpolation:
    alphas: np.ndarray
    latents: np.ndarray
    images: np.ndarray


def interpolate_latents(model, data, spec, path=None):
    """Decode ``(1 - alpha) z_a + alpha z_b`` on a uniform alpha grid.

    Latents are masked at width ``spec.k`` (default ``k_max``).  Images are
    clamped to [0, 1].  With ``path`` a PGM strip is written in which the two
    endpoint frames carry a white marker bar underneath.
    """
    data = np.asarray(data, dtype=np.float32)
    n = len(data)
    for idx in (spec.a, spec.b):
        if not 0 <= idx < n:
            raise DomainError(f"sample index {idx} outside [0, {n})")
    k = model.k_max if spec.k is None else spec.k
    mask = mask_vector(k, model.k_max).values
    # one sample per pass, so the endpoint frames follow exactly the
    # arithmetic of a single-sample reconstruction (BLAS kernels vary with batch size)
    za = model.encode(data[[spec.a]])[0] * mask
    zb = model.encode(data[[spec.b]])[0] * mask
    alphas = np.linspace(0.0, 1.0, spec.steps, dtype=np.float32)
    lat = ((1.0 - alphas)[:, None] * za[None, :] + alphas[:, None] * zb[None, :]).astype(np.float32)
    images = np.clip(np.concatenate([model.decode(lat[i : i + 1]) for i in range(len(lat))]), 0.0, 1.0)
    if path is not None:
        frames = images.reshape(len(images), -1, images.shape[-1])
        strip = tile_images([frames], gap=1)
        h, w = frames.shape[1:]
        bar = np.zeros((3, strip.shape[1]), dtype=np.float32)
        for col in (0, len(frames) - 1):
            x0 = 1 + col * (w + 1)
            bar[1:, x0 : x0 + w] = 1.0
        export_pgm(path, np.concatenate([strip, bar]))
    return Interpolation(alphas, lat, images)


def tile_images(rows, gap=1, fill=0.5):
    """Arrange a list of rows of equally sized 2-D images into one grid."""
    h, w = np.asarray(rows[0][0]).shape[-2:]
    ncol = max(len(r) for r in rows)
    grid = np.full((gap + len(rows) * (h + gap), gap + ncol * (w + gap)), fill, dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = gap + i * (h + gap), gap + j * (w + gap)
            grid[y : y + h, x : x + w] = np.asarray(img).reshape(h, w)
    return grid


@dataclass
class HeterogeneousReport:
    table: CurveTable
    group_sizes: dict
    scores: dict
    exemplars: list
    exemplar_k: int

    def median_curve(self, n):
        return self.table.curve(f"n={n}")


def heterogeneous_report(model, bundle, ks=None, exemplar_k=9, percentiles=(5, 25, 50, 75, 95), out_dir=None):
    """Per-population loss curves on a heterogeneous n-Disk bundle.

    Validation samples are grouped by their true disk count; for each group
    and width the median and 16/84 percentiles of normalized MSE are
    tabulated.  Exemplars at ``exemplar_k`` are the samples sitting at the
    given loss percentiles of each group.  With ``out_dir`` the table, an
    exemplar grid (``exemplars.pgm``: per group, input above reconstruction)
    and a sidecar index (``exemplars.txt``) are written.
    """
    if "n" not in bundle.meta:
        raise UsageError(f"bundle {bundle.name!r} has no per-sample disk counts; not a heterogeneous bundle")
    counts = np.asarray(bundle.val_meta("n")).astype(int)
    data = bundle.val
    var = bundle.population_variance
    ks = range(model.k_max + 1) if ks is None else ks
    if not 0 <= exemplar_k <= model.k_max:
        raise DomainError(f"exemplar width {exemplar_k} outside [0, {model.k_max}]")
    widths = sorted(set(ks) | {exemplar_k})
    all_scores = {k: per_sample_nmse(model, data, k, var) for k in widths}
    table = CurveTable(center="median")
    groups = sorted(set(counts.tolist()))
    sizes = {n: int((counts == n).sum()) for n in groups}
    scores = {}
    for n in groups:
        sel = counts == n
        scores[n] = {k: all_scores[k][sel] for k in widths}
        for k in ks:
            table.add(k, f"n={n}", scores[n][k])

    exemplars = []
    for n in groups:
        rows = np.flatnonzero(counts == n)
        s = all_scores[exemplar_k][rows]
        order = np.argsort(s, kind="stable")
        for q in percentiles:
            rank = max(1, int(np.ceil(q / 100.0 * len(s))))
            pick = rows[order[min(rank, len(s)) - 1]]
            exemplars.append((n, q, int(pick), float(all_scores[exemplar_k][pick])))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.write(out / "heterogeneous.csv")
        picks = [e[2] for e in exemplars]
        recon = np.clip(model.reconstruct(data[picks], exemplar_k), 0.0, 1.0)
        per = len(percentiles)
        rows_img = []
        for g in range(len(groups)):
            sl = slice(g * per, (g + 1) * per)
            rows_img.append(list(data[picks][sl, 0]))
            rows_img.append(list(recon[sl, 0]))
        export_pgm(out / "exemplars.pgm", tile_images(rows_img))
        lines = ["grid_row,grid_col,n,percentile,val_row,nmse"]
        for i, (n, q, pick, v) in enumerate(exemplars):
            g, c = divmod(i, per)
            lines.append(f"{2 * g},{c},{n},{q},{pick},{v:.8g}")
        (out / "exemplars.txt").write_text("\n".join(lines) + "\n")
    return HeterogeneousReport(table, sizes, scores, exemplars, exemplar_k)
