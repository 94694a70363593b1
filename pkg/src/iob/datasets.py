"""Synthetic datasets and on-disk formats.

Generators
----------
* noisy S-curve in R^3 (2-D manifold plus isotropic Gaussian noise);
* n-Disk: 32x32 binary images holding n possibly overlapping disks;
* heterogeneous n-Disk mix with n drawn uniformly from {1, 2, 3, 4};
* rank-d linear Gaussian data, a control with known dimensionality.

All generators draw from numpy's ``PCG64`` bit generator and produce a
:class:`DatasetBundle` with a fixed 90/10 train/validation split.

Formats
-------
Tensor file (little endian)::

    b"IOBT" | u8 version=1 | u8 dtype=0 (f32) | u16 reserved=0 | u32 ndim
    | ndim x u64 dims | f32 payload, row-major

PGM images are binary P5 with maxval 255.
"""

from __future__ import annotations

import hashlib
import io
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

__all__ = [
    "PRNG_NAME",
    "ScurveConfig",
    "NDiskConfig",
    "LinearGaussianConfig",
    "DatasetBundle",
    "split_indices",
    "population_variance",
    "sample_scurve",
    "render_disks",
    "generate_ndisk_image",
    "build_ndisk",
    "build_heterogeneous",
    "sample_linear_gaussian",
    "write_tensor_file",
    "read_tensor_file",
    "write_tensor_record",
    "read_tensor_record",
    "export_pgm",
    "image_to_bytes",
    "save_bundle",
    "load_bundle",
]

PRNG_NAME = "numpy.PCG64"
TRAIN_FRACTION = 0.9
IMAGE_SIZE = 32

_MAGIC = b"IOBT"
_VERSION = 1
_DTYPE_F32 = 0
_HEADER = struct.Struct("<4sBBHI")


@dataclass
class ScurveConfig:
    n_samples: int = 10000
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")
        if self.n_samples < 2:
            raise DomainError("need at least two samples")


@dataclass
class NDiskConfig:
    """``n_disks`` is a positive int or the string ``"heterogeneous"``."""

    n_disks: object = 1
    n_samples: int = 10000
    image_size: int = IMAGE_SIZE
    seed: int = 0

    def __post_init__(self):
        if self.n_disks != "heterogeneous" and (not isinstance(self.n_disks, (int, np.integer)) or self.n_disks < 1):
            raise DomainError(f"n_disks must be >= 1 or 'heterogeneous', got {self.n_disks!r}")
        if self.image_size != IMAGE_SIZE:
            raise DomainError("the disk generator is defined for 32x32 images")
        if self.n_samples < 2:
            raise DomainError("need at least two samples")


@dataclass
class LinearGaussianConfig:
    rank: int = 2
    dim: int = 16
    n_samples: int = 10000
    noise_sigma: float = 0.01
    seed: int = 0


@dataclass
class DatasetBundle:
    """Train/validation arrays plus per-sample generator parameters.

    ``meta`` arrays are indexed by generation order; ``train_index`` and
    ``val_index`` give the rows of each split in that order.
    """

    name: str
    train: np.ndarray
    val: np.ndarray
    train_index: np.ndarray
    val_index: np.ndarray
    population_variance: float
    seed: int
    meta: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return len(self.train_index) + len(self.val_index)

    @property
    def sample_shape(self):
        return self.train.shape[1:]

    def val_meta(self, key):
        return self.meta[key][self.val_index]

    def train_meta(self, key):
        return self.meta[key][self.train_index]

    def fingerprint(self):
        h = hashlib.sha256()
        for arr in (self.train, self.val):
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def split_indices(seed, n_samples):
    """Deterministic 90/10 split, a pure function of ``(seed, n_samples)``."""
    rng = np.random.Generator(np.random.PCG64([int(seed), int(n_samples), 0x5117]))
    perm = rng.permutation(n_samples)
    n_train = int(round(TRAIN_FRACTION * n_samples))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def population_variance(train):
    """Pooled scalar variance: mean of the per-dimension variances (ddof=0)."""
    flat = np.asarray(train, dtype=np.float64).reshape(len(train), -1)
    return float(flat.var(axis=0).mean())


def _make_bundle(name, data, seed, meta, info):
    data = np.ascontiguousarray(data, dtype=np.float32)
    tr, va = split_indices(seed, len(data))
    train, val = data[tr], data[va]
    info = dict(info, prng=PRNG_NAME)
    return DatasetBundle(name, train, val, tr, va, population_variance(train), int(seed), meta, info)


def _rng(seed, stream):
    return np.random.Generator(np.random.PCG64([int(seed), stream]))


def sample_scurve(config=None, **kwargs):
    """Noisy S-curve: ``(sin t, u, sign(t)(cos t - 1)) + N(0, sigma^2 I)``.

    ``t ~ U(-3pi/2, 3pi/2)`` and ``u ~ U(0, 2)``, the same parametrisation as
    :func:`sklearn.datasets.make_s_curve`.
    """
    config = ScurveConfig(**kwargs) if config is None else config
    rng = _rng(config.seed, 1)
    n = config.n_samples
    t = 3.0 * np.pi * (rng.random(n) - 0.5)
    u = 2.0 * rng.random(n)
    points = np.stack([np.sin(t), u, np.sign(t) * (np.cos(t) - 1.0)], axis=1)
    points += config.noise_sigma * rng.standard_normal((n, 3))
    meta = {"t": t.astype(np.float32), "u": u.astype(np.float32)}
    info = {"experiment": "scurve", "noise_sigma": config.noise_sigma, "n_samples": n}
    return _make_bundle("scurve", points, config.seed, meta, info)


def render_disks(disks, size=IMAGE_SIZE):
    """Binary image of the union of disks given as rows ``(a, b, r)``.

    Pixel ``(j, k)`` (1-indexed; array element ``[j-1, k-1]``) is lit when
    ``r**2 >= (a - j + 0.5)**2 + (b - k + 0.5)**2`` for any disk.
    """
    disks = np.asarray(disks, dtype=np.float64).reshape(-1, 3)
    grid = np.arange(1, size + 1, dtype=np.float64)
    img = np.zeros((size, size), dtype=bool)
    for a, b, r in disks:
        dj = (a - grid + 0.5) ** 2
        dk = (b - grid + 0.5) ** 2
        img |= (dj[:, None] + dk[None, :]) <= r * r
    return img.astype(np.float32)[None]


def generate_ndisk_image(n, rng):
    """One n-Disk sample: returns ``(image[1, 32, 32], disks[n, 3])``.

    Each disk draws ``r ~ U(2, 5)`` then ``a, b ~ U(r, 32 - r)``.
    """
    if n < 1:
        raise DomainError(f"need at least one disk, got {n}")
    disks = np.empty((n, 3))
    for i in range(n):
        r = rng.uniform(2.0, 5.0)
        a = rng.uniform(r, IMAGE_SIZE - r)
        b = rng.uniform(r, IMAGE_SIZE - r)
        disks[i] = (a, b, r)
    return render_disks(disks), disks


def _disk_bundle(name, counts, seed, info):
    rng = _rng(seed, 2)
    n_max = int(max(counts))
    images = np.empty((len(counts), 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    params = np.full((len(counts), n_max, 3), np.nan, dtype=np.float32)
    for i, n in enumerate(counts):
        images[i], disks = generate_ndisk_image(int(n), rng)
        params[i, :n] = disks
    meta = {"n": np.asarray(counts, dtype=np.float32), "disks": params}
    return _make_bundle(name, images, seed, meta, info)


def build_ndisk(config=None, **kwargs):
    config = NDiskConfig(**kwargs) if config is None else config
    if config.n_disks == "heterogeneous":
        return build_heterogeneous(config)
    counts = np.full(config.n_samples, int(config.n_disks))
    info = {"experiment": "ndisk", "n_disks": int(config.n_disks), "n_samples": config.n_samples}
    return _disk_bundle(f"ndisk{config.n_disks}", counts, config.seed, info)


def build_heterogeneous(config=None, **kwargs):
    """n-Disk mix with per-sample ``n ~ U{1, 2, 3, 4}`` recorded in ``meta["n"]``.

    The nominal n is kept even when disks overlap completely.
    """
    config = NDiskConfig(n_disks="heterogeneous", **kwargs) if config is None else config
    counts = _rng(config.seed, 3).integers(1, 5, size=config.n_samples)
    info = {"experiment": "heterogeneous", "n_samples": config.n_samples}
    return _disk_bundle("heterogeneous", counts, config.seed, info)


def sample_linear_gaussian(config=None, **kwargs):
    """``x = A s + noise`` with ``s ~ N(0, I_rank)`` and a random ``A`` (dim x rank).

    ``A`` has orthonormal columns so every latent direction carries equal
    variance.
    """
    config = LinearGaussianConfig(**kwargs) if config is None else config
    if not 1 <= config.rank <= config.dim:
        raise DomainError("rank must lie in [1, dim]")
    rng = _rng(config.seed, 4)
    basis, _ = np.linalg.qr(rng.standard_normal((config.dim, config.rank)))
    s = rng.standard_normal((config.n_samples, config.rank))
    x = s @ basis.T + config.noise_sigma * rng.standard_normal((config.n_samples, config.dim))
    meta = {"s": s.astype(np.float32)}
    info = {"experiment": "linear_gaussian", "rank": config.rank, "dim": config.dim,
            "noise_sigma": config.noise_sigma, "n_samples": config.n_samples}
    return _make_bundle(f"lingauss{config.rank}", x, config.seed, meta, info)


# ---------------------------------------------------------------------------
# tensor container


def write_tensor_record(fh, array):
    arr = np.asarray(array)
    if arr.ndim == 0:
        raise FormatError("tensor files need at least one dimension")
    if any(d == 0 for d in arr.shape):
        raise FormatError(f"tensor files need positive dimensions, got {arr.shape}")
    fh.write(_HEADER.pack(_MAGIC, _VERSION, _DTYPE_F32, 0, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n, what):
    start = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, found {len(buf)}", start + len(buf))
    return buf


def read_tensor_record(fh):
    start = fh.tell()
    magic, version, dtype, reserved, ndim = _HEADER.unpack(_read_exact(fh, _HEADER.size, "header"))
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", start)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", start + 4)
    if dtype != _DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", start + 5)
    if reserved != 0:
        raise FormatError("reserved field is not zero", start + 6)
    if ndim == 0:
        raise FormatError("empty shape", start + 8)
    dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "shape"))
    if any(d == 0 for d in dims):
        raise FormatError(f"zero-length dimension in shape {dims}", start + _HEADER.size)
    count = math.prod(dims)
    payload = _read_exact(fh, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def write_tensor_file(path, tensor):
    """Write one tensor (array or :class:`iob.nn.Tensor`) to ``path``."""
    data = getattr(tensor, "data", tensor)
    buf = io.BytesIO()
    write_tensor_record(buf, data)
    Path(path).write_bytes(buf.getvalue())


def read_tensor_file(path):
    raw = Path(path).read_bytes()
    fh = io.BytesIO(raw)
    arr = read_tensor_record(fh)
    if fh.tell() != len(raw):
        raise FormatError("trailing bytes after payload", fh.tell())
    return arr


# ---------------------------------------------------------------------------
# images


def image_to_bytes(image):
    """Map values to bytes with ``round(255 * clamp(v, 0, 1))``, halves rounded up."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def export_pgm(path, image):
    """Write a ``[1, H, W]`` or ``[H, W]`` image as binary PGM (P5)."""
    img = np.asarray(getattr(image, "data", image))
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise DomainError(f"expected a single-channel image, got shape {img.shape}")
        img = img[0]
    if img.ndim != 2:
        raise DomainError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image_to_bytes(img).tobytes())


# ---------------------------------------------------------------------------
# bundle directories


def save_bundle(bundle, directory):
    """Write a bundle into ``directory`` as tensor files plus ``bundle.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor_file(d / "train.iobt", bundle.train)
    write_tensor_file(d / "val.iobt", bundle.val)
    write_tensor_file(d / "train_index.iobt", bundle.train_index.astype(np.float32))
    write_tensor_file(d / "val_index.iobt", bundle.val_index.astype(np.float32))
    for key, arr in sorted(bundle.meta.items()):
        write_tensor_file(d / f"meta_{key}.iobt", arr)
    lines = [
        f"name = {bundle.name}",
        f"seed = {bundle.seed}",
        f"population_variance = {bundle.population_variance!r}",
        f"fingerprint = {bundle.fingerprint()}",
        f"meta = {','.join(sorted(bundle.meta))}",
    ]
    lines += [f"info.{k} = {v}" for k, v in sorted(bundle.info.items())]
    (d / "bundle.txt").write_text("\n".join(lines) + "\n")
    return d


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_bundle(directory):
    d = Path(directory)
    if not (d / "bundle.txt").exists():
        raise FileNotFoundError(f"no dataset bundle at {d}")
    fields = {}
    for line in (d / "bundle.txt").read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    meta_keys = [k for k in fields.get("meta", "").split(",") if k]
    meta = {k: read_tensor_file(d / f"meta_{k}.iobt") for k in meta_keys}
    info = {k[5:]: _parse_value(v) for k, v in fields.items() if k.startswith("info.")}
    return DatasetBundle(
        name=fields["name"],
        train=read_tensor_file(d / "train.iobt"),
        val=read_tensor_file(d / "val.iobt"),
        train_index=read_tensor_file(d / "train_index.iobt").astype(np.int64),
        val_index=read_tensor_file(d / "val_index.iobt").astype(np.int64),
        population_variance=float(fields["population_variance"]),
        seed=int(fields["seed"]),
        meta=meta,
        info=info,
    )


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def directory_digest(directory):
    """SHA-256 over every file in ``directory`` (sorted by name)."""
    h = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        h.update(name.encode())
        h.update(Path(directory, name).read_bytes())
    return h.hexdigest()
