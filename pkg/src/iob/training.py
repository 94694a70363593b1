"""Autoencoder construction, training loops, evaluation and run manifests."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .bottleneck import (
    IobConfig,
    composite_loss_exact,
    composite_loss_stochastic,
    mask_vector,
    relative_improvement,
    sweep_advance,
    weight_profile,
)
from .datasets import PRNG_NAME, read_tensor_record, write_tensor_record
from .errors import DimensionError, DomainError, FormatError, NumericalError

logger = logging.getLogger(__name__)

__all__ = [
    "LayerSpec",
    "AutoencoderSpec",
    "Autoencoder",
    "TrainConfig",
    "RunManifest",
    "TrainingDiverged",
    "scurve_spec",
    "ndisk_spec",
    "dense_spec",
    "build_autoencoder",
    "train_iob",
    "train_autoencoder",
    "train_separate_autoencoders",
    "evaluate_mse_curve",
    "per_sample_nmse",
    "nearest_rank_percentile",
    "early_stop_triggered",
    "save_model",
    "load_model",
    "config_hash",
]


# ---------------------------------------------------------------------------
# architecture


@dataclass(frozen=True)
class LayerSpec:
    """One layer: ``kind`` in {dense, conv, convT, flatten, unflatten}.

    dense: ``(in, out)``; conv/convT: ``(in_ch, out_ch, kernel, stride, padding)``;
    unflatten: the target shape.
    """

    kind: str
    args: tuple = ()
    activation: str = "relu"


@dataclass(frozen=True)
class AutoencoderSpec:
    kind: str
    encoder: tuple
    decoder: tuple
    k_max: int
    name: str = "custom"

    def __post_init__(self):
        last = self.encoder[-1]
        first = self.decoder[0]
        if last.kind != "dense" or last.args[1] != self.k_max:
            raise DimensionError(f"encoder must end in a dense layer of width k_max={self.k_max}")
        if first.kind != "dense" or first.args[0] != self.k_max:
            raise DimensionError(f"decoder must start with a dense layer of width k_max={self.k_max}")

    def with_bottleneck(self, width):
        """Same architecture with a fixed ``width``-unit bottleneck."""
        enc = list(self.encoder)
        dec = list(self.decoder)
        enc[-1] = LayerSpec("dense", (enc[-1].args[0], width), enc[-1].activation)
        dec[0] = LayerSpec("dense", (width, dec[0].args[1]), dec[0].activation)
        return AutoencoderSpec(self.kind, tuple(enc), tuple(dec), width, f"{self.name}-w{width}")

    def to_dict(self):
        return {
            "kind": self.kind,
            "k_max": self.k_max,
            "name": self.name,
            "encoder": [[l.kind, list(l.args), l.activation] for l in self.encoder],
            "decoder": [[l.kind, list(l.args), l.activation] for l in self.decoder],
        }

    @classmethod
    def from_dict(cls, d):
        def layers(items):
            return tuple(LayerSpec(k, tuple(a), act) for k, a, act in items)

        return cls(d["kind"], layers(d["encoder"]), layers(d["decoder"]), int(d["k_max"]), d.get("name", "custom"))


def dense_spec(widths, k_max, name="dense"):
    """Mirrored fully connected autoencoder ``widths[0] - ... - k_max``.

    ReLU on hidden layers; identity on the bottleneck and the reconstruction.
    """
    sizes = list(widths) + [k_max]
    enc = tuple(
        LayerSpec("dense", (a, b), "identity" if i == len(sizes) - 2 else "relu")
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
    )
    rev = sizes[::-1]
    dec = tuple(
        LayerSpec("dense", (a, b), "identity" if i == len(rev) - 2 else "relu")
        for i, (a, b) in enumerate(zip(rev[:-1], rev[1:]))
    )
    return AutoencoderSpec("dense", enc, dec, k_max, name)


def scurve_spec(k_max=4):
    return dense_spec([3, 64, 64], k_max, name="scurve")


def linear_spec(dim, k_max=8):
    """Single linear map each way; the natural model for a linear-Gaussian cloud."""
    return dense_spec([dim], k_max, name="linear")


def ndisk_spec(k_max=16, filters=(4, 12, 24), dense_widths=(256, 128)):
    """Conv encoder 1->4->12->24 (4x4, stride 2, pad 1) + dense 256-128-k_max.

    The decoder mirrors it with transposed convolutions, 4x4 -> 32x32.
    """
    chans = (1,) + tuple(filters)
    enc = [LayerSpec("conv", (a, b, 4, 2, 1), "relu") for a, b in zip(chans[:-1], chans[1:])]
    enc.append(LayerSpec("flatten"))
    flat = chans[-1] * 4 * 4
    widths = (flat,) + tuple(dense_widths) + (k_max,)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        enc.append(LayerSpec("dense", (a, b), "identity" if i == len(widths) - 2 else "relu"))
    rw = widths[::-1]
    dec = [LayerSpec("dense", (a, b), "relu") for a, b in zip(rw[:-1], rw[1:])]
    dec.append(LayerSpec("unflatten", (chans[-1], 4, 4)))
    rc = chans[::-1]
    for i, (a, b) in enumerate(zip(rc[:-1], rc[1:])):
        dec.append(LayerSpec("convT", (a, b, 4, 2, 1), "identity" if i == len(rc) - 2 else "relu"))
    return AutoencoderSpec("conv", tuple(enc), tuple(dec), k_max, "ndisk")


def _build_layers(specs, rng, prefix):
    layers = []
    for i, s in enumerate(specs):
        name = f"{prefix}{i}"
        if s.kind == "dense":
            layers.append(nn.DenseLayer(*s.args, activation=s.activation, rng=rng, name=name))
        elif s.kind == "conv":
            c_in, c_out, k, st, p = s.args
            layers.append(nn.Conv2dLayer(c_in, c_out, k, st, p, activation=s.activation, rng=rng, name=name))
        elif s.kind == "convT":
            c_in, c_out, k, st, p = s.args
            layers.append(nn.ConvTranspose2dLayer(c_in, c_out, k, st, p, activation=s.activation, rng=rng, name=name))
        elif s.kind == "flatten":
            layers.append(nn.Flatten())
        elif s.kind == "unflatten":
            layers.append(nn.Unflatten(s.args))
        else:
            raise DomainError(f"unknown layer kind {s.kind!r}")
    return nn.Sequential(layers)


class Autoencoder:
    """Encoder/decoder pair; the latent has ``spec.k_max`` units."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        rng = np.random.Generator(np.random.PCG64([int(seed), 11]))
        self.encoder = _build_layers(spec.encoder, rng, "encoder.")
        self.decoder = _build_layers(spec.decoder, rng, "decoder.")

    @property
    def k_max(self):
        return self.spec.k_max

    @property
    def bottleneck_layer(self):
        return self.encoder.layers[-1]

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def named_params(self):
        out = self.encoder.named_params("encoder.")
        out.update(self.decoder.named_params("decoder."))
        return out

    def get_state(self):
        return {k: p.data.copy() for k, p in self.named_params().items()}

    def set_state(self, state):
        for k, p in self.named_params().items():
            if k not in state:
                if p.data.size == 0:  # width-0 layers are not stored
                    continue
                raise FormatError(f"missing parameter {k!r}")
            if state[k].shape != p.data.shape:
                raise DimensionError(f"parameter {k!r}: stored {state[k].shape}, model {p.data.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def encode(self, x, chunk=2048):
        x = np.asarray(x, dtype=np.float32)
        return np.concatenate([self.encoder(x[i : i + chunk]).data for i in range(0, len(x), chunk)])

    def decode(self, z, chunk=2048):
        z = np.asarray(z, dtype=np.float32)
        return np.concatenate([self.decoder(z[i : i + chunk]).data for i in range(0, len(z), chunk)])

    def reconstruct(self, x, k=None):
        """Decode ``x`` with the latent truncated to its first ``k`` units."""
        z = self.encode(x)
        if k is not None:
            z = z * mask_vector(k, self.k_max).values
        return self.decode(z)


def build_autoencoder(spec, seed=0):
    return Autoencoder(spec, seed)


# ---------------------------------------------------------------------------
# configuration and manifests


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 64
    min_improvement: float = 1e-4
    patience: int = 20
    max_epochs: int = 2000
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise DomainError("lr, batch_size and max_epochs must be positive")
        if self.patience < 1 or self.min_improvement < 0:
            raise DomainError("early-stop window must be >= 1 and threshold >= 0")


def _jsonable(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_hash(*parts):
    blob = json.dumps([_jsonable(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    """Flat record of one training run; ``to_text`` is a key = value file."""

    config_hash: str
    seed: int
    prng: str
    dataset_fingerprint: str
    model: str
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    events: list = field(default_factory=list)
    wall_clock: float = 0.0
    param_path: str = ""
    status: str = "running"
    extra: dict = field(default_factory=dict)

    def log_epoch(self, train_loss, val_loss):
        self.train_losses.append(float(train_loss))
        self.val_losses.append(float(val_loss))

    def to_text(self, include_wall_clock=True):
        lines = [
            f"config_hash = {self.config_hash}",
            f"seed = {self.seed}",
            f"prng = {self.prng}",
            f"dataset_fingerprint = {self.dataset_fingerprint}",
            f"model = {self.model}",
            f"status = {self.status}",
            f"epochs = {len(self.val_losses)}",
            f"param_path = {self.param_path}",
        ]
        lines += [f"extra.{k} = {v}" for k, v in sorted(self.extra.items())]
        lines += [f"event.{i:04d} = {e}" for i, e in enumerate(self.events)]
        for i, (tr, va) in enumerate(zip(self.train_losses, self.val_losses)):
            lines.append(f"epoch.{i + 1:04d}.train = {tr!r}")
            lines.append(f"epoch.{i + 1:04d}.val = {va!r}")
        if include_wall_clock:
            lines.append(f"wall_clock_seconds = {self.wall_clock:.3f}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text())


class TrainingDiverged(NumericalError):
    def __init__(self, message, manifest):
        super().__init__(message)
        self.manifest = manifest


def early_stop_triggered(history, min_improvement, patience):
    """True when the best loss improved by less than ``min_improvement`` over ``patience`` epochs."""
    gain = relative_improvement(list(history), patience)
    return gain is not None and gain < min_improvement


# ---------------------------------------------------------------------------
# evaluation


def nearest_rank_percentile(values, q):
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise DomainError("percentile of an empty sample")
    rank = max(1, int(math.ceil(q / 100.0 * v.size)))
    return float(v[min(rank, v.size) - 1])


def per_sample_nmse(model, data, k, variance, width=None):
    """Per-sample mean squared error at width ``k`` divided by ``variance``.

    ``model`` is an :class:`Autoencoder`; a separately trained fixed-width
    model is evaluated unmasked (pass ``width`` equal to its bottleneck).
    """
    data = np.asarray(data, dtype=np.float32)
    if width is not None:
        recon = model.reconstruct(data)
    else:
        recon = model.reconstruct(data, k)
    diff = (recon - data).reshape(len(data), -1).astype(np.float64)
    return np.mean(diff * diff, axis=1) / variance


def evaluate_mse_curve(model, bundle, ks=None, split="val"):
    """Rows ``(k, mean, p16, p84)`` of per-sample normalized MSE.

    ``model`` is an :class:`Autoencoder` (masked at each k) or a dict
    ``{k: Autoencoder}`` of fixed-width models.
    """
    data = bundle.val if split == "val" else bundle.train
    var = bundle.population_variance
    if isinstance(model, dict):
        ks = sorted(model) if ks is None else ks
        scores = {k: per_sample_nmse(model[k], data, k, var, width=k) for k in ks if k in model}
    else:
        ks = range(model.k_max + 1) if ks is None else ks
        scores = {k: per_sample_nmse(model, data, k, var) for k in ks}
    return [
        (k, float(s.mean()), nearest_rank_percentile(s, 16), nearest_rank_percentile(s, 84))
        for k, s in scores.items()
    ]


# ---------------------------------------------------------------------------
# training loops


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _exact_loss_value(model, data, k_max, rho, variance, chunk=512):
    total = 0.0
    for i in range(0, len(data), chunk):
        xb = data[i : i + chunk]
        total += composite_loss_exact(model.encoder, model.decoder, xb, k_max, rho, variance).item() * len(xb)
    return total / len(data)


def _width_loss_value(model, data, k, variance, chunk=1024):
    total = 0.0
    values = None if k is None else mask_vector(k, model.k_max).values
    for i in range(0, len(data), chunk):
        xb = data[i : i + chunk]
        z = model.encoder(xb).data
        if values is not None:
            z = z * values
        total += nn.gaussian_nll(model.decoder(z), xb, variance).item() * len(xb)
    return total / len(data)


def _check_finite(value, manifest, epoch):
    if not math.isfinite(value):
        manifest.status = "diverged"
        manifest.events.append(f"diverged at epoch {epoch}")
        raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", manifest)


def _new_manifest(label, parts, bundle, seed):
    return RunManifest(
        config_hash=config_hash(*parts),
        seed=seed,
        prng=PRNG_NAME,
        dataset_fingerprint=bundle.fingerprint(),
        model=label,
    )


def train_iob(spec, iob_config, bundle, train_config=None, callback=None):
    """Train an IOB autoencoder; returns ``(Autoencoder, RunManifest)``.

    Linear scheme: exact composite loss every step, early stopping on the
    composite validation loss, best-validation parameters restored.
    Geometric scheme: one sampled width per batch with unit sweeping until
    every unit is frozen and a final convergence window has passed.
    """
    cfg = train_config or TrainConfig()
    if spec.k_max != iob_config.k_max:
        raise DimensionError(f"architecture k_max={spec.k_max} but IOB k_max={iob_config.k_max}")
    if tuple(bundle.sample_shape) != _input_shape(spec):
        raise DimensionError(f"dataset samples {bundle.sample_shape} do not fit architecture input {_input_shape(spec)}")
    start = time.perf_counter()
    model = build_autoencoder(spec, cfg.seed)
    params = model.params()
    adam = nn.AdamState(lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 13]))
    var = bundle.population_variance
    k_max = spec.k_max
    rho = weight_profile(iob_config).rho
    label = f"{iob_config.scheme}_iob"
    manifest = _new_manifest(label, (spec, iob_config, cfg), bundle, cfg.seed)
    sweep = copy.deepcopy(iob_config.sweep) if iob_config.scheme == "geometric" else None
    train = bundle.train
    best_val, best_state = math.inf, None

    for epoch in range(1, cfg.max_epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            xb = train[idx]
            with nn.Tape() as tape:
                if sweep is None:
                    loss = composite_loss_exact(model.encoder, model.decoder, xb, k_max, rho, var)
                else:
                    loss, _ = composite_loss_stochastic(model.encoder, model.decoder, xb, iob_config, sweep, var, rng)
            nn.backward(tape, loss)
            nn.adam_step(adam, params)
            nn.zero_grad(params)
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        _check_finite(train_loss, manifest, epoch)

        if sweep is None:
            val_loss = _exact_loss_value(model, bundle.val, k_max, rho, var)
            _check_finite(val_loss, manifest, epoch)
            manifest.log_epoch(train_loss, val_loss)
            if val_loss < best_val:
                best_val, best_state = val_loss, model.get_state()
            logger.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
            if callback:
                callback(epoch, train_loss, val_loss)
            if early_stop_triggered(manifest.val_losses, cfg.min_improvement, cfg.patience):
                manifest.events.append(f"early stop at epoch {epoch}")
                break
        else:
            width = min(sweep.frozen + 1, k_max)
            val_loss = _width_loss_value(model, bundle.val, width, var)
            _check_finite(val_loss, manifest, epoch)
            manifest.log_epoch(train_loss, val_loss)
            sweep.history.append(val_loss)
            logger.info("epoch %d train %.6g val@%d %.6g", epoch, train_loss, width, val_loss)
            if callback:
                callback(epoch, train_loss, val_loss)
            unit = sweep.frozen
            if sweep_advance(sweep, layer=model.bottleneck_layer, k_max=k_max):
                msg = f"sweep advance at epoch {epoch}: unit {unit} frozen" if unit < k_max else (
                    f"final convergence window closed at epoch {epoch}")
                manifest.events.append(msg)
                logger.info(msg)
                if sweep.frozen > k_max:
                    break
    else:
        manifest.events.append(f"max_epochs={cfg.max_epochs} reached")

    if best_state is not None:
        model.set_state(best_state)
    manifest.status = "converged"
    manifest.wall_clock = time.perf_counter() - start
    if sweep is not None:
        manifest.extra["frozen_units"] = min(sweep.frozen, k_max)
    return model, manifest


def _input_shape(spec):
    first = spec.encoder[0]
    if first.kind == "dense":
        return (first.args[0],)
    return (first.args[0], 32, 32)


def train_autoencoder(spec, bundle, train_config=None, callback=None):
    """Plain reconstruction training of a fixed-width autoencoder."""
    cfg = train_config or TrainConfig()
    if tuple(bundle.sample_shape) != _input_shape(spec):
        raise DimensionError(f"dataset samples {bundle.sample_shape} do not fit architecture input {_input_shape(spec)}")
    start = time.perf_counter()
    model = build_autoencoder(spec, cfg.seed)
    params = model.params()
    adam = nn.AdamState(lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 17]))
    var = bundle.population_variance
    manifest = _new_manifest(f"separate_w{spec.k_max}", (spec, cfg), bundle, cfg.seed)
    best_val, best_state = math.inf, None
    train = bundle.train
    for epoch in range(1, cfg.max_epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            xb = train[idx]
            with nn.Tape() as tape:
                loss = nn.gaussian_nll(model.decoder(model.encoder(xb)), xb, var)
            nn.backward(tape, loss)
            nn.adam_step(adam, params)
            nn.zero_grad(params)
            total += loss.item() * len(idx)
            count += len(idx)
        train_loss = total / count
        _check_finite(train_loss, manifest, epoch)
        val_loss = _width_loss_value(model, bundle.val, None, var)
        _check_finite(val_loss, manifest, epoch)
        manifest.log_epoch(train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_state = val_loss, model.get_state()
        if callback:
            callback(epoch, train_loss, val_loss)
        if early_stop_triggered(manifest.val_losses, cfg.min_improvement, cfg.patience):
            manifest.events.append(f"early stop at epoch {epoch}")
            break
    else:
        manifest.events.append(f"max_epochs={cfg.max_epochs} reached")
    if best_state is not None:
        model.set_state(best_state)
    manifest.status = "converged"
    manifest.wall_clock = time.perf_counter() - start
    return model, manifest


def train_separate_autoencoders(spec, bundle, train_config=None, ks=None):
    """One fixed-width autoencoder per bottleneck width; returns ``{k: (model, manifest)}``."""
    ks = range(spec.k_max + 1) if ks is None else ks
    return {int(k): train_autoencoder(spec.with_bottleneck(int(k)), bundle, train_config) for k in ks}


# ---------------------------------------------------------------------------
# parameter files

_NAMES_MAGIC = b"IOBN"


def save_model(path, model):
    """Write parameters: ``b"IOBN" | u32 count | (u16 len, utf-8 name)*`` then one IOBT record each.

    The architecture goes to ``<path>.json`` next to it.  Empty parameters
    (a zero-width bottleneck) are left out.
    """
    named = {k: p for k, p in model.named_params().items() if p.data.size}
    buf = io.BytesIO()
    buf.write(_NAMES_MAGIC + struct.pack("<I", len(named)))
    for name in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
    for p in named.values():
        write_tensor_record(buf, p.data)
    path = Path(path)
    path.write_bytes(buf.getvalue())
    Path(str(path) + ".json").write_text(json.dumps(model.spec.to_dict(), indent=1))
    return path


def read_param_file(path):
    raw = Path(path).read_bytes()
    fh = io.BytesIO(raw)
    if fh.read(4) != _NAMES_MAGIC:
        raise FormatError("not a parameter file", 0)
    head = fh.read(4)
    if len(head) != 4:
        raise FormatError("truncated name table", 4)
    (count,) = struct.unpack("<I", head)
    names = []
    for _ in range(count):
        at = fh.tell()
        lb = fh.read(2)
        if len(lb) != 2:
            raise FormatError("truncated name table", at)
        (n,) = struct.unpack("<H", lb)
        name = fh.read(n)
        if len(name) != n:
            raise FormatError("truncated name table", at + 2)
        names.append(name.decode("utf-8"))
    return {name: read_tensor_record(fh) for name in names}


def load_model(path, spec=None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    if spec is None:
        spec = AutoencoderSpec.from_dict(json.loads(Path(str(path) + ".json").read_text()))
    model = build_autoencoder(spec)
    model.set_state(read_param_file(path))
    return model
