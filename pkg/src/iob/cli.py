"""``iob`` command: generate data, train, evaluate, estimate ID, interpolate, explore.

Options come from three layers, later ones winning: built-in defaults, an
INI file given with ``--config`` (one section per subcommand, keys spelled
like the long flags with underscores), and command-line flags.  Unknown
config keys are rejected.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
The environment variable ``IOB_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, baselines, datasets, intrinsic, training
from .bottleneck import IobConfig
from .errors import IOBError, NumericalError, UsageError

logger = logging.getLogger("iob")

EXPERIMENTS = ("scurve", "ndisk", "heterogeneous", "linear-gaussian")
MODELS = ("linear_iob", "geometric_iob", "separate", "pca")


def _int_list(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


def _flag(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


# name -> (type, default, help); None default means "not set"
OPTIONS = {
    "gen": {
        "experiment": (str, "scurve", f"one of {', '.join(EXPERIMENTS)}"),
        "n": (int, 10000, "number of samples before the 90/10 split"),
        "seed": (int, 0, "dataset seed"),
        "disks": (int, 1, "disks per image for --experiment ndisk"),
        "noise": (float, None, "noise standard deviation (S-curve 0.1, linear-Gaussian 0.01)"),
        "rank": (int, 2, "latent rank for --experiment linear-gaussian"),
        "dim": (int, 16, "ambient dimension for --experiment linear-gaussian"),
        "out": (str, None, "output directory"),
    },
    "train": {
        "data": (str, None, "dataset directory written by gen"),
        "model": (str, "linear_iob", f"one of {', '.join(MODELS)}"),
        "out": (str, None, "run directory"),
        "k_max": (int, None, "latent width (default: 4 for 3-D data, 16 for images)"),
        "k": (_int_list, None, "comma-separated widths for --model separate (default 0..k_max)"),
        "rate": (float, None, "geometric rate for --model geometric_iob (default 1/3 for images, 0.95 otherwise)"),
        "threshold": (float, 0.01, "unit-sweep convergence threshold"),
        "sweep_patience": (int, 10, "unit-sweep window in epochs"),
        "lr": (float, 5e-5, "Adam learning rate"),
        "batch_size": (int, 64, "minibatch size"),
        "min_improvement": (float, 1e-4, "early-stop relative improvement threshold"),
        "patience": (int, 20, "early-stop window in epochs"),
        "max_epochs": (int, None, "epoch cap (default 2000 dense, 500 conv)"),
        "seed": (int, 0, "initialization and shuffling seed"),
    },
    "eval": {
        "run": (str, None, "run directory (comma-separated for several)"),
        "data": (str, None, "dataset directory"),
        "out": (str, None, "CSV path (default <run>/eval.csv)"),
        "pca": (_flag, True, "include the PCA reference curve"),
    },
    "id": {
        "run": (str, None, "run directory"),
        "data": (str, None, "dataset directory"),
        "alpha": (float, 0.05, "test level"),
        "mode": (str, "total", "total or averaged log-likelihood statistic"),
        "full": (_flag, False, "fit every width instead of stopping at the first acceptance"),
        "out": (str, None, "CSV path (default <run>/id.csv)"),
    },
    "interp": {
        "run": (str, None, "run directory"),
        "data": (str, None, "dataset directory"),
        "a": (int, 0, "first validation sample"),
        "b": (int, 1, "second validation sample"),
        "steps": (int, 8, "number of frames"),
        "k": (int, None, "bottleneck width (default k_max)"),
        "out": (str, None, "PGM path (default <run>/interp.pgm)"),
    },
    "explore": {
        "run": (str, None, "run directory"),
        "data": (str, None, "dataset directory"),
        "exemplar_k": (int, 9, "width for the exemplar reconstructions"),
        "out": (str, None, "output directory (default <run>/explore)"),
    },
}

REQUIRED = {
    "gen": ("out",),
    "train": ("data", "out"),
    "eval": ("run", "data"),
    "id": ("run", "data"),
    "interp": ("run", "data"),
    "explore": ("run", "data"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="iob", description="Information-ordered bottleneck experiments.")
    parser.add_argument("--version", action="version", version=f"iob {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, help=f"{cmd} subcommand")
        p.add_argument("--config", help="INI file; section [%s]" % cmd)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        for name, (typ, default, text) in opts.items():
            flag = "--" + name.replace("_", "-")
            shown = f" (default {default})" if default is not None else ""
            p.add_argument(flag, dest=name, type=typ, default=None, help=text + shown)
    return parser


def read_config(path, command):
    """Typed options of ``[command]`` in an INI file; unknown keys raise."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    unknown_sections = [s for s in cp.sections() if s not in OPTIONS]
    if unknown_sections:
        raise UsageError(f"unknown config section(s): {', '.join(unknown_sections)}")
    if not cp.has_section(command):
        return {}
    opts = OPTIONS[command]
    out = {}
    for key, raw in cp.items(command):
        name = key.replace("-", "_")
        if name not in opts:
            raise UsageError(f"unknown key {key!r} in section [{command}] of {path}")
        try:
            out[name] = opts[name][0](raw)
        except ValueError:
            raise UsageError(f"bad value {raw!r} for {key!r} in {path}") from None
    return out


def resolve_options(command, args):
    opts = {name: spec[1] for name, spec in OPTIONS[command].items()}
    if args.config:
        opts.update(read_config(args.config, command))
    for name in OPTIONS[command]:
        value = getattr(args, name)
        if value is not None:
            opts[name] = value
    missing = [n for n in REQUIRED[command] if opts.get(n) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return opts


def write_command_manifest(directory, command, opts, argv, inputs=None, outputs=None):
    """Flat key = value record of a command invocation."""
    lines = [f"command = {command}", f"version = {__version__}", f"argv = {shlex.join(argv)}"]
    lines += [f"option.{k} = {json.dumps(v)}" for k, v in sorted(opts.items())]
    for key, path in sorted((inputs or {}).items()):
        p = Path(path)
        digest = datasets.directory_digest(p) if p.is_dir() else datasets.file_digest(p)
        lines.append(f"input.{key} = {p} sha256:{digest}")
    lines += [f"output.{k} = {v}" for k, v in sorted((outputs or {}).items())]
    lines.append(f"threads = {os.environ.get('IOB_THREADS', '')}")
    path = Path(directory) / f"manifest-{command}.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _refuse_existing(path, force):
    p = Path(path)
    if p.exists() and not force and (p.is_file() or any(p.iterdir())):
        raise UsageError(f"output {p} exists; pass --force to overwrite")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(opts, argv, force=False):
    exp = opts["experiment"]
    if exp not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {exp!r}; choose from {', '.join(EXPERIMENTS)}")
    out = Path(opts["out"])
    _refuse_existing(out, force)
    if exp == "scurve":
        noise = 0.1 if opts["noise"] is None else opts["noise"]
        bundle = datasets.sample_scurve(datasets.ScurveConfig(opts["n"], noise, opts["seed"]))
    elif exp == "ndisk":
        bundle = datasets.build_ndisk(datasets.NDiskConfig(opts["disks"], opts["n"], seed=opts["seed"]))
    elif exp == "heterogeneous":
        bundle = datasets.build_heterogeneous(datasets.NDiskConfig("heterogeneous", opts["n"], seed=opts["seed"]))
    else:
        noise = 0.01 if opts["noise"] is None else opts["noise"]
        bundle = datasets.sample_linear_gaussian(
            datasets.LinearGaussianConfig(opts["rank"], opts["dim"], opts["n"], noise, opts["seed"])
        )
    datasets.save_bundle(bundle, out)
    print(f"train {tuple(bundle.train.shape)} val {tuple(bundle.val.shape)} variance {bundle.population_variance:.6g}")
    write_command_manifest(out, "gen", opts, argv, outputs={"bundle": out, "fingerprint": bundle.fingerprint()})
    return 0


def default_spec(bundle, k_max=None):
    """Architecture preset matching the bundle's sample shape."""
    shape = tuple(bundle.sample_shape)
    if shape == (1, datasets.IMAGE_SIZE, datasets.IMAGE_SIZE):
        return training.ndisk_spec(16 if k_max is None else k_max)
    if len(shape) == 1:
        if shape[0] == 3:
            return training.scurve_spec(4 if k_max is None else k_max)
        p = shape[0]
        if bundle.info.get("experiment") == "linear_gaussian":
            return training.linear_spec(p, min(p, 8) if k_max is None else k_max)
        return training.dense_spec([p, 64, 64], p if k_max is None else k_max, name=f"dense{p}")
    raise UsageError(f"no architecture preset for samples of shape {shape}")


def _epoch_printer(epoch, train_loss, val_loss):
    print(f"epoch {epoch} train {train_loss:.6g} val {val_loss:.6g}", flush=True)


def cmd_train(opts, argv, force=False):
    model_kind = opts["model"]
    if model_kind not in MODELS:
        raise UsageError(f"unknown model {model_kind!r}; choose from {', '.join(MODELS)}")
    data_dir = Path(opts["data"])
    bundle = datasets.load_bundle(data_dir)
    out = Path(opts["out"])
    _refuse_existing(out, force)
    out.mkdir(parents=True, exist_ok=True)
    spec = default_spec(bundle, opts["k_max"])
    max_epochs = opts["max_epochs"] or (500 if spec.kind == "conv" else 2000)
    cfg = training.TrainConfig(
        lr=opts["lr"], batch_size=opts["batch_size"], min_improvement=opts["min_improvement"],
        patience=opts["patience"], max_epochs=max_epochs, seed=opts["seed"],
    )
    outputs = {}
    status = 0
    try:
        if model_kind == "pca":
            pca = baselines.pca_fit(bundle.train)
            save_pca(out / "pca", pca)
            outputs["pca"] = out / "pca"
        elif model_kind == "separate":
            ks = opts["k"] if opts["k"] is not None else list(range(spec.k_max + 1))
            if any(not 0 <= k for k in ks):
                raise UsageError("separate widths must be >= 0")
            sep = out / "separate"
            sep.mkdir(exist_ok=True)
            for k in ks:
                print(f"training fixed-width autoencoder k={k}", flush=True)
                m, man = training.train_autoencoder(spec.with_bottleneck(k), bundle, cfg, callback=_epoch_printer)
                man.param_path = str(training.save_model(sep / f"k{k}.iobn", m))
                man.write(sep / f"k{k}.manifest.txt")
                outputs[f"k{k}"] = man.param_path
        else:
            if model_kind == "linear_iob":
                iob_cfg = IobConfig.linear(spec.k_max)
            else:
                rate = opts["rate"] or (1.0 / 3.0 if spec.kind == "conv" else 0.95)
                iob_cfg = IobConfig.geometric(spec.k_max, rate, convergence_threshold=opts["threshold"],
                                              patience_epochs=opts["sweep_patience"])
            m, man = training.train_iob(spec, iob_cfg, bundle, cfg, callback=_epoch_printer)
            for event in man.events:
                print(event)
            man.param_path = str(training.save_model(out / "model.iobn", m))
            man.write(out / "manifest.txt")
            outputs["model"] = man.param_path
    except training.TrainingDiverged as exc:
        exc.manifest.write(out / "manifest.txt")
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    (out / "run.json").write_text(json.dumps({"model": model_kind, "data": str(data_dir), "spec": spec.to_dict()}))
    write_command_manifest(out, "train", opts, argv, inputs={"data": data_dir}, outputs=outputs)
    return status


def save_pca(directory, model):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    datasets.write_tensor_file(d / "mean.iobt", model.mean.astype(np.float32))
    datasets.write_tensor_file(d / "components.iobt", model.components.astype(np.float32))
    datasets.write_tensor_file(d / "eigenvalues.iobt", model.eigenvalues.astype(np.float32))


def load_pca(directory):
    d = Path(directory)
    if not (d / "components.iobt").exists():
        raise FileNotFoundError(f"no PCA model at {d}")
    read = lambda name: datasets.read_tensor_file(d / name).astype(np.float64)  # noqa: E731
    return baselines.PcaModel(read("mean.iobt"), read("components.iobt"), read("eigenvalues.iobt"))


def load_run(run_dir):
    """``(kind, model)`` for a run directory written by ``train``."""
    run = Path(run_dir)
    meta_path = run / "run.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no training run at {run} (missing {meta_path})")
    kind = json.loads(meta_path.read_text())["model"]
    if kind == "pca":
        return kind, load_pca(run / "pca")
    if kind == "separate":
        files = sorted((run / "separate").glob("k*.iobn"), key=lambda p: int(p.stem[1:]))
        if not files:
            raise FileNotFoundError(f"no separate models under {run / 'separate'}")
        return kind, {int(p.stem[1:]): training.load_model(p) for p in files}
    path = run / "model.iobn"
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    return kind, training.load_model(path)


def _iob_model(run_dir, command):
    kind, model = load_run(run_dir)
    if kind not in ("linear_iob", "geometric_iob"):
        raise UsageError(f"{command} needs an IOB run, got a {kind} run at {run_dir}")
    return model


def cmd_eval(opts, argv, force=False):
    runs = [r for r in opts["run"].split(",") if r]
    bundle = datasets.load_bundle(opts["data"])
    models = {}
    for r in runs:
        kind, model = load_run(r)
        name = kind if kind not in models else f"{kind}:{Path(r).name}"
        models[name] = model
    if opts["pca"] and "pca" not in models:
        models["pca"] = baselines.pca_fit(bundle.train)
    ks = None
    widths = [m.k_max for m in models.values() if isinstance(m, training.Autoencoder)]
    widths += [max(m) for m in models.values() if isinstance(m, dict)]
    if widths:
        ks = range(max(widths) + 1)
    table = analysis.compression_comparison(models, bundle, ks)
    out = Path(opts["out"] or Path(runs[0]) / "eval.csv")
    _refuse_existing(out, force)
    table.write(out)
    sys.stdout.write(table.to_csv())
    write_command_manifest(out.parent, "eval", opts, argv, inputs={"data": opts["data"]}, outputs={"table": out})
    return 0


def cmd_id(opts, argv, force=False):
    model = _iob_model(opts["run"], "id")
    bundle = datasets.load_bundle(opts["data"])
    out = Path(opts["out"] or Path(opts["run"]) / "id.csv")
    _refuse_existing(out, force)
    report = intrinsic.estimate_id(model, bundle, alpha=opts["alpha"], mode=opts["mode"], full=opts["full"])
    out.write_text(report.to_csv())
    print(report.summary())
    write_command_manifest(out.parent, "id", opts, argv, inputs={"data": opts["data"]},
                           outputs={"report": out, "k_hat": report.k_hat})
    return 0


def cmd_interp(opts, argv, force=False):
    model = _iob_model(opts["run"], "interp")
    bundle = datasets.load_bundle(opts["data"])
    out = Path(opts["out"] or Path(opts["run"]) / "interp.pgm")
    _refuse_existing(out, force)
    spec = analysis.InterpolationSpec(opts["a"], opts["b"], opts["steps"], opts["k"])
    result = analysis.interpolate_latents(model, bundle.val, spec, path=out)
    print(f"wrote {len(result.images)} frames to {out}")
    write_command_manifest(out.parent, "interp", opts, argv, inputs={"data": opts["data"]}, outputs={"strip": out})
    return 0


def cmd_explore(opts, argv, force=False):
    bundle = datasets.load_bundle(opts["data"])
    if "n" not in bundle.meta:
        raise UsageError(f"explore needs a heterogeneous bundle; {opts['data']} is {bundle.name!r}")
    model = _iob_model(opts["run"], "explore")
    out = Path(opts["out"] or Path(opts["run"]) / "explore")
    _refuse_existing(out, force)
    report = analysis.heterogeneous_report(model, bundle, exemplar_k=opts["exemplar_k"], out_dir=out)
    sys.stdout.write(report.table.to_csv())
    write_command_manifest(out, "explore", opts, argv, inputs={"data": opts["data"]}, outputs={"directory": out})
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "id": cmd_id,
    "interp": cmd_interp,
    "explore": cmd_explore,
}


def _thread_limit():
    raw = os.environ.get("IOB_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"IOB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"IOB_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.command is None:
            raise UsageError("no command given; see iob --help")
        opts = resolve_options(args.command, args)
        threads = _thread_limit()
        if threads is None:
            return COMMANDS[args.command](opts, argv, args.force)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](opts, argv, args.force)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IOBError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
