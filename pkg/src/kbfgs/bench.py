"""Experiment runner: config parsing, training loop, CSV logging, grid search.

Configs are INI files with the sections ``[dataset]``, ``[model]``,
``[optimizer]``, ``[run]`` and optionally ``[grid]``::

    [dataset]
    kind = synthetic          ; synthetic | idx | csv
    synthetic_kind = binary
    n = 1000
    dim = 16

    [model]
    preset = tiny-ae

    [optimizer]
    kind = kbfgs              ; kbfgs | kbfgs-l | kbfgs-skip | kfac | adam | rmsprop | sgdm
    alpha = 0.3
    lambda = 0.3

    [run]
    epochs = 20
    batch_size = 1000
    seed = 0
    out = runs/tiny

    [grid]
    alpha = 0.1, 0.3
    damping = 0.1, 0.3
"""

import configparser
import csv
import dataclasses
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data as data_io
from .errors import ConfigError, NotPositiveDefiniteError, NumericalDivergenceError
from .mlp import DataBatch, init_weights, layer_specs, loss_only, predict
from .optimizers import KBFGS, KFAC, FirstOrder, FirstOrderConfig, KbfgsConfig, KfacConfig

log = logging.getLogger(__name__)

PRESETS = {
    "mnist-ae": (
        [784, 1000, 500, 250, 30, 250, 500, 1000, 784],
        ["relu", "relu", "relu", "linear", "relu", "relu", "relu", "sigmoid"],
        "binary_entropy",
    ),
    "faces-ae": (
        [625, 2000, 1000, 500, 30, 500, 1000, 2000, 625],
        ["relu", "relu", "relu", "linear", "relu", "relu", "relu", "linear"],
        "mse",
    ),
    "curves-ae": (
        [784, 400, 200, 100, 50, 25, 6, 25, 50, 100, 200, 400, 784],
        ["relu"] * 5 + ["linear"] + ["relu"] * 5 + ["sigmoid"],
        "binary_entropy",
    ),
    "tiny-ae": (
        [16, 8, 4, 8, 16],
        ["relu", "linear", "relu", "sigmoid"],
        "binary_entropy",
    ),
}

# best (alpha, damping) for MNIST with m=1000
PAPER_DEFAULTS = {
    "kbfgs": {"alpha": 0.3, "lambda": 0.3},
    "kbfgs-l": {"alpha": 0.3, "lambda": 0.3},
    "kbfgs-skip": {"alpha": 0.3, "lambda": 0.3},
    "kfac": {"alpha": 1.0, "lambda": 3.0},
    "adam": {"alpha": 1e-4, "eps": 1e-4},
    "rmsprop": {"alpha": 1e-4, "eps": 1e-4},
    "sgdm": {"alpha": 0.03},
}
OPTIMIZERS = tuple(PAPER_DEFAULTS)

_KEYS = {
    "dataset": {"kind", "path", "targets_path", "labels_path", "test_path", "test_targets_path",
                "synthetic_kind", "n", "n_test", "dim", "limit", "autoencoder"},
    "model": {"preset", "widths", "activations", "loss", "l2"},
    "optimizer": {"kind", "alpha", "lambda", "eps", "beta", "beta1", "beta2", "mu1", "p", "t",
                  "lr_decay_exponent", "double_grad", "exact_a_inversion"},
    "run": {"epochs", "batch_size", "seed", "out", "warm_batches", "workers"},
    "grid": {"alpha", "damping"},
}


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    path: Optional[str] = None
    targets_path: Optional[str] = None
    labels_path: Optional[str] = None
    test_path: Optional[str] = None
    test_targets_path: Optional[str] = None
    synthetic_kind: str = "binary"
    n: int = 1000
    n_test: int = 0
    dim: int = 16
    limit: Optional[int] = None
    autoencoder: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    widths: List[int] = field(default_factory=lambda: list(PRESETS["tiny-ae"][0]))
    activations: List[str] = field(default_factory=lambda: list(PRESETS["tiny-ae"][1]))
    loss: str = "binary_entropy"
    l2: float = 1e-5
    optimizer: str = "kbfgs"
    opt_params: dict = field(default_factory=dict)
    epochs: int = 20
    batch_size: int = 1000
    seed: int = 0
    out_dir: str = "runs"
    warm_batches: Optional[int] = None
    workers: int = 1
    grid_alpha: List[float] = field(default_factory=list)
    grid_damping: List[float] = field(default_factory=list)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_error: float
    wall_seconds: float
    dd_fraction: List[float]
    skips: int
    diverged: bool = False


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    initial_loss: float
    records: List[EpochRecord]
    csv_path: Path
    diverged: bool = False
    dd_fraction_total: List[float] = field(default_factory=list)
    error: str = ""

    @property
    def final_loss(self):
        return self.records[-1].train_loss if self.records else self.initial_loss


def _floats(text):
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _num(section, key, text, cast=float):
    try:
        return cast(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from None


def config_from_mapping(sections):
    """Build and validate an :class:`ExperimentConfig` from nested dicts of strings."""
    for sec, keys in sections.items():
        if sec not in _KEYS:
            raise ConfigError(f"unknown section [{sec}]")
        for key in keys:
            if key not in _KEYS[sec]:
                raise ConfigError(f"unknown key '{key}' in [{sec}]")
    cfg = ExperimentConfig()

    ds = sections.get("dataset", {})
    spec = DatasetSpec()
    for key, text in ds.items():
        if key in ("n", "n_test", "dim", "limit"):
            setattr(spec, key, _num("dataset", key, text, int))
        elif key == "autoencoder":
            spec.autoencoder = _bool(text)
        else:
            setattr(spec, key, text.strip())
    if spec.kind not in ("synthetic", "idx", "csv"):
        raise ConfigError(f"[dataset] kind: unknown dataset kind {spec.kind!r}")
    if spec.kind in ("idx", "csv") and not spec.path:
        raise ConfigError("[dataset] path is required for idx/csv datasets")
    if spec.n < 1 or spec.dim < 1 or spec.n_test < 0:
        raise ConfigError("[dataset] n and dim must be >= 1, n_test >= 0")
    cfg.dataset = spec

    md = sections.get("model", {})
    if "preset" in md:
        name = md["preset"].strip()
        if name not in PRESETS:
            raise ConfigError(f"[model] preset: unknown preset {name!r}")
        widths, acts, loss = PRESETS[name]
        cfg.widths, cfg.activations, cfg.loss = list(widths), list(acts), loss
    if "widths" in md:
        cfg.widths = [_num("model", "widths", w, int) for w in md["widths"].split(",")]
    if "activations" in md:
        cfg.activations = [a.strip() for a in md["activations"].split(",")]
    if "loss" in md:
        cfg.loss = md["loss"].strip()
    if "l2" in md:
        cfg.l2 = _num("model", "l2", md["l2"])
    if len(cfg.widths) != len(cfg.activations) + 1:
        raise ConfigError("[model] need exactly one activation per layer")
    if cfg.loss not in ("binary_entropy", "mse"):
        raise ConfigError(f"[model] loss: unknown loss {cfg.loss!r}")
    if cfg.l2 < 0:
        raise ConfigError("[model] l2 must be >= 0")

    od = dict(sections.get("optimizer", {}))
    kind = od.pop("kind", "kbfgs").strip()
    if kind not in OPTIMIZERS:
        raise ConfigError(f"[optimizer] kind: unknown optimizer {kind!r}")
    cfg.optimizer = kind
    params = dict(PAPER_DEFAULTS[kind])
    for key, text in od.items():
        if key in ("p", "t"):
            params[key] = _num("optimizer", key, text, int)
        elif key in ("double_grad", "exact_a_inversion"):
            params[key] = _bool(text)
        else:
            params[key] = _num("optimizer", key, text)
    cfg.opt_params = params

    rd = sections.get("run", {})
    for key, text in rd.items():
        if key == "out":
            cfg.out_dir = text.strip()
        elif key == "warm_batches":
            cfg.warm_batches = _num("run", key, text, int)
        else:
            setattr(cfg, key, _num("run", key, text, int))

    gd = sections.get("grid", {})
    if "alpha" in gd:
        cfg.grid_alpha = _floats(gd["alpha"])
    if "damping" in gd:
        cfg.grid_damping = _floats(gd["damping"])

    validate(cfg)
    return cfg


def validate(cfg):
    if cfg.epochs < 0:
        raise ConfigError("[run] epochs must be >= 0")
    if cfg.batch_size < 1:
        raise ConfigError("[run] batch_size must be >= 1")
    if cfg.warm_batches is not None and cfg.warm_batches < 1:
        raise ConfigError("[run] warm_batches must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("[run] workers must be >= 1")
    p = cfg.opt_params
    if not p.get("alpha", 1.0) > 0:
        raise ConfigError("[optimizer] alpha must be > 0")
    if "lambda" in p and not p["lambda"] > 0:
        raise ConfigError("[optimizer] lambda must be > 0")
    if "eps" in p and not p["eps"] > 0:
        raise ConfigError("[optimizer] eps must be > 0")
    if any(not a > 0 for a in cfg.grid_alpha) or any(not d > 0 for d in cfg.grid_damping):
        raise ConfigError("[grid] values must be > 0")
    try:
        make_optimizer(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[optimizer] {exc}") from None


def parse_config(path):
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.optionxform = str.lower
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(str(exc)) from None
    return config_from_mapping({s: dict(parser.items(s)) for s in parser.sections()})


def make_optimizer(cfg, observers=()):
    p = dict(cfg.opt_params)
    kind = cfg.optimizer
    if kind.startswith("kbfgs"):
        kc = KbfgsConfig(
            alpha=p.get("alpha", 0.3),
            lam=p.get("lambda", 0.3),
            beta=p.get("beta", 0.9),
            mu1=p.get("mu1", 0.2),
            use_lbfgs=kind in ("kbfgs-l", "kbfgs-skip"),
            p=p.get("p", 100),
            skip_variant=kind == "kbfgs-skip",
            exact_A_inversion=p.get("exact_a_inversion", kind == "kbfgs-skip"),
            lr_decay_exponent=p.get("lr_decay_exponent", 0.75),
            double_grad=p.get("double_grad", False),
        )
        return KBFGS(kc, observers=observers)
    if kind == "kfac":
        kc = KfacConfig(alpha=p.get("alpha", 1.0), lam=p.get("lambda", 3.0),
                        beta=p.get("beta", 0.9), T=p.get("t", 20))
        return KFAC(kc, rng=np.random.default_rng([cfg.seed, 2]))
    fc = FirstOrderConfig(kind=kind, alpha=p.get("alpha", 0.03), beta=p.get("beta", 0.9),
                          beta1=p.get("beta1", 0.9), beta2=p.get("beta2", 0.9),
                          eps=p.get("eps", 1e-4))
    return FirstOrder(fc)


def load_datasets(spec, seed):
    """Return ``(train, test)``; ``test`` may be ``None``."""
    test = None
    if spec.kind == "synthetic":
        full = data_io.synthetic_autoencoder(seed, spec.n + spec.n_test, spec.dim, spec.synthetic_kind)
        train = full.subset(slice(0, spec.n))
        if spec.n_test:
            test = full.subset(slice(spec.n, None), name=full.name + "-test")
        return train, test
    if spec.kind == "idx":
        train = data_io.load_idx(spec.path, spec.autoencoder, spec.labels_path)
        if spec.test_path:
            test = data_io.load_idx(spec.test_path, spec.autoencoder, spec.test_targets_path)
    else:
        train = data_io.load_csv(spec.path, spec.targets_path)
        if spec.test_path:
            test = data_io.load_csv(spec.test_path, spec.test_targets_path)
    if spec.limit:
        train = train.subset(slice(0, spec.limit))
    return train, test


def build_model(cfg, input_dim=None):
    widths = list(cfg.widths)
    if input_dim is not None and widths[0] != input_dim:
        raise ConfigError(f"model input width {widths[0]} != data dim {input_dim}")
    return init_weights(layer_specs(widths, cfg.activations), cfg.seed, cfg.loss, cfg.l2)


def dataset_loss(model, dataset, chunk=1000):
    """Full-dataset objective (mean loss plus the L2 term)."""
    total = 0.0
    for lo in range(0, len(dataset), chunk):
        part = DataBatch(dataset.inputs[lo:lo + chunk], dataset.targets[lo:lo + chunk])
        total += loss_only(model, part) * len(part)
    return total / len(dataset)


def eval_test_error(model, dataset, chunk=1000):
    """Squared reconstruction error summed over outputs, averaged over samples."""
    if dataset is None:
        return math.nan
    total = 0.0
    for lo in range(0, len(dataset), chunk):
        out = predict(model, dataset.inputs[lo:lo + chunk])
        total += float(np.sum((out - dataset.targets[lo:lo + chunk]) ** 2))
    return total / len(dataset)


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".9g")


def csv_header(num_layers):
    return (["epoch", "train_loss", "test_error", "wall_seconds", "skips", "diverged"]
            + [f"dd_frac_l{l}" for l in range(1, num_layers + 1)])


def record_row(rec):
    return ([fmt(rec.epoch), fmt(rec.train_loss), fmt(rec.test_error), fmt(rec.wall_seconds),
             fmt(rec.skips), fmt(rec.diverged)] + [fmt(f) for f in rec.dd_fraction])


class _DDCounter:
    def __init__(self, num_layers):
        self.hits = np.zeros(num_layers)
        self.total = np.zeros(num_layers)
        self.skips = 0

    def add(self, metrics):
        if metrics.dd_satisfied:
            self.hits += np.asarray(metrics.dd_satisfied, dtype=float)
            self.total += 1
        self.skips += int(sum(metrics.skipped))

    def fractions(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return list(np.where(self.total > 0, self.hits / np.maximum(self.total, 1), np.nan))


def run_experiment(cfg, observers=(), csv_name="metrics.csv"):
    """Warm start, train for ``cfg.epochs`` epochs and log one CSV row per epoch.

    ``observers`` may define ``on_step(optimizer, metrics)`` and
    ``on_epoch(epoch, optimizer)``; they must not modify the optimizer.
    """
    train, test = load_datasets(cfg.dataset, cfg.seed)
    model = build_model(cfg, train.inputs.shape[1])
    opt = make_optimizer(cfg, observers=[o for o in observers if hasattr(o, "hg_updated")])
    sampler = data_io.BatchSampler(len(train), cfg.batch_size, seed=cfg.seed + 1)
    num_layers = len(model.layers)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / csv_name
    total = _DDCounter(num_layers)
    records = []
    result = ExperimentResult(cfg, math.nan, records, csv_path)

    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(num_layers))
        fh.flush()

        clock = 0.0
        try:
            t0 = time.perf_counter()
            opt.warm_start(model, train, cfg.batch_size, cfg.warm_batches)
            clock += time.perf_counter() - t0
            result.initial_loss = dataset_loss(model, train, cfg.batch_size)
            for epoch in range(1, cfg.epochs + 1):
                counter = _DDCounter(num_layers)
                t0 = time.perf_counter()
                for _ in range(sampler.batches_per_epoch):
                    metrics = opt.step(model, sampler.next_batch(train))
                    counter.add(metrics)
                    total.add(metrics)
                    for obs in observers:
                        if hasattr(obs, "on_step"):
                            obs.on_step(opt, metrics)
                clock += time.perf_counter() - t0
                loss = dataset_loss(model, train, cfg.batch_size)
                rec = EpochRecord(epoch, loss, eval_test_error(model, test, cfg.batch_size), clock,
                                  counter.fractions(), counter.skips)
                records.append(rec)
                writer.writerow(record_row(rec))
                fh.flush()
                for obs in observers:
                    if hasattr(obs, "on_epoch"):
                        obs.on_epoch(epoch, opt)
        except (NumericalDivergenceError, NotPositiveDefiniteError) as exc:
            # a curvature factor that overflows is a divergence as well
            layer = getattr(exc, "layer", None)
            log.error("run diverged: %s (layer %s)", exc, layer)
            result.diverged = True
            result.error = f"{exc} (layer {layer})"
            rec = EpochRecord(len(records) + 1, math.nan, math.nan, clock,
                              [math.nan] * num_layers, 0, diverged=True)
            records.append(rec)
            writer.writerow(record_row(rec))
    result.dd_fraction_total = total.fractions()
    return result


def _grid_cell(args):
    cfg, i, alpha, damping = args
    params = dict(cfg.opt_params, alpha=alpha)
    if damping is not None:
        params["eps" if cfg.optimizer in ("adam", "rmsprop") else "lambda"] = damping
    cell_dir = Path(cfg.out_dir) / f"cell{i:03d}"
    res = run_experiment(cfg.replace(opt_params=params, out_dir=str(cell_dir)))
    losses = [r.train_loss for r in res.records if not r.diverged]
    if losses:
        j = int(np.argmin(losses))
        best, at = losses[j], res.records[j].epoch
    else:
        best, at = math.nan, 0
    return {"cell": i, "alpha": alpha, "damping": damping, "min_train_loss": best,
            "epoch_of_min": at, "diverged": res.diverged}


def run_grid(cfg, workers=None):
    """One experiment per (alpha, damping) pair plus ``grid_summary.csv``."""
    if not cfg.grid_alpha:
        raise ConfigError("[grid] alpha list is empty")
    dampings = cfg.grid_damping or [None]
    if cfg.optimizer == "sgdm":
        dampings = [None]
    cells = [(cfg, i, a, d) for i, (a, d) in enumerate(itertools.product(cfg.grid_alpha, dampings))]
    workers = workers or cfg.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_grid_cell, cells))
    else:
        rows = [_grid_cell(c) for c in cells]

    finite = [r["min_train_loss"] for r in rows]
    best = int(np.nanargmin(finite)) if not all(math.isnan(v) for v in finite) else -1
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "grid_summary.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cell", "alpha", "damping", "min_train_loss", "epoch_of_min",
                         "diverged", "best"])
        for i, r in enumerate(rows):
            r["best"] = i == best
            writer.writerow([fmt(r["cell"]), fmt(r["alpha"]),
                             "" if r["damping"] is None else fmt(r["damping"]),
                             fmt(r["min_train_loss"]), fmt(r["epoch_of_min"]),
                             fmt(r["diverged"]), fmt(r["best"])])
    return rows, path
