"""Datasets, experiment configs, run matrices and exported artifacts."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import condition_report
from .errors import ConfigError, MissingLabel, ParseError, ShapeError
from .netcore import Network, build_mlp, build_network, save_checkpoint
from .trainer import TrainConfig, evaluate, fit

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SIGMA_FLOOR = 1e-12

# Noisy-surface generator: four Gaussian blobs in an XOR layout,
# two per class, isotropic std BLOB_STD.
BLOB_CENTERS = np.array([[-1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [1.0, -1.0]])
BLOB_CLASSES = np.array([0, 0, 1, 1])
BLOB_STD = 0.45


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    feature_names: list | None = None
    class_names: list | None = None
    clean_labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim < 2 or len(self.features) != len(self.labels):
            raise ShapeError("features must be (samples, ...) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.feature_names,
                       self.class_names,
                       None if self.clean_labels is None else self.clean_labels[idx])


def _class_order(values: list) -> list:
    """Integer labels sort numerically, anything else lexicographically."""
    try:
        return sorted(set(values), key=int)
    except ValueError:
        return sorted(set(values))


def load_csv(path, label_column, normalize: bool = True) -> Dataset:
    """Read a headed CSV with numeric feature columns and one label column.

    ``label_column`` is a header name or a 0-based column index.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    if isinstance(label_column, int):
        if not 0 <= label_column < len(header):
            raise MissingLabel(f"label column index {label_column} out of range")
        li = label_column
    else:
        if label_column not in header:
            raise MissingLabel(f"no column named {label_column!r}")
        li = header.index(label_column)
    names = [h for i, h in enumerate(header) if i != li]
    feats, raw_labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
        label = row[li].strip()
        if not label:
            raise MissingLabel(f"line {lineno}: empty label")
        try:
            feats.append([float(c) for i, c in enumerate(row) if i != li])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        raw_labels.append(label)
    if not feats:
        raise ParseError("no data rows", line=2)
    x = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ParseError("non-finite feature value")
    if normalize:
        x = (x - x.mean(axis=0)) / np.maximum(x.std(axis=0), SIGMA_FLOOR)
    classes = _class_order(raw_labels)
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[c] for c in raw_labels], dtype=np.int64)
    return Dataset(x, y, len(classes), feature_names=names, class_names=classes)


def make_noisy_surface_dataset(n: int, noise: float, seed: int = 0) -> Dataset:
    """Two-class 2-D data (two Gaussian blobs per class) with random label flips.

    Each label is flipped independently with probability ``noise``; the
    unflipped labels are kept in ``clean_labels``.
    """
    if n < 10:
        raise ValueError("need n >= 10")
    if not 0.0 <= noise < 0.5:
        raise ValueError("noise must be in [0, 0.5)")
    rng = np.random.default_rng(seed)
    blob = rng.integers(0, len(BLOB_CENTERS), size=n)
    x = BLOB_CENTERS[blob] + BLOB_STD * rng.standard_normal((n, 2))
    clean = BLOB_CLASSES[blob]
    flip = rng.random(n) < noise
    y = np.where(flip, 1 - clean, clean)
    return Dataset(x, y, 2, feature_names=["x1", "x2"], clean_labels=clean)


def split_dataset(ds: Dataset, fractions, rng: np.random.Generator):
    """Shuffle and cut into consecutive train/val/test parts."""
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
        raise ValueError("split fractions must be three nonnegative numbers summing to 1")
    n = len(ds)
    order = rng.permutation(n)
    n_tr = int(round(fr[0] * n))
    n_va = int(round(fr[1] * n))
    return (ds.subset(order[:n_tr]), ds.subset(order[n_tr:n_tr + n_va]),
            ds.subset(order[n_tr + n_va:]))


def surface_grid(net: Network, bounds, resolution: int = 200) -> np.ndarray:
    """``(resolution**2, 3)`` rows of (x1, x2, class-1 score); x2 varies fastest."""
    if net.input_shape != (2,):
        raise ShapeError(f"surface export needs 2-D input, network takes {net.input_shape}")
    x1lo, x1hi, x2lo, x2hi = (float(b) for b in bounds)
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    g1 = np.linspace(x1lo, x1hi, resolution)
    g2 = np.linspace(x2lo, x2hi, resolution)
    pts = np.stack(np.meshgrid(g1, g2, indexing="ij"), axis=-1).reshape(-1, 2)
    out = np.concatenate([net.forward(pts[i:i + 4096]) for i in range(0, len(pts), 4096)])
    score = out[:, 1] if out.shape[1] > 1 else out[:, 0]
    return np.column_stack([pts, score])


def export_surface_grid(net: Network, bounds, resolution: int = 200, path=None) -> np.ndarray:
    grid = surface_grid(net, bounds, resolution)
    if path is not None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x1", "x2", "score"])
            for row in grid:
                w.writerow([repr(float(v)) for v in row])
    return grid


def read_surface_grid(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r] for r in rows])


def surface_total_variation(grid: np.ndarray) -> float:
    """Sum of absolute score differences between grid neighbours along both axes."""
    grid = np.asarray(grid)
    res = int(round(math.sqrt(len(grid))))
    if res * res != len(grid):
        raise ShapeError("grid is not square")
    s = grid[:, 2].reshape(res, res)
    return float(np.abs(np.diff(s, axis=0)).sum() + np.abs(np.diff(s, axis=1)).sum())


# ---------------------------------------------------------------- configs

REGULARIZERS = ("none", "dropout", "weight_decay", "adaptive_lrf", "lrf_penalty")


@dataclass
class Regularizer:
    name: str
    params: dict = field(default_factory=dict)
    label: str = ""
    combine: list = field(default_factory=list)

    def train_overrides(self) -> dict:
        out = {}
        for reg in [self, *self.combine]:
            p = reg.params
            if reg.name == "dropout":
                out["dropout"] = p["p"]
            elif reg.name == "weight_decay":
                out["weight_decay"] = p["lambda"]
            elif reg.name == "adaptive_lrf":
                out.update(tau=p.get("tau", 1.4), patience=p.get("patience", 3),
                           strategy=p.get("strategy", "adaptive_random"),
                           strategy_count=p.get("count", 1),
                           reset_moments=p.get("reset_moments", True))
            elif reg.name == "lrf_penalty":
                out["penalty_gamma"] = p.get("gamma", 1.0)
        return out


@dataclass
class RunConfig:
    name: str
    dataset: dict
    network: dict
    regularizers: list
    seeds: list
    epochs: int = 100
    splits: tuple = (0.6, 0.2, 0.2)
    optimizer: dict = field(default_factory=dict)
    probe_size: int = 64
    surface: dict | None = None


def _default_label(name: str, p: dict) -> str:
    if name == "dropout":
        return f"dropout({p['p']})"
    if name == "weight_decay":
        return f"weight_decay({p['lambda']})"
    if name == "adaptive_lrf":
        strat = p.get("strategy", "adaptive_random")
        if strat == "adaptive_random":
            return "adaptive_lrf"
        return f"adaptive_lrf[{strat}={p.get('count', 1)}]"
    if name == "lrf_penalty":
        return f"lrf_penalty({p.get('gamma', 1.0)})"
    return name


def _parse_regularizer(entry, where: str, nested: bool = False) -> Regularizer:
    if not isinstance(entry, dict) or "name" not in entry:
        raise ConfigError("expected an object with a 'name'", where)
    name = entry["name"]
    if name not in REGULARIZERS:
        raise ConfigError(f"unknown regularizer {name!r}", f"{where}.name")
    params = {k: v for k, v in entry.items()
              if k not in ("name", "label", "combine", "allow_combination")}
    if name == "dropout":
        if not isinstance(params.get("p"), (int, float)) or not 0 <= params["p"] < 1:
            raise ConfigError("dropout needs p in [0, 1)", f"{where}.p")
    elif name == "weight_decay":
        if not isinstance(params.get("lambda"), (int, float)) or params["lambda"] < 0:
            raise ConfigError("weight_decay needs lambda >= 0", f"{where}.lambda")
    elif name == "adaptive_lrf":
        strat = params.get("strategy", "adaptive_random")
        if strat not in ("adaptive_random", "first_k", "last_d"):
            raise ConfigError(f"unknown strategy {strat!r}", f"{where}.strategy")
        tau = params.get("tau", 1.4)
        if isinstance(tau, str):
            if tau.lower() not in ("inf", "infinity"):
                raise ConfigError("tau must be a number or 'inf'", f"{where}.tau")
            params["tau"] = math.inf
        elif not isinstance(tau, (int, float)):
            raise ConfigError("tau must be a number or 'inf'", f"{where}.tau")
        if int(params.get("patience", 3)) < 1:
            raise ConfigError("patience must be >= 1", f"{where}.patience")
        if int(params.get("count", 1)) < 1:
            raise ConfigError("count must be >= 1", f"{where}.count")
    elif name == "lrf_penalty":
        g = params.get("gamma", 1.0)
        if not isinstance(g, (int, float)) or g < 0:
            raise ConfigError("gamma must be >= 0", f"{where}.gamma")
    combine = []
    if "combine" in entry:
        if nested:
            raise ConfigError("combinations cannot be nested", f"{where}.combine")
        if entry.get("allow_combination") is not True:
            raise ConfigError("combining regularizers requires \"allow_combination\": true",
                              f"{where}.combine")
        combine = [_parse_regularizer(e, f"{where}.combine[{i}]", nested=True)
                   for i, e in enumerate(entry["combine"])]
    label = entry.get("label") or "+".join(
        [_default_label(name, params)] + [c.label for c in combine])
    return Regularizer(name, params, label, combine)


def parse_config(doc: dict) -> RunConfig:
    """Validate a config document; errors name the offending field."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"expected {SCHEMA_VERSION}", "schema_version")
    ds = doc.get("dataset")
    if not isinstance(ds, dict) or ds.get("source") not in ("synthetic_surface", "csv"):
        raise ConfigError("source must be 'synthetic_surface' or 'csv'", "dataset.source")
    if ds["source"] == "csv":
        for key in ("path", "label_column"):
            if key not in ds:
                raise ConfigError("required for csv datasets", f"dataset.{key}")
    else:
        if int(ds.get("n", 600)) < 10:
            raise ConfigError("n must be >= 10", "dataset.n")
        if not 0 <= float(ds.get("noise", 0.3)) < 0.5:
            raise ConfigError("noise must be in [0, 0.5)", "dataset.noise")
    net = doc.get("network", {"hidden": [32, 32]})
    if not isinstance(net, dict) or not ("hidden" in net or "layers" in net):
        raise ConfigError("give 'hidden' widths or explicit 'layers'", "network")
    regs = doc.get("regularizers", [{"name": "none"}])
    if not isinstance(regs, list) or not regs:
        raise ConfigError("need a non-empty list", "regularizers")
    parsed = [_parse_regularizer(r, f"regularizers[{i}]") for i, r in enumerate(regs)]
    labels = [r.label for r in parsed]
    if len(set(labels)) != len(labels):
        raise ConfigError("regularizer labels must be unique", "regularizers")
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("need a non-empty list of integers", "seeds")
    epochs = doc.get("epochs", 100)
    if not isinstance(epochs, int) or epochs < 0:
        raise ConfigError("must be a nonnegative integer", "epochs")
    splits = doc.get("splits", [0.6, 0.2, 0.2])
    if (not isinstance(splits, list) or len(splits) != 3 or any(s < 0 for s in splits)
            or not math.isclose(sum(splits), 1.0, abs_tol=1e-9)):
        raise ConfigError("three nonnegative fractions summing to 1", "splits")
    opt = doc.get("optimizer", {})
    unknown = set(opt) - {"lr", "beta1", "beta2", "eps", "batch_size"}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", "optimizer")
    return RunConfig(name=doc.get("name", "experiment"), dataset=ds, network=net,
                     regularizers=parsed, seeds=seeds, epochs=epochs, splits=tuple(splits),
                     optimizer=opt, probe_size=int(doc.get("probe_size", 64)),
                     surface=doc.get("surface"))


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such file {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return parse_config(doc)


# ---------------------------------------------------------------- runs

def load_dataset(spec: dict, base_dir: Path | None = None) -> Dataset:
    if spec["source"] == "csv":
        p = Path(spec["path"])
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        return load_csv(p, spec["label_column"], normalize=spec.get("normalize", True))
    return make_noisy_surface_dataset(int(spec.get("n", 600)), float(spec.get("noise", 0.3)),
                                      seed=int(spec.get("seed", 0)))


def build_model(spec: dict, ds: Dataset, rng: np.random.Generator) -> Network:
    if "layers" in spec:
        return build_network({"input_shape": spec.get("input_shape", list(ds.features.shape[1:])),
                              "layers": spec["layers"], "loss": spec.get("loss", "cross_entropy")},
                             rng=rng)
    loss_kind = spec.get("loss", "cross_entropy")
    return build_mlp(ds.features.shape[1], spec["hidden"], ds.n_classes,
                     activation=spec.get("activation", "relu"),
                     output_activation="softmax", loss=loss_kind, rng=rng)


def run_streams(seed: int):
    """Independent generators for splitting and weight init, derived from the run seed only."""
    split_ss, init_ss = np.random.SeedSequence([seed, 1]).spawn(2)
    return np.random.default_rng(split_ss), np.random.default_rng(init_ss)


@dataclass
class RunResult:
    label: str
    seed: int
    status: str
    metrics: dict
    history: object = None
    net: Network | None = None


def _final_metrics(net, hist, splits, probe_size):
    train, val, test = splits
    if hist.records:
        r = hist.records[-1]
        return {"train_acc": r["train_acc"], "train_loss": r["train_loss"],
                "test_acc": r["test_acc"], "test_loss": r["test_loss"], "test_f1": r["test_f1"],
                "final_sncn": r["sncn"]}
    tr = evaluate(net, train.features, train.labels)
    te = evaluate(net, test.features, test.labels) if len(test) else (None, None, None)
    rep = condition_report(net, val.features[:probe_size])
    return {"train_acc": tr[1], "train_loss": tr[0], "test_acc": te[1], "test_loss": te[0],
            "test_f1": te[2], "final_sncn": rep.sncn}


def run_single(cfg: RunConfig, reg: Regularizer, seed: int, ds: Dataset,
               run_dir: Path | None = None) -> RunResult:
    """One (regularizer, seed) cell of the run matrix."""
    split_rng, init_rng = run_streams(seed)
    train, val, test = split_dataset(ds, cfg.splits, split_rng)
    net = build_model(cfg.network, ds, init_rng)
    opt = cfg.optimizer
    tc = TrainConfig(epochs=cfg.epochs, batch_size=int(opt.get("batch_size", 32)),
                     lr=float(opt.get("lr", 1e-3)), beta1=float(opt.get("beta1", 0.9)),
                     beta2=float(opt.get("beta2", 0.999)), eps=float(opt.get("eps", 1e-8)),
                     seed=seed, probe_size=cfg.probe_size, **reg.train_overrides())
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        tc.checkpoint_path = str(run_dir / "last_good.json")
    hist = fit(net, (train.features, train.labels), (val.features, val.labels),
               (test.features, test.labels) if len(test) else None, tc)
    metrics = _final_metrics(net, hist, (train, val, test), cfg.probe_size)
    if run_dir is not None:
        hist.to_csv(run_dir / "history.csv")
        hist.to_jsonl(run_dir / "history.jsonl")
        hist.trace_to_jsonl(run_dir / "trace.jsonl")
        save_checkpoint(net, run_dir / "checkpoint.json")
    return RunResult(reg.label, seed, "ok", metrics, hist, net)


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in label).strip("_")


SUMMARY_METRICS = ("train_acc", "train_loss", "test_acc", "test_loss", "test_f1", "final_sncn")


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = math.fsum(vals) / len(vals)
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return mean, std


def _cell(v):
    return "" if v is None else repr(float(v))


def write_runs_table(results, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["regularizer", "seed", "status", *SUMMARY_METRICS])
        for r in results:
            w.writerow([r.label, r.seed, r.status, *[_cell(r.metrics.get(m)) for m in SUMMARY_METRICS]])


def summarize(results, labels) -> list:
    rows = []
    for label in labels:
        mine = [r for r in results if r.label == label]
        ok = [r for r in mine if r.status == "ok"]
        row = {"regularizer": label, "runs": len(ok), "failed": len(mine) - len(ok)}
        for m in SUMMARY_METRICS:
            row[f"{m}_mean"], row[f"{m}_std"] = _mean_std([r.metrics.get(m) for r in ok])
        rows.append(row)
    return rows


def write_summary(rows, path) -> None:
    cols = ["regularizer", "runs", "failed"]
    for m in SUMMARY_METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] if c in ("regularizer", "runs", "failed") else _cell(row[c])
                        for c in cols])


def write_sncn_trace(results, path) -> None:
    """Wide CSV: one row per epoch, one column per run (``label@seed``)."""
    ok = [r for r in results if r.status == "ok"]
    n_epochs = max((len(r.history.records) for r in ok), default=0)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", *[f"{r.label}@{r.seed}" for r in ok]])
        for e in range(n_epochs):
            row = [e + 1]
            for r in ok:
                recs = r.history.records
                row.append(_cell(recs[e]["sncn"]) if e < len(recs) else "")
            w.writerow(row)


def run_experiment(config, out_dir, seeds=None, base_dir=None, write_runs: bool = True):
    """Execute the regularizer x seed matrix and write all artifacts under ``out_dir``.

    Returns the list of RunResult. A failing run is logged and recorded with
    its error; the others still run.
    """
    cfg = config if isinstance(config, RunConfig) else load_config(config)
    if base_dir is None and not isinstance(config, RunConfig):
        base_dir = Path(config).parent
    if seeds is not None:
        cfg = copy.copy(cfg)
        cfg.seeds = list(seeds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg.dataset, base_dir)
    results = []
    for reg in cfg.regularizers:
        for seed in cfg.seeds:
            run_dir = out / "runs" / f"{_slug(reg.label)}_seed{seed}" if write_runs else None
            try:
                res = run_single(cfg, reg, seed, ds, run_dir)
            except Exception as exc:  # isolate the failing cell
                log.error("run %s seed %d failed: %s", reg.label, seed, exc)
                res = RunResult(reg.label, seed, f"failed: {type(exc).__name__}: {exc}", {})
            results.append(res)
    write_runs_table(results, out / "runs.csv")
    write_summary(summarize(results, [r.label for r in cfg.regularizers]), out / "summary.csv")
    write_sncn_trace(results, out / "sncn_trace.csv")
    return results
