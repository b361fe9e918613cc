"""Experiment front end: YAML configs, dataset construction, desk-scale
presets, summary CSVs, manifests and the ``curvlab`` command line."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np
import yaml

from curvlab import activations as act
from curvlab.activations import ActivationSpec, parse_activation
from curvlab.attacks import AttackConfig, fgsm
from curvlab.curvature_lab import (
    Quadratic,
    batch_max_eig_report,
    random_quadratic,
    verify_sandwich,
    write_eig_csv,
)
from curvlab.datasets import (
    Dataset,
    Splits,
    binary_subset,
    digits_dataset,
    load_idx,
    split_dataset,
    synth_dataset,
)
from curvlab.errors import CurvlabError, IoError, ParseError, UnknownKey
from curvlab.models import Architecture, ModelState, init_weights, load_checkpoint, save_checkpoint
from curvlab.trainer import GapReport, TrainConfig, evaluate, gap_report, train_adversarial, write_metrics_csv

log = logging.getLogger(__name__)

PRESETS = ("activation_sweep", "pswish_sweep", "leakyrelu_sweep", "width_sweep", "hessian_report", "lemma1_verify")
SOURCES = ("digits", "synthetic", "idx")

# default sweep list per preset
PRESET_SWEEPS = {
    "activation_sweep": ["lisht", "silu", "relu", "gelu", "mish"],
    "pswish_sweep": ["pswish:beta=0.5", "pswish:beta=1", "pswish:beta=2", "pswish:beta=4", "pswish:beta=10"],
    "leakyrelu_sweep": ["leakyrelu:k=0.5", "leakyrelu:k=0.3", "leakyrelu:k=0.2", "leakyrelu:k=0", "leakyrelu:k=-0.2"],
    "width_sweep": ["silu"],
    "hessian_report": ["lisht", "silu"],
    "lemma1_verify": [],
}
DEFAULT_WIDTHS = [8, 16, 32, 64, 128, 256, 512]

SUMMARY_COLUMNS = [
    "sweep_key",
    "rob_final_train",
    "rob_final_test",
    "rob_best_val",
    "rob_diff",
    "std_final_train",
    "std_final_test",
    "std_best_val",
    "std_diff",
]


# ---------------------------------------------------------------------------
# config types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    # synthetic
    kind: str = "two-moons"
    n: int = 2000
    noise: float = 0.2
    # uninformative U(0, 1) input columns appended to the 2-D data
    extra_dims: int = 18
    # idx
    images: str | None = None
    labels: str | None = None
    classes: tuple = (0, 1)
    subset: int | None = 4000
    # digits: class 1 is digit >= threshold
    threshold: int = 5
    seed: int = 0
    split: tuple = (0.45, 0.05, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        if self.source not in SOURCES:
            raise ValueError(f"unknown dataset source {self.source!r}; choose from {SOURCES}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {self.split}")
        if self.source == "idx" and (self.images is None or self.labels is None):
            raise ValueError("idx source needs both 'images' and 'labels'")
        if len(self.classes) != 2:
            raise ValueError("exactly two classes are supported")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (256, 256)
    conv_channels: tuple = ()
    conv_kernel: int = 3
    conv_stride: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))


@dataclass(frozen=True)
class HessianConfig:
    selector: str = "logit"
    n_examples: int = 32
    max_iter: int = 300
    tol: float = 1e-6
    checkpoint: str = "final"
    # reuse trained checkpoints from an earlier sweep's output directory
    source_dir: str | None = None

    def __post_init__(self):
        if self.selector not in ("logit", "loss"):
            raise ValueError("selector must be 'logit' or 'loss'")
        if self.checkpoint not in ("final", "best"):
            raise ValueError("checkpoint must be 'final' or 'best'")


@dataclass(frozen=True)
class Lemma1Config:
    trials: int = 100
    min_dim: int = 2
    max_dim: int = 6
    seed: int = 0
    slack: float = 1e-4


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str
    out_dir: str
    dataset: DatasetConfig
    model: ModelConfig
    activation: ActivationSpec
    sweep: tuple
    widths: tuple
    seeds: tuple
    train: TrainConfig
    hessian: HessianConfig = field(default_factory=HessianConfig)
    lemma1: Lemma1Config = field(default_factory=Lemma1Config)

    def architecture(self, input_shape, spec: ActivationSpec | None = None, width: int | None = None) -> Architecture:
        hidden = self.model.hidden if width is None else (int(width),) * len(self.model.hidden)
        return Architecture(
            tuple(input_shape),
            hidden,
            2,
            spec or self.activation,
            self.model.conv_channels,
            self.model.conv_kernel,
            self.model.conv_stride,
        )


def desk_epsilon(source: str) -> float:
    """0.08 for the 2-D synthetic sets, 0.1 for digit images."""
    return 0.08 if source == "synthetic" else 0.1


def scaled_drops(epochs: int) -> tuple:
    """Drops at 1/2 and 3/4 of the run, the shape of a {100, 150}/200 schedule."""
    return tuple(sorted({d for d in (epochs // 2, (3 * epochs) // 4) if 2 <= d <= epochs}))


def desk_train_config(epsilon: float, **overrides) -> TrainConfig:
    base = dict(
        epochs=60,
        batch_size=128,
        lr0=0.05,
        momentum=0.9,
        weight_decay=5e-4,
        lr_drop_epochs=(30, 45),
        lr_drop_factor=10.0,
        attack=AttackConfig(epsilon, epsilon / 4, 10, 1, 0.0, 1.0),
        eval_attack=AttackConfig(epsilon, epsilon / 4, 10, 1, 0.0, 1.0),
        eval_every=10,
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# YAML parsing with line numbers
# ---------------------------------------------------------------------------

_ATTACK_KEYS = {f.name for f in dataclasses.fields(AttackConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_SCHEMA = {
    "preset": None,
    "out_dir": None,
    "activation": None,
    "sweep": None,
    "widths": None,
    "seeds": None,
    "dataset": {f.name for f in dataclasses.fields(DatasetConfig)},
    "model": {f.name for f in dataclasses.fields(ModelConfig)},
    "hessian": {f.name for f in dataclasses.fields(HessianConfig)},
    "lemma1": {f.name for f in dataclasses.fields(Lemma1Config)},
    "train": _TRAIN_KEYS,
}


def _key_lines(node, prefix=(), out=None) -> dict:
    """Map key paths to 1-based line numbers of the YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            out[path] = k.start_mark.line + 1
            _key_lines(v, path, out)
    return out


def _line(lines: dict, path) -> int | None:
    path = tuple(path)
    while path and path not in lines:
        path = path[:-1]
    return lines.get(path)


def _check_keys(raw: dict, lines: dict):
    if not isinstance(raw, dict):
        raise ParseError("top level must be a mapping", 1)
    for key, val in raw.items():
        if key not in _SCHEMA:
            raise UnknownKey(f"unknown key {key!r}", _line(lines, (key,)))
        allowed = _SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(val, dict):
            raise ParseError(f"{key!r} must be a mapping", _line(lines, (key,)))
        for sub, sval in val.items():
            if sub not in allowed:
                raise UnknownKey(f"unknown key {key}.{sub}", _line(lines, (key, sub)))
            if key == "train" and sub in ("attack", "eval_attack"):
                if not isinstance(sval, dict):
                    raise ParseError(f"train.{sub} must be a mapping", _line(lines, (key, sub)))
                for a in sval:
                    if a not in _ATTACK_KEYS:
                        raise UnknownKey(f"unknown key train.{sub}.{a}", _line(lines, (key, sub, a)))


def _build(raw: dict, lines: dict, base_dir: Path) -> ExperimentConfig:
    def fail(exc, *path):
        raise ParseError(str(exc), _line(lines, path)) from exc

    preset = raw.get("preset")
    if preset not in PRESETS:
        fail(ValueError(f"preset must be one of {PRESETS}, got {preset!r}"), "preset")

    try:
        ds_raw = dict(raw.get("dataset") or {})
        for p in ("images", "labels"):
            if ds_raw.get(p) is not None:
                path = Path(ds_raw[p])
                path = path if path.is_absolute() else (base_dir / path)
                if not path.exists():
                    raise FileNotFoundError(f"dataset.{p}: {path} does not exist")
                ds_raw[p] = str(path.resolve())
        dataset = DatasetConfig(**ds_raw)
    except (TypeError, ValueError, FileNotFoundError) as exc:
        fail(exc, "dataset")

    try:
        model = ModelConfig(**(raw.get("model") or {}))
    except (TypeError, ValueError) as exc:
        fail(exc, "model")

    try:
        activation = parse_activation(str(raw.get("activation", "silu")))
    except CurvlabError as exc:
        fail(exc, "activation")

    sweep_raw = raw.get("sweep", PRESET_SWEEPS[preset])
    try:
        sweep = tuple(str(parse_activation(str(s))) for s in sweep_raw)
    except (CurvlabError, TypeError) as exc:
        fail(exc, "sweep")

    try:
        widths = tuple(int(w) for w in raw.get("widths", DEFAULT_WIDTHS))
        seeds = tuple(int(s) for s in raw.get("seeds", [0, 1, 2, 3, 4]))
        if not seeds:
            raise ValueError("seeds must not be empty")
    except (TypeError, ValueError) as exc:
        fail(exc, "seeds" if "seeds" in raw else "widths")

    tr = dict(raw.get("train") or {})
    eps = desk_epsilon(dataset.source)
    try:
        for k in ("attack", "eval_attack"):
            if k in tr:
                base = dataclasses.asdict(getattr(desk_train_config(eps), k))
                base.update(tr[k])
                tr[k] = AttackConfig(**base)
        if "epochs" in tr and "lr_drop_epochs" not in tr:
            tr["lr_drop_epochs"] = scaled_drops(int(tr["epochs"]))
        train = desk_train_config(eps, **tr)
    except (TypeError, ValueError) as exc:
        fail(exc, "train")

    try:
        hessian = HessianConfig(**(raw.get("hessian") or {}))
    except (TypeError, ValueError) as exc:
        fail(exc, "hessian")
    try:
        lemma1 = Lemma1Config(**(raw.get("lemma1") or {}))
    except (TypeError, ValueError) as exc:
        fail(exc, "lemma1")

    out_dir = str(raw.get("out_dir", f"runs/{preset}"))
    return ExperimentConfig(preset, out_dir, dataset, model, activation, sweep, widths, seeds, train, hessian, lemma1)


def parse_config_text(text: str, base_dir=".") -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ParseError(f"invalid YAML: {exc.problem}", mark.line + 1 if mark else None) from exc
    if raw is None:
        raise ParseError("empty config", 1)
    lines = _key_lines(node)
    _check_keys(raw, lines)
    return _build(raw, lines, Path(base_dir))


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, ActivationSpec):
            return str(v)
        return v

    train = {k: plain(v) for k, v in dataclasses.asdict(cfg.train).items() if k != "seed"}
    return {
        "preset": cfg.preset,
        "out_dir": cfg.out_dir,
        "activation": str(cfg.activation),
        "sweep": list(cfg.sweep),
        "widths": list(cfg.widths),
        "seeds": list(cfg.seeds),
        "dataset": {k: plain(v) for k, v in dataclasses.asdict(cfg.dataset).items()},
        "model": {k: plain(v) for k, v in dataclasses.asdict(cfg.model).items()},
        "train": train,
        "hessian": dataclasses.asdict(cfg.hessian),
        "lemma1": dataclasses.asdict(cfg.lemma1),
    }


def emit_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def default_config(preset: str) -> ExperimentConfig:
    return parse_config_text(f"preset: {preset}\n")


def with_overrides(cfg: ExperimentConfig, activation=None, beta=None, k=None, epsilon=None, seed=None, out=None):
    """Apply command-line overrides; --beta/--k select a PSwish/LeakyReLU activation."""
    changes = {}
    spec = cfg.activation
    if activation is not None:
        spec = parse_activation(activation)
    if beta is not None:
        spec = parse_activation(f"pswish:beta={beta}")
    if k is not None:
        spec = parse_activation(f"leakyrelu:k={k}")
    if spec != cfg.activation:
        changes["activation"] = spec
        if cfg.preset != "lemma1_verify":
            changes["sweep"] = (str(spec),)
    if epsilon is not None:
        tr = cfg.train
        changes["train"] = dataclasses.replace(
            tr,
            attack=dataclasses.replace(tr.attack, epsilon=epsilon, alpha=epsilon / 4),
            eval_attack=dataclasses.replace(tr.eval_attack, epsilon=epsilon, alpha=epsilon / 4),
        )
    if seed is not None:
        changes["seeds"] = (int(seed),)
    if out is not None:
        changes["out_dir"] = str(out)
    return dataclasses.replace(cfg, **changes)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def build_dataset(dcfg: DatasetConfig, seed: int = 0) -> Dataset:
    if dcfg.source == "digits":
        return digits_dataset(dcfg.threshold)
    if dcfg.source == "synthetic":
        return synth_dataset(dcfg.kind, dcfg.n, dcfg.noise, dcfg.seed + seed, dcfg.extra_dims)
    full = load_idx(dcfg.images, dcfg.labels)
    return binary_subset(full, dcfg.classes, dcfg.subset, dcfg.seed)


def build_splits(dcfg: DatasetConfig, seed: int = 0) -> Splits:
    return split_dataset(build_dataset(dcfg, seed), dcfg.split, dcfg.seed + seed)


# ---------------------------------------------------------------------------
# summary CSV
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


@dataclass
class SummaryRow:
    sweep_key: str
    gap: GapReport
    extras: dict = field(default_factory=dict)


def summary_cells(row: SummaryRow) -> list[str]:
    """Percentages with 6 significant digits. Each diff is the exact decimal
    difference of the rendered train/test cells."""
    if not row.sweep_key:
        raise ValueError("sweep_key must be a non-empty string")
    g = row.gap
    cells = [row.sweep_key]
    for train, test, best in (
        (g.final_train_rob_acc, g.final_test_rob_acc, g.best_test_rob_acc),
        (g.final_train_std_acc, g.final_test_std_acc, g.best_test_std_acc),
    ):
        tr, te = _fmt(100.0 * train), _fmt(100.0 * test)
        diff = Decimal(tr) - Decimal(te)
        cells += [tr, te, _fmt(100.0 * best), format(diff.normalize() if diff else Decimal(0), "f")]
    return cells


def write_summary_csv(rows, path) -> Path:
    rows = [r if isinstance(r, SummaryRow) else SummaryRow(*r) for r in rows]
    if not rows:
        raise ValueError("at least one report is needed")
    extra_cols = []
    for r in rows:
        extra_cols += [k for k in r.extras if k not in extra_cols]
    body = [summary_cells(r) + [_fmt(r.extras.get(k)) for k in extra_cols] for r in rows]
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS + extra_cols)
            w.writerows(body)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _write_rows(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def checkpoint_io(mode: str, path, state: ModelState | None = None, expected: Architecture | None = None) -> ModelState:
    """``save`` writes ``state`` and returns it; ``load`` reads it back."""
    if mode == "save":
        if state is None:
            raise ValueError("save needs a model state")
        save_checkpoint(path, state)
        return state
    if mode == "load":
        return load_checkpoint(path, expected)
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Job:
    key: str
    spec: str
    width: int | None
    seed: int
    run_dir: str


def _seeded(train: TrainConfig, seed: int) -> TrainConfig:
    return dataclasses.replace(
        train,
        seed=seed,
        attack=dataclasses.replace(train.attack, seed=seed),
        eval_attack=dataclasses.replace(train.eval_attack, seed=seed),
    )


def curvature_value(spec: ActivationSpec) -> float:
    return float(act.curvature(spec).max_curvature)


def run_training(cfg: ExperimentConfig, spec: ActivationSpec, seed: int, run_dir, width: int | None = None):
    """One adversarial-training run; writes metrics.csv, best.ckpt and final.ckpt."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    splits = build_splits(cfg.dataset, seed)
    arch = cfg.architecture(splits.train.x.shape[1:], spec, width)
    result = train_adversarial(init_weights(arch, seed), splits, _seeded(cfg.train, seed), out_dir=run_dir)
    write_metrics_csv(result.history, run_dir / "metrics.csv")
    return result, gap_report(result.history)


def _run_job(cfg: ExperimentConfig, job: Job):
    try:
        spec = parse_activation(job.spec)
        _, gap = run_training(cfg, spec, job.seed, job.run_dir, job.width)
        return job, gap, None
    except Exception as exc:  # a failed sweep point is recorded, not fatal
        log.warning("sweep point %s seed %d failed: %s", job.key, job.seed, exc)
        return job, None, f"{type(exc).__name__}: {exc}"


def max_workers() -> int:
    raw = os.environ.get("CURVLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_jobs(cfg, jobs):
    workers = min(max_workers(), len(jobs)) or 1
    if workers == 1:
        return [_run_job(cfg, j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, [cfg] * len(jobs), jobs))


def sweep_jobs(cfg: ExperimentConfig) -> list[Job]:
    out = Path(cfg.out_dir)
    jobs = []
    if cfg.preset == "width_sweep":
        spec = cfg.sweep[0] if cfg.sweep else str(cfg.activation)
        points = [(f"width={w}", spec, w) for w in cfg.widths]
    else:
        points = [(s, s, None) for s in cfg.sweep]
    for key, spec, width in points:
        for seed in cfg.seeds:
            safe = key.replace(":", "_").replace("=", "")
            jobs.append(Job(key, spec, width, seed, str(out / "runs" / safe / f"seed_{seed}")))
    return jobs


def _median_rows(rows: list[SummaryRow]) -> list[SummaryRow]:
    keys = list(dict.fromkeys(r.sweep_key for r in rows))
    out = []
    for key in keys:
        group = [r for r in rows if r.sweep_key == key]
        med = {
            f.name: float(np.median([getattr(r.gap, f.name) for r in group]))
            for f in dataclasses.fields(GapReport)
        }
        med["best_epoch"] = int(np.median([r.gap.best_epoch for r in group]))
        extras = {k: v for k, v in group[0].extras.items() if k in ("curvature", "width")}
        extras["overfit_gap"] = 100.0 * med["overfit_gap"]
        extras["robust_gap"] = 100.0 * med["robust_gap"]
        extras["standard_gap"] = 100.0 * med["standard_gap"]
        extras["seeds"] = len(group)
        out.append(SummaryRow(key, GapReport(**med), extras))
    return out


def run_sweep(cfg: ExperimentConfig) -> dict:
    """Train every (sweep point, seed) and write the summary files."""
    out = Path(cfg.out_dir)
    jobs = sweep_jobs(cfg)
    rows, failures = [], []
    for job, gap, err in _map_jobs(cfg, jobs):
        if err is not None:
            failures.append((job.key, job.seed, err))
            continue
        spec = parse_activation(job.spec)
        extras = {
            "seed": job.seed,
            "curvature": curvature_value(spec),
            "robust_gap": 100.0 * gap.robust_gap,
            "standard_gap": 100.0 * gap.standard_gap,
            "overfit_gap": 100.0 * gap.overfit_gap,
            "best_epoch": gap.best_epoch,
        }
        if job.width is not None:
            extras["width"] = job.width
        rows.append(SummaryRow(job.key, gap, extras))
    files = {}
    if rows:
        files["summary"] = write_summary_csv(rows, out / "summary.csv")
        files["summary_median"] = write_summary_csv(_median_rows(rows), out / "summary_median.csv")
    files["failures"] = _write_rows(out / "failures.csv", ["sweep_key", "seed", "error"], failures)
    return {"rows": rows, "failures": failures, "files": files, "jobs": jobs}


def run_hessian_report(cfg: ExperimentConfig) -> dict:
    """Largest input-Hessian eigenvalue over test examples for each trained model.

    Checkpoints come from ``hessian.source_dir`` when set (an earlier sweep's
    output with the same seeds), otherwise the models are trained here.
    """
    out = Path(cfg.out_dir)
    hc = cfg.hessian
    rows, failures = [], []
    for job in sweep_jobs(cfg):
        try:
            splits = build_splits(cfg.dataset, job.seed)
            spec = parse_activation(job.spec)
            arch = cfg.architecture(splits.train.x.shape[1:], spec, job.width)
            name = f"{hc.checkpoint}.ckpt"
            if hc.source_dir is not None:
                src = Path(hc.source_dir) / Path(job.run_dir).relative_to(out)
                state = load_checkpoint(src / name, arch)
            else:
                run_training(cfg, spec, job.seed, job.run_dir, job.width)
                state = load_checkpoint(Path(job.run_dir) / name, arch)
            n = min(hc.n_examples, len(splits.test))
            rep = batch_max_eig_report(
                state, splits.test.x[:n], splits.test.y[:n], hc.selector, seed=job.seed, max_iter=hc.max_iter, tol=hc.tol
            )
            write_eig_csv(rep, Path(job.run_dir) / "eigs.csv")
            s = rep.summary()
            rows.append((job.key, job.seed, curvature_value(spec), s["count"], s["failed"], s["median"], s["mean"], s["max"], hc.selector))
        except Exception as exc:
            log.warning("hessian report %s seed %d failed: %s", job.key, job.seed, exc)
            failures.append((job.key, job.seed, f"{type(exc).__name__}: {exc}"))
    header = ["sweep_key", "seed", "curvature", "count", "failed", "median_nu", "mean_nu", "max_nu", "selector"]
    files = {
        "hessian_summary": _write_rows(out / "hessian_summary.csv", header, rows),
        "failures": _write_rows(out / "failures.csv", ["sweep_key", "seed", "error"], failures),
    }
    return {"rows": rows, "failures": failures, "files": files}


def run_lemma1_verify(cfg: ExperimentConfig) -> dict:
    """Bounds versus brute-force minimal perturbations on random quadratics."""
    lc = cfg.lemma1
    rng = np.random.default_rng(lc.seed)
    rows = []
    for t in range(lc.trials):
        dim = int(rng.integers(lc.min_dim, lc.max_dim + 1))
        q = random_quadratic(rng, dim)
        rows.append(_sandwich_row(f"random-{t}", q, dim, lc))
    # gradient aligned with the top eigenvector: the bounds coincide
    q = Quadratic(-1.0, np.array([2.0, 0.0]), np.diag([2.0, -1.0]))
    rows.append(_sandwich_row("aligned", q, 2, lc))
    header = ["case", "dim", "c", "g_norm", "g_dot_u", "nu", "lower", "upper", "delta_norm", "holds"]
    path = _write_rows(Path(cfg.out_dir) / "lemma1.csv", header, rows)
    passed = sum(1 for r in rows if r[-1])
    return {"rows": rows, "passed": passed, "total": len(rows), "files": {"lemma1": path}}


def _sandwich_row(case, q, dim, lc):
    try:
        rep = verify_sandwich(q, np.zeros(dim), slack=lc.slack, seed=lc.seed)
        b = rep.bounds
        return (case, dim, b.c, b.g_norm, b.g_dot_u, b.nu, b.lower, b.upper, rep.delta_norm, True)
    except (AssertionError, CurvlabError) as exc:
        log.warning("sandwich case %s failed: %s", case, exc)
        return (case, dim, None, None, None, None, None, None, None, False)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: ExperimentConfig, extra_files=()) -> Path:
    """config.yaml plus manifest.json listing every file under out_dir."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(emit_config(cfg))
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    files += [Path(p) for p in extra_files if Path(p).is_file()]
    manifest = {
        "preset": cfg.preset,
        "config": "config.yaml",
        "files": [
            {"path": str(p.relative_to(out)) if p.is_relative_to(out) else str(p), "bytes": p.stat().st_size, "sha256": _sha256(p)}
            for p in files
        ],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def run_preset(name: str, cfg: ExperimentConfig | None = None) -> dict:
    cfg = default_config(name) if cfg is None else dataclasses.replace(cfg, preset=name)
    if name in ("activation_sweep", "pswish_sweep", "leakyrelu_sweep", "width_sweep"):
        result = run_sweep(cfg)
    elif name == "hessian_report":
        result = run_hessian_report(cfg)
    elif name == "lemma1_verify":
        result = run_lemma1_verify(cfg)
    else:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    result["manifest"] = write_manifest(cfg)
    return result


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _load_cfg(args, preset: str) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else default_config(preset)
    if cfg.preset != preset and preset in PRESETS and args.command == "sweep":
        cfg = dataclasses.replace(cfg, preset=preset)
    return with_overrides(cfg, args.activation, args.beta, args.k, args.epsilon, args.seed, args.out)


def cmd_train(args) -> int:
    cfg = _load_cfg(args, "activation_sweep")
    seed = cfg.seeds[0]
    out = Path(cfg.out_dir)
    _, gap = run_training(cfg, cfg.activation, seed, out)
    write_summary_csv([SummaryRow(str(cfg.activation), gap, {"seed": seed})], out / "summary.csv")
    write_manifest(cfg)
    print(f"robust_gap {gap.robust_gap:.6g} standard_gap {gap.standard_gap:.6g} best_epoch {gap.best_epoch}")
    return 0


def cmd_attack(args) -> int:
    cfg = _load_cfg(args, "activation_sweep")
    seed = cfg.seeds[0]
    splits = build_splits(cfg.dataset, seed)
    arch = cfg.architecture(splits.test.x.shape[1:])
    state = load_checkpoint(args.checkpoint, arch)
    atk = cfg.train.eval_attack
    std_loss, std_err, rob_loss, rob_err = evaluate(state, splits.test, atk)
    adv = fgsm(state, splits.test.x, splits.test.y, atk.epsilon, atk.clamp_min, atk.clamp_max)
    rows = [
        ("clean", std_loss, std_err),
        (f"pgd-{atk.steps}x{atk.restarts}", rob_loss, rob_err),
        ("fgsm", float(adv.loss.mean()), float((adv.success | (state.logits(splits.test.x).argmax(1) != splits.test.y)).mean())),
    ]
    path = _write_rows(Path(cfg.out_dir) / "attack.csv", ["attack", "loss", "err"], rows)
    for r in rows:
        print(f"{r[0]:12s} loss {r[1]:.6g} err {r[2]:.6g}")
    print(f"wrote {path}")
    return 0


def cmd_curvature(args) -> int:
    cfg = _load_cfg(args, "activation_sweep")
    specs = [cfg.activation] if (args.activation or args.beta is not None or args.k is not None) else [parse_activation(s) for s in cfg.sweep]
    rows = []
    for spec in specs:
        rep = act.curvature(spec)
        rows.append((str(spec), rep.max_curvature, rep.argmax_x, rep.exact))
        print(f"{str(spec):20s} curvature {rep.max_curvature:.6g} at x = {rep.argmax_x:.6g} ({'exact' if rep.exact else 'approximate'})")
    _write_rows(Path(cfg.out_dir) / "curvature.csv", ["activation", "curvature", "argmax_x", "exact"], rows)
    return 0


def cmd_hessian_report(args) -> int:
    cfg = _load_cfg(args, "hessian_report")
    cfg = dataclasses.replace(cfg, preset="hessian_report")
    res = run_preset("hessian_report", cfg)
    for r in res["rows"]:
        print(f"{r[0]:20s} seed {r[1]} median nu {r[5]:.6g}")
    return 1 if res["failures"] else 0


def cmd_lemma1(args) -> int:
    cfg = _load_cfg(args, "lemma1_verify")
    cfg = dataclasses.replace(cfg, preset="lemma1_verify")
    res = run_preset("lemma1_verify", cfg)
    print(f"sandwich holds on {res['passed']}/{res['total']} cases")
    return 0 if res["passed"] == res["total"] else 1


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args, args.preset)
    res = run_preset(args.preset, cfg)
    if "failures" in res:
        for key, seed, err in res["failures"]:
            print(f"FAILED {key} seed {seed}: {err}")
    print(f"manifest: {res['manifest']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curvlab", description="Activation curvature and adversarial training experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--activation", help="e.g. silu, lisht, pswish:beta=2, leakyrelu:k=0.3")
        sp.add_argument("--beta", type=float, help="use PSwish with this beta")
        sp.add_argument("--k", type=float, help="use LeakyReLU with this negative slope")
        sp.add_argument("--epsilon", type=float, help="l-inf radius for training and evaluation")
        sp.add_argument("--seed", type=int, help="run a single seed")
        sp.add_argument("--out", help="output directory")
        return sp

    common(sub.add_parser("train", help="one adversarial-training run")).set_defaults(func=cmd_train)
    sp = common(sub.add_parser("attack", help="FGSM and PGD against a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_attack)
    common(sub.add_parser("curvature", help="maximum second derivative of activations")).set_defaults(func=cmd_curvature)
    common(sub.add_parser("hessian-report", help="input-Hessian top eigenvalues of trained models")).set_defaults(func=cmd_hessian_report)
    common(sub.add_parser("lemma1-verify", help="check robustness bounds on random quadratics")).set_defaults(func=cmd_lemma1)
    sp = common(sub.add_parser("sweep", help="run a preset"))
    sp.add_argument("preset", choices=PRESETS)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CurvlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
