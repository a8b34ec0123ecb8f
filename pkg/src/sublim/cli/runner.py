"""Stage orchestration, per-seed records, aggregates, sweeps and figure tables.

Output layout of one experiment directory::

    config.toml              resolved config (re-runnable as is)
    records/seed-<s>.json    one RunRecord per seed (deterministic bytes)
    aggregate.json           mean / SEM / N per metric over seeds
    summary.csv              the same, one row per metric
    timings.json             wall-clock seconds per seed (kept apart so the
                             metric files stay byte-identical across reruns)

Checkpoints live in a content-addressed cache: the file name is a hash of
everything that determines the stage (model, data subset, hyperparameters,
seed and the upstream checkpoint), so sweeps that share a base or teacher
stage reuse it instead of retraining.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import checkpoint as ckpt_io
from .. import diagnostics as dg
from ..checkpoint import init_checkpoint
from ..data import LabeledSet, load_task, make_noise, poison_pair, take_train_subset
from ..errors import ConfigError, DataError, UndefinedChiError, UndefinedRatioError
from ..training import distill_aux, distill_task, poison_teacher, train_base_joint, train_teacher_aux
from .config import ExperimentConfig, axis_value

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("teacher_metric", "student_metric", "transmission", "teacher_drift", "chi")
FIGURE_COLUMNS = ("panel", "axis", "value", "metric", "mean", "sem", "n")


# -- checkpoint cache ----------------------------------------------------------------

def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def fingerprint(data: LabeledSet) -> str:
    h = hashlib.sha256(np.ascontiguousarray(data.inputs).tobytes())
    h.update(np.ascontiguousarray(data.labels).tobytes())
    return h.hexdigest()[:16]


class CheckpointCache:
    """Directory of checkpoints keyed by a hash of their provenance."""

    def __init__(self, root):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def path(self, key: str) -> Path:
        return self.root / f"{key}.ckpt"

    def get_or_create(self, provenance: dict, build) -> tuple:
        key = _digest(provenance)
        path = self.path(key)
        if path.exists():
            self.hits += 1
            return ckpt_io.load(path), key
        self.misses += 1
        ck = build()
        ckpt_io.save(ck, path)
        return ck, key


# -- records -----------------------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    seed: int
    protocol: str
    metrics: dict
    chi_reports: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)
    wall_time: float = 0.0
    vectors: dict = field(default_factory=dict, repr=False)  # reconstructed drifts, not serialized

    def to_dict(self, include_timing=False) -> dict:
        d = {"config_hash": self.config_hash, "seed": self.seed, "protocol": self.protocol,
             "metrics": self.metrics, "chi_reports": self.chi_reports,
             "checkpoints": self.checkpoints, "notes": self.notes}
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(d["config_hash"], d["seed"], d["protocol"], d["metrics"], d.get("chi_reports", {}),
                   d.get("checkpoints", {}), d.get("notes", {}), d.get("wall_time", 0.0))


def aggregate(records) -> dict:
    """Mean, standard error of the mean and N per metric; undefined values are skipped."""
    records = list(records)
    if not records:
        raise ConfigError("cannot aggregate an empty record set")
    names = sorted({k for r in records for k in r.metrics})
    out = {}
    for name in names:
        vals = [r.metrics[name] for r in records if r.metrics.get(name) is not None]
        n = len(vals)
        if n == 0:
            out[name] = {"mean": None, "sem": None, "n": 0}
            continue
        arr = np.array(vals, dtype=np.float64)
        sem = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else None
        out[name] = {"mean": float(arr.mean()), "sem": sem, "n": n}
    return out


# -- data ----------------------------------------------------------------------------------

class DataBank:
    """Loads each (task, split) once and hands out seeded subsets."""

    def __init__(self, root=None):
        self.root = root or None
        self._full = {}

    def full(self, task, split) -> LabeledSet:
        if (task, split) not in self._full:
            self._full[task, split] = load_task(task, split, self.root)
        return self._full[task, split]

    def train(self, task, n, seed) -> LabeledSet:
        return take_train_subset(self.full(task, "train"), n, seed)

    def test(self, task, n) -> LabeledSet:
        full = self.full(task, "test")
        return take_train_subset(full, min(n, len(full)), 0, purpose="test")


def _ratio(student, teacher, notes, name="transmission"):
    try:
        return dg.transmission_ratio(student, teacher)
    except UndefinedRatioError as exc:
        notes[name] = str(exc)
        return None


def _chi_summary(rep: dg.ChiReport) -> dict:
    return rep.to_dict(include_vector=False)


# -- one seed --------------------------------------------------------------------------

def run_seed(cfg: ExperimentConfig, seed: int, cache: CheckpointCache, bank: DataBank) -> RunRecord:
    t0 = time.perf_counter()
    model = cfg.model_handle()
    pcfg = cfg.protocol_config()
    tr = cfg.training
    base_prov = {"model": cfg.model_config(), "seed": seed}
    init, init_key = cache.get_or_create(dict(base_prov, stage="init"),
                                         lambda: init_checkpoint(model, seed))
    mnist = bank.train("mnist", cfg.data.n_train, seed)
    mnist_test = bank.test("mnist", cfg.data.n_test)
    record = RunRecord(cfg.content_hash(), seed, cfg.experiment.protocol, {}, checkpoints={"init": init_key})
    vectors = record.vectors
    if cfg.experiment.protocol == "aux":
        _run_aux(cfg, seed, model, pcfg, tr, cache, init, init_key, mnist, mnist_test, record, vectors)
    else:
        fashion = bank.train("fashion", cfg.data.n_train, seed)
        fashion_test = bank.test("fashion", cfg.data.n_test)
        _run_task(cfg, seed, model, pcfg, tr, cache, init, init_key, mnist, mnist_test, fashion,
                  fashion_test, record, vectors)
    record.wall_time = time.perf_counter() - t0
    return record


def _run_aux(cfg, seed, model, pcfg, tr, cache, init, init_key, mnist, mnist_test, record, vectors):
    mb = model.layout.block("mnist")
    fp = fingerprint(mnist)
    teacher, t_key = cache.get_or_create(
        {"stage": "teacher", "init": init_key, "data": fp, "lr": tr.teacher_lr,
         "epochs": tr.teacher_epochs, "batch": tr.batch_size},
        lambda: train_teacher_aux(init, mnist, pcfg, seed, model))
    noise = cfg.noise_spec()
    student, s_key = cache.get_or_create(
        {"stage": "student", "teacher": t_key, "noise": noise.__dict__, "lr": tr.student_lr,
         "epochs": tr.student_epochs},
        lambda: distill_aux(init, teacher, noise, pcfg, seed, model))
    record.checkpoints.update(teacher=t_key, student=s_key)
    m = record.metrics
    m["teacher_mnist_acc"] = dg.accuracy(model, teacher.params, mnist_test, mb)
    m["student_mnist_acc"] = dg.accuracy(model, student.params, mnist_test, mb)
    m["init_mnist_acc"] = dg.accuracy(model, init.params, mnist_test, mb)
    m["transmission"] = _ratio(m["student_mnist_acc"], m["teacher_mnist_acc"], record.notes)
    m["teacher_drift"] = dg.drift_norm(init, teacher)
    m["student_drift"] = dg.drift_norm(init, student)
    m["teacher_metric"], m["student_metric"] = m["teacher_mnist_acc"], m["student_mnist_acc"]
    if cfg.diagnostics.chi_aux:
        d = cfg.diagnostics
        xs = make_noise(noise, seed, 0)
        try:
            rep = dg.chi_aux(init, teacher, xs, mnist, d.lam, d.cg_tol, d.cg_max_iters, model)
            record.chi_reports["chi_aux"] = _chi_summary(rep)
            vectors["chi_aux"] = rep.delta_theta_pub
            m["chi_aux"], m["chi_aux_norm_visibility"] = rep.chi, rep.norm_visibility
            m["chi"] = rep.chi
        except UndefinedChiError as exc:
            record.notes["chi_aux"] = str(exc)
            m["chi_aux"] = m["chi"] = None


def _run_task(cfg, seed, model, pcfg, tr, cache, init, init_key, mnist, mnist_test, fashion,
              fashion_test, record, vectors):
    mb, fb = model.layout.block("mnist"), model.layout.block("fashion")
    pair = cfg.poison_spec()
    data_fp = {"mnist": fingerprint(mnist), "fashion": fingerprint(fashion)}
    base, b_key = cache.get_or_create(
        {"stage": "clean_base", "init": init_key, "data": data_fp, "lr": tr.base_lr,
         "epochs": tr.base_epochs, "batch": tr.batch_size},
        lambda: train_base_joint(init, mnist, fashion, pcfg, seed, model))
    poisoned = poison_pair(fashion, pair)
    teacher_prov = {"stage": "poison_teacher", "base": b_key, "lr": tr.teacher_lr,
                    "epochs": tr.teacher_epochs, "batch": tr.batch_size}
    teacher, t_key = cache.get_or_create(
        dict(teacher_prov, pair=[pair.class_a, pair.class_b]),
        lambda: poison_teacher(base, poisoned, mnist, pcfg, seed, model))
    student_prov = {"stage": "student", "base": b_key, "lr": tr.student_lr,
                    "epochs": tr.student_epochs, "batch": tr.batch_size}
    student, s_key = cache.get_or_create(dict(student_prov, teacher=t_key),
                                         lambda: distill_task(base, teacher, mnist, pcfg, seed, model))
    record.checkpoints.update(clean_base=b_key, poison_teacher=t_key, student=s_key)
    m = record.metrics
    for tag, ck in (("base", base), ("teacher", teacher), ("student", student)):
        m[f"{tag}_mnist_acc"] = dg.accuracy(model, ck.params, mnist_test, mb)
        m[f"{tag}_fashion_acc"] = dg.accuracy(model, ck.params, fashion_test, fb)
        m[f"{tag}_flip"] = dg.pooled_flip_rate(model, ck.params, fashion_test, pair)
    m["transmission"] = _ratio(m["student_flip"], m["teacher_flip"], record.notes)
    m["teacher_drift"] = dg.drift_norm(base, teacher)
    m["student_drift"] = dg.drift_norm(base, student)
    m["teacher_metric"], m["student_metric"] = m["teacher_flip"], m["student_flip"]
    d = cfg.diagnostics
    if d.control:
        control, c_key = cache.get_or_create(
            dict(teacher_prov, pair=None),
            lambda: poison_teacher(base, fashion, mnist, pcfg, seed, model))
        c_student, cs_key = cache.get_or_create(
            dict(student_prov, teacher=c_key),
            lambda: distill_task(base, control, mnist, pcfg, seed, model))
        record.checkpoints.update(control_teacher=c_key, control_student=cs_key)
        m["control_teacher_flip"] = dg.pooled_flip_rate(model, control.params, fashion_test, pair)
        m["control_student_flip"] = dg.pooled_flip_rate(model, c_student.params, fashion_test, pair)
    probes = []
    if d.chi:
        probes.append(("chi", mnist))
    if d.sampled_chi:
        probes.append(("sampled_chi", mnist.subset(np.arange(d.probe_size))))
    for name, public in probes:
        prefix = "" if name == "chi" else "sampled_"
        try:
            rep = dg.task_chi(base, teacher, public, fashion, pair, d.lam, d.cg_tol, d.cg_max_iters, model)
        except UndefinedChiError as exc:
            record.notes[name] = str(exc)
            m[name] = m[f"{prefix}norm_visibility"] = None
            continue
        record.chi_reports[name] = _chi_summary(rep)
        vectors[name] = rep.delta_theta_pub
        m[name], m[f"{prefix}norm_visibility"] = rep.chi, rep.norm_visibility
        if not rep.converged:
            record.notes[f"{name}_cg"] = (f"CG stopped after {rep.cg_iters} iterations at relative "
                                          f"residual {rep.cg_residual:.3e}")


# -- experiments ------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    aggregate: dict
    out_dir: Path | None = None


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _summary_rows(agg: dict):
    return [{"metric": k, "mean": v["mean"], "sem": v["sem"], "n": v["n"]} for k, v in agg.items()]


def _write_csv(path: Path, rows, columns):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in columns})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def resolve_cache(cfg: ExperimentConfig, out_dir: Path | None) -> CheckpointCache:
    if cfg.experiment.cache_dir:
        return CheckpointCache(cfg.experiment.cache_dir)
    base = out_dir if out_dir is not None else Path(cfg.experiment.out_dir)
    return CheckpointCache(base / "cache")


def run_experiment(cfg: ExperimentConfig, out_dir=None, cache: CheckpointCache | None = None,
                   bank: DataBank | None = None, write=True) -> ExperimentResult:
    """Run every seed of ``cfg`` and write records, aggregate and summary under ``out_dir``."""
    out = Path(out_dir) if out_dir is not None else Path(cfg.experiment.out_dir)
    cache = cache or resolve_cache(cfg, out)
    bank = bank or DataBank(cfg.data.root or None)
    records = []
    for seed in cfg.experiment.seeds:
        log.info("%s: seed %d", cfg.experiment.name, seed)
        records.append(run_seed(cfg, seed, cache, bank))
    agg = aggregate(records)
    if write:
        _write(out / "config.toml", cfg.to_toml())
        for r in records:
            _write(out / "records" / f"seed-{r.seed}.json", r.to_json())
        _write(out / "aggregate.json", json.dumps(agg, sort_keys=True, indent=2) + "\n")
        _write_csv(out / "summary.csv", _summary_rows(agg), ("metric", "mean", "sem", "n"))
        _write(out / "timings.json",
               json.dumps({str(r.seed): r.wall_time for r in records}, sort_keys=True, indent=2) + "\n")
    return ExperimentResult(cfg, records, agg, out if write else None)


def load_result(out_dir) -> ExperimentResult:
    """Read an experiment directory back (config, records, aggregate)."""
    out = Path(out_dir)
    if not (out / "config.toml").exists():
        raise DataError(f"{out} is not an experiment directory (no config.toml)")
    cfg = ExperimentConfig.load(out / "config.toml")
    recs = [RunRecord.from_dict(json.loads(p.read_text()))
            for p in sorted((out / "records").glob("seed-*.json"))]
    if not recs:
        raise DataError(f"{out} holds no per-seed records")
    recs.sort(key=lambda r: cfg.experiment.seeds.index(r.seed) if r.seed in cfg.experiment.seeds else r.seed)
    agg = json.loads((out / "aggregate.json").read_text()) if (out / "aggregate.json").exists() \
        else aggregate(recs)
    return ExperimentResult(cfg, recs, agg, out)


def run_sweep(cfg: ExperimentConfig, axis: str, values, out_dir=None, bank=None) -> list:
    """One experiment per axis value, sharing a checkpoint cache; returns the table rows."""
    values = list(values)
    if not values:
        raise ConfigError("a sweep needs at least one value")
    axis_value(cfg, axis)  # validates the axis name
    out = Path(out_dir) if out_dir is not None else Path(cfg.experiment.out_dir)
    cache = resolve_cache(cfg, out)
    bank = bank or DataBank(cfg.data.root or None)
    rows = []
    for i, value in enumerate(values):
        sub = cfg.replace(**{axis: value})
        res = run_experiment(sub, out / f"point-{i:03d}", cache=cache, bank=bank)
        row = {"axis": axis, "value": value, "n": len(res.records)}
        for col in SWEEP_COLUMNS:
            a = res.aggregate.get(col, {"mean": None, "sem": None})
            row[f"{col}_mean"], row[f"{col}_sem"] = a["mean"], a["sem"]
        rows.append(row)
    columns = ["axis", "value", "n"] + [f"{c}_{s}" for c in SWEEP_COLUMNS for s in ("mean", "sem")]
    _write_csv(out / "sweep.csv", rows, columns)
    return rows


def emit_figure_data(results, metrics=("chi", "transmission"), panel="figure", axis="model",
                     labels=None, path=None) -> list:
    """Tidy rows ``(panel, axis, value, metric, mean, sem, n)``, one per point and metric.

    ``results`` are :class:`ExperimentResult` objects (or directories); each
    becomes one point labelled by ``labels[i]`` or its experiment name.
    """
    results = [load_result(r) if isinstance(r, (str, Path)) else r for r in results]
    if not results:
        raise ConfigError("emit_figure_data needs at least one experiment result")
    if labels is not None and len(labels) != len(results):
        raise ConfigError(f"{len(labels)} labels for {len(results)} results")
    rows = []
    for i, res in enumerate(results):
        label = labels[i] if labels is not None else res.config.experiment.name
        agg = aggregate(res.records)
        for metric in metrics:
            a = agg.get(metric, {"mean": None, "sem": None, "n": 0})
            rows.append({"panel": panel, "axis": axis, "value": label, "metric": metric,
                         "mean": a["mean"], "sem": a["sem"], "n": a["n"]})
    if path is not None:
        _write_csv(Path(path), rows, FIGURE_COLUMNS)
    return rows
