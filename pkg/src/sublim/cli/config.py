"""Experiment configuration: TOML in, validated dataclasses, TOML out.

A config file has one table per section::

    [experiment]   name, protocol ("aux" | "task"), seeds, out_dir, cache_dir
    [model]        kind ("mlp" | "cnn" | "qnn") and its architecture fields
    [data]         n_train, n_test, root
    [training]     learning rates, epochs, batch_size
    [noise]        public noise for the aux channel
    [poison]       class pair for the task channel
    [diagnostics]  chi / chi_aux / sampled_chi toggles and solver settings

Every field has a default, so a file only needs to name what differs.
Sweep axes are addressed as ``section.field`` (``training.teacher_lr``,
``model.depth``).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli_w

from ..base import model_from_config
from ..data import FASHION_CLASSES, NoiseSpec, PoisonSpec
from ..errors import ConfigError, SublimError
from ..training import ProtocolConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PROTOCOLS = ("aux", "task")
MODEL_KINDS = ("mlp", "cnn", "qnn")


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "experiment"
    protocol: str = "aux"
    seeds: tuple = (0,)
    out_dir: str = "runs"
    cache_dir: str = ""


@dataclass(frozen=True)
class ModelSection:
    kind: str = "mlp"
    layer_sizes: tuple = ()
    filters: int = 1
    depth: int = 2
    num_qubits: int = 10
    measured_qubits: int = 0
    init_scale: float = 1.0


@dataclass(frozen=True)
class DataSection:
    n_train: int = 1000
    n_test: int = 2000
    root: str = ""


@dataclass(frozen=True)
class TrainingSection:
    teacher_lr: float = 3e-4
    student_lr: float = 3e-4
    base_lr: float = 3e-4
    teacher_epochs: int = 3
    student_epochs: int = 5
    base_epochs: int = 5
    batch_size: int = 64


@dataclass(frozen=True)
class NoiseSection:
    kind: str = ""
    batches: int = 100
    batch_size: int = 1024
    resample: str = "fixed"


@dataclass(frozen=True)
class PoisonSection:
    class_a: int = 1
    class_b: int = 5


@dataclass(frozen=True)
class DiagnosticsSection:
    chi: bool = False
    chi_aux: bool = False
    sampled_chi: bool = False
    control: bool = True
    lam: float = 1e-6
    cg_tol: float = 1e-8
    cg_max_iters: int = 500
    probe_size: int = 16


SECTIONS = {
    "experiment": ExperimentSection,
    "model": ModelSection,
    "data": DataSection,
    "training": TrainingSection,
    "noise": NoiseSection,
    "poison": PoisonSection,
    "diagnostics": DiagnosticsSection,
}


def _coerce(section: str, name: str, value, default):
    where = f"{section}.{name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of integers, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _build_section(section: str, raw) -> object:
    cls = SECTIONS[section]
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"[{section}]: unknown field(s) {', '.join(unknown)}; "
                          f"allowed: {', '.join(known)}")
    defaults = cls()
    kw = {k: _coerce(section, k, v, getattr(defaults, k)) for k, v in raw.items()}
    return cls(**kw)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    present: frozenset = field(default=frozenset(), compare=False, repr=False)

    def __post_init__(self):
        self.validate()

    # -- construction --------------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a table of sections")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown section(s) {', '.join(unknown)}; allowed: {', '.join(SECTIONS)}")
        kw = {name: _build_section(name, doc.get(name, {})) for name in SECTIONS}
        return cls(**kw, present=frozenset(k for k in doc if k in ("noise", "poison")))

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_toml(path.read_text())

    def to_dict(self) -> dict:
        """Plain-table form; sections that do not apply to the protocol are left out."""
        out = {}
        for name in SECTIONS:
            if name == "noise" and self.experiment.protocol != "aux":
                continue
            if name == "poison" and self.experiment.protocol != "task":
                continue
            sec = getattr(self, name)
            out[name] = {f.name: (list(v) if isinstance(v, tuple) else v)
                         for f in fields(sec) for v in [getattr(sec, f.name)]}
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with ``section.field`` overrides, e.g. ``{"training.teacher_lr": 1e-3}``."""
        doc = self.to_dict()
        for key, value in overrides.items():
            section, name = split_axis(key)
            doc.setdefault(section, {})[name] = list(value) if isinstance(value, tuple) else value
        return ExperimentConfig.from_dict(doc)

    # -- validation ----------------------------------------------------------
    def validate(self) -> None:
        e, m, d, t = self.experiment, self.model, self.data, self.training
        if e.protocol not in PROTOCOLS:
            raise ConfigError(f"experiment.protocol: must be one of {PROTOCOLS}, got {e.protocol!r}")
        if not e.seeds:
            raise ConfigError("experiment.seeds: at least one seed is required")
        if any(s < 0 or s >= 2**64 for s in e.seeds):
            raise ConfigError("experiment.seeds: seeds must be unsigned 64-bit integers")
        if len(set(e.seeds)) != len(e.seeds):
            raise ConfigError("experiment.seeds: duplicate seeds")
        if m.kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind: must be one of {MODEL_KINDS}, got {m.kind!r}")
        if m.kind == "cnn" and e.protocol != "task":
            raise ConfigError("model.kind: the MicroCNN control only exists for the task protocol")
        if m.kind == "mlp":
            want = 16 if e.protocol == "aux" else 20
            if len(m.layer_sizes) < 2 or m.layer_sizes[0] != 784 or m.layer_sizes[-1] != want:
                raise ConfigError(f"model.layer_sizes: must run 784 -> ... -> {want} for the "
                                  f"{e.protocol} protocol, got {list(m.layer_sizes)}")
        if m.kind == "qnn":
            want = 4 if e.protocol == "aux" else 5
            if m.measured_qubits not in (0, want):
                raise ConfigError(f"model.measured_qubits: the {e.protocol} protocol reads {want} qubits, "
                                  f"got {m.measured_qubits}")
        for name in ("n_train", "n_test"):
            if getattr(d, name) < 1:
                raise ConfigError(f"data.{name}: must be positive")
        for name in ("teacher_lr", "student_lr", "base_lr"):
            if not getattr(t, name) > 0:
                raise ConfigError(f"training.{name}: must be positive")
        for name in ("teacher_epochs", "student_epochs", "base_epochs"):
            if getattr(t, name) < 0:
                raise ConfigError(f"training.{name}: must be non-negative")
        if t.batch_size < 1:
            raise ConfigError("training.batch_size: must be positive")
        if e.protocol == "aux" and "poison" in self.present:
            raise ConfigError("poison: the aux protocol takes no poison pair")
        if e.protocol == "task" and "noise" in self.present:
            raise ConfigError("noise: the task protocol uses MNIST inputs as its public set, not noise")
        if e.protocol == "aux":
            try:
                self.noise_spec()
            except ConfigError as exc:
                raise ConfigError(f"noise: {exc}") from None
        else:
            try:
                self.poison_spec()
            except ConfigError as exc:
                raise ConfigError(f"poison: {exc}") from None
        dg = self.diagnostics
        if dg.chi and e.protocol != "task":
            raise ConfigError("diagnostics.chi: the task-channel chi needs protocol = \"task\"")
        if dg.sampled_chi and e.protocol != "task":
            raise ConfigError("diagnostics.sampled_chi: needs protocol = \"task\"")
        if dg.chi_aux and e.protocol != "aux":
            raise ConfigError("diagnostics.chi_aux: needs protocol = \"aux\"")
        if not dg.lam > 0:
            raise ConfigError("diagnostics.lam: ridge lambda must be positive")
        if not dg.cg_tol > 0 or dg.cg_max_iters < 1:
            raise ConfigError("diagnostics.cg_tol / cg_max_iters: must be positive")
        if dg.probe_size < 1 or dg.probe_size > d.n_train:
            raise ConfigError(f"diagnostics.probe_size: must lie in [1, data.n_train={d.n_train}]")
        try:
            self.model_handle()
        except SublimError as exc:
            raise ConfigError(f"model: {exc}") from None

    # -- derived objects -----------------------------------------------------
    def model_config(self) -> dict:
        m, proto = self.model, self.experiment.protocol
        if m.kind == "mlp":
            return {"kind": "mlp", "layer_sizes": list(m.layer_sizes)}
        if m.kind == "cnn":
            return {"kind": "cnn", "filters": m.filters}
        return {"kind": "qnn", "depth": m.depth, "protocol": proto, "num_qubits": m.num_qubits,
                "measured_qubits": m.measured_qubits or (4 if proto == "aux" else 5),
                "log_floor": 1e-12, "init_scale": m.init_scale}

    def model_handle(self):
        return model_from_config(self.model_config())

    def noise_spec(self) -> NoiseSpec:
        n = self.noise
        kind = n.kind or ("gaussian_state1024" if self.model.kind == "qnn" else "uniform784")
        return NoiseSpec(kind, n.batches, n.batch_size, n.resample)

    def poison_spec(self) -> PoisonSpec:
        return PoisonSpec(self.poison.class_a, self.poison.class_b)

    def protocol_config(self) -> ProtocolConfig:
        t = self.training
        kw = dataclasses.asdict(t)
        if self.experiment.protocol == "aux":
            kw["noise"] = self.noise_spec()
        return ProtocolConfig(**kw)

    def pair_names(self) -> tuple:
        return FASHION_CLASSES[self.poison.class_a], FASHION_CLASSES[self.poison.class_b]

    def content_hash(self) -> str:
        """Hash of everything that determines results (seeds and paths excluded)."""
        doc = self.to_dict()
        doc["experiment"] = {"protocol": self.experiment.protocol}
        doc["data"] = {k: v for k, v in doc["data"].items() if k != "root"}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def split_axis(key: str) -> tuple:
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"axis {key!r} must be 'section.field' with section in {', '.join(SECTIONS)}")
    if name not in {f.name for f in fields(SECTIONS[section])}:
        raise ConfigError(f"axis {key!r}: [{section}] has no field {name!r}")
    return section, name


def axis_value(cfg: ExperimentConfig, key: str):
    section, name = split_axis(key)
    return getattr(getattr(cfg, section), name)
