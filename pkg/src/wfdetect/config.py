"""Run configuration: INI parsing, validation and named seed substreams.

Sections (all optional):

``[workflow]``      scalar workflow settings (``dt``, ``vehicle_mass`` ...) and
                    module reference parameters as ``Module.param = value``
``[perturbations]`` ``Module.param = relative_delta``; absent section means the
                    default test case (Battery resistance and Motor torque +10%)
``[cycle]``         ``source`` (default | random | path to CSV), ``length``
``[doe]``           ``design``, ``segment_length``, ``ordering``, ``seed``
``[method]``        detection settings, see :class:`RunConfig`
``[simulate]``      ``tables``: any of T0, T1, T0_DoE, T1_DoEbar
"""

from __future__ import annotations

import configparser
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import sim_workflow
from .mixed_dmd import PenaltyWeights
from .sim_workflow import DrivingCycle, WorkflowConfig
from .table import DataTable


class ConfigError(ValueError):
    pass


METHODS = ("mixed", "nodyn", "dmdc", "baseline")
NORMS = ("l1", "l2")
ORDERINGS = ("sequential", "random")
DESIGNS = ("full_factorial",)
TABLES = ("T0", "T1", "T0_DoE", "T1_DoEbar")
PRIORS = ("identity", "zero")


def substream_seed(seed: int, name: str) -> int:
    """Deterministic child seed for a named component."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class RunConfig:
    workflow_settings: dict = field(default_factory=dict)
    module_params: dict = field(default_factory=dict)          # "Module.param" -> value
    perturbations: list = field(default_factory=lambda: [list(p) for p in sim_workflow.CASE_PERTURBATIONS])
    cycle_source: str = "default"
    cycle_length: int = 5960
    design: str = "full_factorial"
    segment_length: int = 20
    ordering: str = "sequential"
    doe_seed: int | None = None
    method: str = "nodyn"
    p_eps: float = 10.0
    p_a: float = 0.01
    p_term: dict = field(default_factory=lambda: {1: 0.02, 2: 0.04})
    norm: str = "l2"
    prior: str = "identity"
    w_ref: float = 10.0
    subset_size: int = 2
    embedding: bool = True
    latent_dim: str = "auto"
    max_latent_dim: int = 6
    r2_threshold: float = 0.99
    epochs: int = 2000
    train_stride: int = 4
    alpha: float = 0.1
    interaction_order: int = 2
    bonferroni: bool = False
    corr_threshold: float = 0.98
    matrix_floor: float = 5e-3
    criterion: str = "battery_energy_losses"
    max_interaction_order: int = 2
    tables: list = field(default_factory=lambda: list(TABLES))
    seed: int = 0
    out: str = "run"
    source: str | None = None

    # -- derived objects ------------------------------------------------------

    def weights(self) -> PenaltyWeights:
        return PenaltyWeights(self.p_eps, self.p_a, dict(self.p_term))

    def workflow(self) -> WorkflowConfig:
        base = sim_workflow.default_config(**self.workflow_settings)
        params = {m.name: dict(m.params_ref) for m in base.modules}
        for key, value in self.module_params.items():
            module, param = key.split(".", 1)
            params[module][param] = value
        modules = tuple(replace(m, params_ref=params[m.name], params_updated=dict(params[m.name]))
                        for m in base.modules)
        return sim_workflow.build_w1(replace(base, modules=modules),
                                     [tuple(p) for p in self.perturbations])

    def cycle(self) -> DrivingCycle:
        dt = self.workflow().dt
        if self.cycle_source == "default":
            return sim_workflow.default_cycle(self.cycle_length, dt)
        if self.cycle_source == "random":
            rng = np.random.default_rng(self.seeds()["cycle"])
            return sim_workflow.random_cycle(rng, self.cycle_length, dt)
        table = DataTable.from_csv(self.cycle_source)
        if sim_workflow.IMPOSED not in table:
            raise ConfigError(f"{self.cycle_source}: no {sim_workflow.IMPOSED} column")
        return DrivingCycle(table[sim_workflow.IMPOSED], dt)

    def seeds(self) -> dict[str, int]:
        return {
            "schedule": self.doe_seed if self.doe_seed is not None
            else substream_seed(self.seed, "schedule"),
            "embedding-init": substream_seed(self.seed, "embedding-init"),
            "cycle": substream_seed(self.seed, "cycle"),
        }

    # -- bookkeeping ----------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        d.pop("out")
        d["p_term"] = {str(k): v for k, v in self.p_term.items()}
        return d

    def digest(self) -> str:
        """Hash of every setting that affects results (the output directory does not)."""
        d = self.to_dict()
        if self.cycle_source not in ("default", "random"):
            d["cycle_sha256"] = hashlib.sha256(Path(self.cycle_source).read_bytes()).hexdigest()
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> "RunConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.method in METHODS, f"method must be one of {METHODS}, got {self.method!r}")
        need(self.norm in NORMS, f"norm must be one of {NORMS}, got {self.norm!r}")
        need(self.prior in PRIORS, f"prior must be one of {PRIORS}, got {self.prior!r}")
        need(self.ordering in ORDERINGS, f"ordering must be one of {ORDERINGS}, got {self.ordering!r}")
        need(self.design in DESIGNS, f"design must be one of {DESIGNS}, got {self.design!r}")
        need(self.segment_length >= 1, "segment_length must be >= 1")
        need(self.cycle_length >= 2, "cycle length must be >= 2")
        need(0.0 < self.alpha < 1.0, "alpha must lie in (0, 1)")
        need(0.0 < self.r2_threshold <= 1.0, "r2_threshold must lie in (0, 1]")
        need(0.0 < self.corr_threshold <= 1.0, "corr_threshold must lie in (0, 1]")
        need(self.matrix_floor >= 0.0, "matrix_floor must be >= 0")
        need(self.subset_size >= 1, "subset_size must be >= 1")
        need(self.interaction_order >= 1, "interaction_order must be >= 1")
        need(self.max_interaction_order >= 1, "max_interaction_order must be >= 1")
        need(self.epochs >= 1 and self.train_stride >= 1 and self.max_latent_dim >= 1,
             "epochs, train_stride and max_latent_dim must be >= 1")
        need(self.latent_dim == "auto" or (self.latent_dim.isdigit() and int(self.latent_dim) >= 1),
             f"latent_dim must be 'auto' or a positive integer, got {self.latent_dim!r}")
        need(set(self.tables) <= set(TABLES) and self.tables, f"tables must be a subset of {TABLES}")
        from .baselines import CRITERIA
        need(self.criterion in CRITERIA, f"criterion must be one of {sorted(CRITERIA)}")
        if self.cycle_source not in ("default", "random"):
            need(Path(self.cycle_source).is_file(), f"cycle file not found: {self.cycle_source}")
        try:
            self.weights()
        except ValueError as exc:
            raise ConfigError(f"penalty weights: {exc}") from None
        try:
            wf = self.workflow()
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"workflow: {exc}") from None
        need(self.subset_size <= wf.m, "subset_size exceeds the number of modules")
        return self


_INT = {"segment_length", "subset_size", "max_latent_dim", "epochs", "train_stride",
        "interaction_order", "max_interaction_order", "length"}
_FLOAT = {"p_eps", "p_a", "w_ref", "r2_threshold", "alpha", "corr_threshold", "matrix_floor"}
_BOOL = {"embedding", "bonferroni"}
_KNOWN = {
    "cycle": {"source", "length"},
    "doe": {"design", "segment_length", "ordering", "seed"},
    "method": {"mode", "p_eps", "p_a", "p_term", "norm", "prior", "w_ref", "subset_size",
               "embedding", "latent_dim", "max_latent_dim", "r2_threshold", "epochs",
               "train_stride", "alpha", "interaction_order", "bonferroni", "corr_threshold",
               "matrix_floor", "criterion", "max_interaction_order"},
    "simulate": {"tables"},
}
_WORKFLOW_SCALARS = {"dt": float, "vehicle_mass": float, "wheel_radius": float, "gravity": float,
                     "air_density": float, "initial_soc": float, "regen": bool}


def _parse_bool(section, key, text) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: not a boolean: {text!r}")


def _number(section, key, text, kind):
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {kind.__name__}, got {text!r}") from None


def _module_key(section, key) -> str:
    if "." not in key:
        raise ConfigError(f"[{section}] {key}: expected Module.parameter")
    return key


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Parse an INI file (or nothing) into a validated :class:`RunConfig`."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg.source = str(path)
        _apply(cfg, parser, path.parent)
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def _apply(cfg: RunConfig, parser: configparser.ConfigParser, base: Path) -> None:
    for section in parser.sections():
        if section not in _KNOWN and section not in ("workflow", "perturbations"):
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(parser[section]) - _KNOWN.get(section, set(parser[section]))
        if unknown:
            raise ConfigError(f"[{section}] unknown keys {sorted(unknown)}")

    if parser.has_section("workflow"):
        for key, text in parser["workflow"].items():
            if key in _WORKFLOW_SCALARS:
                kind = _WORKFLOW_SCALARS[key]
                cfg.workflow_settings[key] = (_parse_bool("workflow", key, text) if kind is bool
                                              else _number("workflow", key, text, kind))
            else:
                cfg.module_params[_module_key("workflow", key)] = _number("workflow", key, text, float)
    if parser.has_section("perturbations"):
        cfg.perturbations = [
            [*_module_key("perturbations", k).split(".", 1), _number("perturbations", k, v, float)]
            for k, v in parser["perturbations"].items()]
    if parser.has_section("cycle"):
        sec = parser["cycle"]
        if "source" in sec:
            src = sec["source"].strip()
            if src not in ("default", "random"):
                p = Path(src)
                src = str(p if p.is_absolute() else base / p)
            cfg.cycle_source = src
        if "length" in sec:
            cfg.cycle_length = _number("cycle", "length", sec["length"], int)
    if parser.has_section("doe"):
        sec = parser["doe"]
        cfg.design = sec.get("design", cfg.design).strip()
        cfg.ordering = sec.get("ordering", cfg.ordering).strip()
        if "segment_length" in sec:
            cfg.segment_length = _number("doe", "segment_length", sec["segment_length"], int)
        if "seed" in sec and sec["seed"].strip().lower() not in ("", "auto"):
            cfg.doe_seed = _number("doe", "seed", sec["seed"], int)
    if parser.has_section("method"):
        for key, text in parser["method"].items():
            if key == "mode":
                cfg.method = text.strip()
            elif key == "p_term":
                try:
                    ws = [float(x) for x in text.replace(",", " ").split()]
                except ValueError:
                    raise ConfigError(f"[method] p_term: not a list of numbers: {text!r}") from None
                cfg.p_term = {k + 1: w for k, w in enumerate(ws)}
            elif key in _INT:
                setattr(cfg, key, _number("method", key, text, int))
            elif key in _FLOAT:
                setattr(cfg, key, _number("method", key, text, float))
            elif key in _BOOL:
                setattr(cfg, key, _parse_bool("method", key, text))
            else:
                setattr(cfg, key, text.strip())
    if parser.has_section("simulate") and "tables" in parser["simulate"]:
        cfg.tables = parser["simulate"]["tables"].replace(",", " ").split()

