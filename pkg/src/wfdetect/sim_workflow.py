"""Discrete-time electric-vehicle powertrain workflow with switchable modules.

Four modules are chained every time step: a Motor (PI speed controller plus
torque limit and loss map), a Driveline (gear ratio and efficiency), a Glider
(longitudinal vehicle dynamics) and a Battery (open-circuit voltage with a
series resistance). Each module holds a reference and an updated parameter
set; a Boolean version vector picks one of them per module at every step.
States carry over unchanged when versions switch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .table import DataTable, SchemaError

MODULE_NAMES = ("Battery", "Motor", "Driveline", "Glider")

STATE_VARIABLES = (
    "B_SOC",
    "B_PowerLosses",
    "B_EnergyLosses",
    "B_VoltageAtTerminals",
    "M_PowerOutput",
    "M_PowerLosses",
    "M_EnergyLosses",
    "M_NetTorque",
    "D_MotorSpeed",
    "D_NetTractiveForce",
    "G_PropellingEnergy",
    "G_TractivePower",
    "G_BrakingEnergy",
    "G_Position",
)
INTERNAL_VARIABLES = ("int_speed", "int_pi_integral")
IMPOSED = "speed_setpoint"
CUMULATIVE = ("B_EnergyLosses", "M_EnergyLosses", "G_PropellingEnergy",
              "G_BrakingEnergy", "G_Position")


class SimulationDivergence(ArithmeticError):
    def __init__(self, variable: str, step: int | None = None):
        self.variable = variable
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in {variable}{where}")


@dataclass(frozen=True)
class ModuleDef:
    name: str
    params_ref: Mapping[str, float]
    params_updated: Mapping[str, float]
    key_param: str

    def params(self, updated: bool) -> Mapping[str, float]:
        return self.params_updated if updated else self.params_ref


def _default_modules() -> tuple[ModuleDef, ...]:
    battery = {"open_circuit_voltage": 350.0, "internal_resistance": 0.05,
               "capacity": 1.44e5}
    motor = {"max_torque": 250.0, "loss_torque_coeff": 0.02,
             "loss_speed_coeff": 0.1, "kp": 800.0, "ki": 40.0}
    driveline = {"gear_ratio": 9.0, "efficiency": 0.97}
    glider = {"rolling_resistance": 0.01, "drag_area": 0.6}
    return (
        ModuleDef("Battery", battery, dict(battery), "internal_resistance"),
        ModuleDef("Motor", motor, dict(motor), "max_torque"),
        ModuleDef("Driveline", driveline, dict(driveline), "gear_ratio"),
        ModuleDef("Glider", glider, dict(glider), "rolling_resistance"),
    )


@dataclass(frozen=True)
class WorkflowConfig:
    modules: tuple[ModuleDef, ...] = field(default_factory=_default_modules)
    dt: float = 0.1
    vehicle_mass: float = 1600.0
    wheel_radius: float = 0.3
    gravity: float = 9.81
    air_density: float = 1.225
    initial_soc: float = 0.9
    regen: bool = False

    def __post_init__(self) -> None:
        if not self.modules:
            raise ValueError("a workflow needs at least one module")
        names = [m.name for m in self.modules]
        if len(set(names)) != len(names):
            raise ValueError(f"module names must be unique: {names}")
        for key in ("dt", "vehicle_mass", "wheel_radius", "gravity", "air_density"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be > 0")
        if not 0.0 <= self.initial_soc <= 1.0:
            raise ValueError("initial_soc must lie in [0, 1]")
        missing = set(MODULE_NAMES) - set(names)
        if missing:
            raise ValueError(f"EV workflow requires modules {sorted(missing)}")

    @property
    def module_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.modules)

    @property
    def m(self) -> int:
        return len(self.modules)

    def module(self, name: str) -> ModuleDef:
        for mod in self.modules:
            if mod.name == name:
                return mod
        raise KeyError(f"unknown module: {name}")

    def perturbed_modules(self) -> list[str]:
        return [m.name for m in self.modules if dict(m.params_ref) != dict(m.params_updated)]


def default_config(**overrides) -> WorkflowConfig:
    return WorkflowConfig(**overrides)


def build_w1(config: WorkflowConfig,
             perturbations: Iterable[tuple[str, str, float]]) -> WorkflowConfig:
    """Return ``config`` with updated variants = reference × (1 + delta).

    Modules without a perturbation get an updated variant equal to their
    reference, so an empty list yields a workflow where W1 == W0.
    """
    updated = {m.name: dict(m.params_ref) for m in config.modules}
    for module, param, delta in perturbations:
        if module not in updated:
            raise KeyError(f"unknown module: {module}")
        if param not in updated[module]:
            raise KeyError(f"module {module} has no parameter {param}")
        updated[module][param] = config.module(module).params_ref[param] * (1.0 + delta)
    modules = tuple(replace(m, params_updated=updated[m.name]) for m in config.modules)
    return replace(config, modules=modules)


CASE_PERTURBATIONS = (("Battery", "internal_resistance", 0.10),
                       ("Motor", "max_torque", 0.10))


def case_config(**overrides) -> WorkflowConfig:
    """Default workflow with Battery resistance and Motor torque limit raised by 10%."""
    return build_w1(default_config(**overrides), CASE_PERTURBATIONS)


@dataclass(frozen=True)
class WorkflowState:
    B_SOC: float = 0.9
    B_PowerLosses: float = 0.0
    B_EnergyLosses: float = 0.0
    B_VoltageAtTerminals: float = 0.0
    M_PowerOutput: float = 0.0
    M_PowerLosses: float = 0.0
    M_EnergyLosses: float = 0.0
    M_NetTorque: float = 0.0
    D_MotorSpeed: float = 0.0
    D_NetTractiveForce: float = 0.0
    G_PropellingEnergy: float = 0.0
    G_TractivePower: float = 0.0
    G_BrakingEnergy: float = 0.0
    G_Position: float = 0.0
    int_speed: float = 0.0
    int_pi_integral: float = 0.0

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in STATE_VARIABLES + INTERNAL_VARIABLES)

    @classmethod
    def from_mapping(cls, row: Mapping[str, float]) -> "WorkflowState":
        needed = STATE_VARIABLES + INTERNAL_VARIABLES
        missing = [c for c in needed if c not in row]
        if missing:
            raise SchemaError(f"missing required columns: {missing}")
        return cls(**{c: float(row[c]) for c in needed})


def initial_state(config: WorkflowConfig) -> WorkflowState:
    battery = config.module("Battery").params_ref
    return WorkflowState(B_SOC=config.initial_soc,
                         B_VoltageAtTerminals=battery["open_circuit_voltage"])


@dataclass(frozen=True)
class DrivingCycle:
    speed_setpoint: np.ndarray
    dt: float = 0.1

    def __post_init__(self) -> None:
        sp = np.asarray(self.speed_setpoint, dtype=float)
        if sp.ndim != 1:
            raise ValueError("speed_setpoint must be 1-D")
        if np.any(sp < 0) or not np.all(np.isfinite(sp)):
            raise ValueError("speed_setpoint must be finite and >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        object.__setattr__(self, "speed_setpoint", sp)

    @property
    def n(self) -> int:
        return len(self.speed_setpoint)


# (target speed m/s, peak |acceleration| m/s^2, hold seconds)
_DEFAULT_PROFILE = (
    (0.0, 1.2, 4.0), (14.0, 3.6, 18.0), (22.0, 1.8, 25.0), (8.0, 2.4, 12.0),
    (26.0, 5.4, 30.0), (16.0, 1.8, 15.0), (0.0, 3.0, 8.0), (12.0, 4.2, 14.0),
    (30.0, 3.0, 35.0), (20.0, 1.8, 20.0), (33.0, 4.8, 22.0), (10.0, 2.4, 10.0),
    (0.0, 2.4, 6.0), (18.0, 6.0, 16.0), (25.0, 1.2, 28.0), (5.0, 2.4, 8.0),
    (28.0, 4.2, 24.0), (15.0, 3.0, 14.0), (35.0, 3.6, 26.0), (0.0, 3.0, 10.0),
)


def _ramp_hold(profile: Sequence[tuple[float, float, float]], n: int, dt: float,
               v0: float = 0.0) -> np.ndarray:
    """Chain cosine-shaped speed transitions and holds until ``n`` samples exist."""
    out: list[float] = []
    v = v0
    k = 0
    while len(out) < n:
        target, accel, hold = profile[k % len(profile)]
        k += 1
        if target != v:
            # half-cosine transition whose peak acceleration equals ``accel``
            steps = max(int(round(abs(target - v) * math.pi / (2.0 * accel) / dt)), 1)
            s = np.arange(1, steps + 1) / steps
            out.extend((v + (target - v) * (0.5 - 0.5 * np.cos(np.pi * s))).tolist())
            v = target
        out.extend([target] * int(round(hold / dt)))
    return np.asarray(out[:n], dtype=float)


def default_cycle(n: int = 5960, dt: float = 0.1) -> DrivingCycle:
    """Accelerate / cruise / decelerate pattern repeated with varying targets."""
    return DrivingCycle(_ramp_hold(_DEFAULT_PROFILE, n, dt), dt)


def random_cycle(rng: np.random.Generator, n: int = 2000, dt: float = 0.1) -> DrivingCycle:
    segments = [(float(rng.uniform(0.0, 35.0)) * float(rng.random() > 0.15),
                 float(rng.uniform(1.0, 6.0)), float(rng.uniform(2.0, 30.0)))
                for _ in range(64)]
    return DrivingCycle(_ramp_hold(segments, n, dt), dt)


def _check(name: str, value: float, t: int | None) -> float:
    if not math.isfinite(value):
        raise SimulationDivergence(name, t)
    return value


def step(state: WorkflowState, setpoint: float, versions: Sequence[int],
         config: WorkflowConfig, t: int | None = None) -> WorkflowState:
    """Advance the workflow by one ``config.dt``."""
    if len(versions) != config.m:
        raise ValueError(f"expected {config.m} version flags, got {len(versions)}")
    sel = {mod.name: mod.params(bool(v)) for mod, v in zip(config.modules, versions)}
    bat, mot, drv, gld = sel["Battery"], sel["Motor"], sel["Driveline"], sel["Glider"]
    dt = config.dt
    setpoint = float(setpoint)
    v = float(state.int_speed)

    # Motor: PI speed controller with torque limit
    err = setpoint - v
    integral = state.int_pi_integral + err * dt
    t_cmd = mot["kp"] * err + mot["ki"] * integral
    t_max = mot["max_torque"]
    t_min = -t_max if config.regen else 0.0
    torque = min(max(t_cmd, t_min), t_max)

    # Driveline
    ratio_r = drv["gear_ratio"] / config.wheel_radius
    omega = ratio_r * v
    f_tractive = drv["efficiency"] * ratio_r * torque
    f_brake = drv["efficiency"] * ratio_r * max(torque - t_cmd, 0.0)

    # Glider
    mass = config.vehicle_mass
    sgn = (v > 0) - (v < 0)
    f_roll = gld["rolling_resistance"] * mass * config.gravity * sgn
    f_aero = 0.5 * config.air_density * gld["drag_area"] * v * v
    v_new = max(v + (f_tractive - f_roll - f_aero - f_brake) / mass * dt, 0.0)
    p_tractive = (f_tractive - f_brake) * v

    # Motor electrical side
    p_out = torque * omega
    p_loss_m = mot["loss_torque_coeff"] * torque * torque + mot["loss_speed_coeff"] * abs(omega)

    # Battery
    p_batt = p_out + p_loss_m
    current = p_batt / bat["open_circuit_voltage"]
    p_loss_b = bat["internal_resistance"] * current * current
    soc = min(max(state.B_SOC - current * dt / bat["capacity"], 0.0), 1.0)

    new = WorkflowState(
        B_SOC=soc,
        B_PowerLosses=p_loss_b,
        B_EnergyLosses=state.B_EnergyLosses + p_loss_b * dt,
        B_VoltageAtTerminals=bat["open_circuit_voltage"] - bat["internal_resistance"] * current,
        M_PowerOutput=p_out,
        M_PowerLosses=p_loss_m,
        M_EnergyLosses=state.M_EnergyLosses + p_loss_m * dt,
        M_NetTorque=torque,
        D_MotorSpeed=ratio_r * v_new,
        D_NetTractiveForce=f_tractive,
        G_PropellingEnergy=state.G_PropellingEnergy + max(p_tractive, 0.0) * dt,
        G_TractivePower=p_tractive,
        G_BrakingEnergy=state.G_BrakingEnergy + max(-p_tractive, 0.0) * dt,
        G_Position=state.G_Position + v_new * dt,
        int_speed=v_new,
        int_pi_integral=integral,
    )
    for name, value in zip(STATE_VARIABLES + INTERNAL_VARIABLES, new.as_tuple()):
        _check(name, value, t)
    return new


def _version_matrix(schedule, n: int, m: int) -> np.ndarray:
    versions = getattr(schedule, "versions", schedule)
    arr = np.asarray(versions, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != m:
            raise ValueError(f"constant version vector needs {m} entries")
        arr = np.broadcast_to(arr, (n, m))
    if arr.shape != (n, m):
        raise ValueError(f"schedule shape {arr.shape} does not match ({n}, {m})")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("schedule must be Boolean")
    return arr


def table_columns(config: WorkflowConfig) -> list[str]:
    return [*STATE_VARIABLES, *INTERNAL_VARIABLES, IMPOSED,
            *(f"X_{name}" for name in config.module_names)]


def simulate(config: WorkflowConfig, cycle: DrivingCycle, schedule=None) -> DataTable:
    """Run the workflow over ``cycle``.

    Row ``t`` holds the state at step ``t`` together with the setpoint and the
    version vector applied on the transition to row ``t + 1``. ``schedule`` is
    a :class:`~wfdetect.doe.Schedule`, an ``n × m`` Boolean array or a single
    constant version vector (default: all reference).
    """
    if abs(cycle.dt - config.dt) > 1e-15:
        raise ValueError(f"cycle dt {cycle.dt} differs from workflow dt {config.dt}")
    n, m = cycle.n, config.m
    if schedule is None:
        schedule = np.zeros(m)
    versions = _version_matrix(schedule, n, m)
    flags = versions.astype(int).tolist()
    setpoints = cycle.speed_setpoint.tolist()
    state = initial_state(config)
    rows = np.empty((n, len(STATE_VARIABLES) + len(INTERNAL_VARIABLES)))
    for t in range(n):
        rows[t] = state.as_tuple()
        if t + 1 < n:
            state = step(state, setpoints[t], flags[t], config, t)
    values = np.hstack([rows, cycle.speed_setpoint[:, None], versions])
    return DataTable(table_columns(config), values)


def one_step_from(row: Mapping[str, float], setpoint: float, versions: Sequence[int],
                  config: WorkflowConfig) -> WorkflowState:
    """Restart the workflow from one table row and advance it by one step."""
    return step(WorkflowState.from_mapping(row), setpoint, versions, config)


def reference_and_updated(config: WorkflowConfig, cycle: DrivingCycle) -> tuple[DataTable, DataTable]:
    """Return (T0, T1): the all-reference and all-updated runs."""
    m = config.m
    return simulate(config, cycle, np.zeros(m)), simulate(config, cycle, np.ones(m))
