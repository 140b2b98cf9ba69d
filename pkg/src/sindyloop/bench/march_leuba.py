"""Closed-loop reduced-order BWR benchmark in the March-Leuba layout.

Seven plant states (all normalised deviations or ratios):

====  =========================================================
x0    neutron power ``n`` (1 at nominal)
x1    delayed-neutron precursor ``c`` (1 at nominal)
x2    fuel temperature deviation ``T``
x3    heat flux deviation ``q`` (lag of ``T``)
x4    void fraction deviation ``v`` (lag of ``q``)
x5    power sensor reading ``s`` (lag of ``n``)
x6    control-rod reactivity ``a`` (actuator lag of ``u``)
====  =========================================================

Reactivity is ``rho = a + alpha_T*T + alpha_V*v`` and enters point kinetics
bilinearly, ``dn/dt = (rho - beta)/Lambda * n + beta/Lambda * c``. A sampled
proportional-integral controller tracks a piecewise-constant power setpoint
from the sensor reading; its output ``u`` is exported as the exogenous
input column and held constant between samples.

The default parameter values are a modelling choice tuned for a stable,
lightly damped closed loop. They are not taken from the original report.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Sequence

import numpy as np

from ..errors import SpecError, UnstableConfiguration
from ..grammar import parse_expression
from ..regress import Trajectory
from ..simulate import SimConfig, integrate
from .systems import DEFAULT_SPLIT, SystemSpec

STATE_NAMES = ("power", "precursor", "fuel_temp", "heat_flux", "void", "sensor", "rod_reactivity")
STATE_UNITS = ("1", "1", "1", "1", "1", "1", "dk/k")

DEFAULT_SETPOINTS: tuple[tuple[float, float], ...] = ((0.0, 1.0), (1.0, 1.05), (4.0, 0.97), (7.0, 1.02))

_SIM = SimConfig(rtol=1e-9, atol=1e-11, timeout=120.0, max_steps=2_000_000)


@dataclass(frozen=True)
class MarchLeubaParams:
    beta: float = 0.0056
    generation_time: float = 4.0e-5
    decay_const: float = 0.08
    alpha_fuel: float = -0.002
    alpha_void: float = -0.01
    fuel_gain: float = 1.0
    tau_fuel: float = 5.0
    tau_flux: float = 0.4
    void_gain: float = 1.0
    tau_void: float = 0.5
    tau_sensor: float = 0.1
    tau_actuator: float = 0.3
    kp: float = 0.002
    ki: float = 0.004

    @classmethod
    def from_map(cls, params: dict[str, Any] | None) -> "MarchLeubaParams":
        params = dict(params or {})
        known = {f.name for f in fields(cls)}
        unknown = set(params) - known
        if unknown:
            raise SpecError(f"unknown March-Leuba parameter(s): {sorted(unknown)}")
        out = cls(**{k: float(v) for k, v in params.items()})
        for name in ("beta", "generation_time", "decay_const", "tau_fuel", "tau_flux", "tau_void",
                     "tau_sensor", "tau_actuator"):
            if not getattr(out, name) > 0:
                raise SpecError(f"March-Leuba parameter {name} must be positive")
        return out

    def to_map(self) -> dict[str, float]:
        return asdict(self)


def steady_state() -> np.ndarray:
    return np.array([1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def plant_rhs(p: MarchLeubaParams):
    """Plant derivative ``f(t, x, u)`` written directly in numpy."""

    def f(t: float, x: Sequence[float], u: Sequence[float]) -> list[float]:
        n, c, T, q, v, s, a = x
        rho = a + p.alpha_fuel * T + p.alpha_void * v
        return [
            (rho - p.beta) / p.generation_time * n + p.beta / p.generation_time * c,
            p.decay_const * (n - c),
            (p.fuel_gain * (n - 1.0) - T) / p.tau_fuel,
            (T - q) / p.tau_flux,
            (p.void_gain * q - v) / p.tau_void,
            (n - s) / p.tau_sensor,
            (u[0] - a) / p.tau_actuator,
        ]

    return f


def equation_texts(p: MarchLeubaParams) -> list[str]:
    """The plant written in the extended grammar (same algebra as :func:`plant_rhs`)."""
    L = p.generation_time
    r = repr
    return [
        f"{r(1.0 / L)}*x6*x0 + {r(p.alpha_fuel / L)}*x2*x0 + {r(p.alpha_void / L)}*x4*x0"
        f" - {r(p.beta / L)}*x0 + {r(p.beta / L)}*x1",
        f"{r(p.decay_const)}*x0 - {r(p.decay_const)}*x1",
        f"{r(p.fuel_gain / p.tau_fuel)}*x0 - {r(p.fuel_gain / p.tau_fuel)} - {r(1.0 / p.tau_fuel)}*x2",
        f"{r(1.0 / p.tau_flux)}*x2 - {r(1.0 / p.tau_flux)}*x3",
        f"{r(p.void_gain / p.tau_void)}*x3 - {r(1.0 / p.tau_void)}*x4",
        f"{r(1.0 / p.tau_sensor)}*x0 - {r(1.0 / p.tau_sensor)}*x5",
        f"{r(1.0 / p.tau_actuator)}*u0 - {r(1.0 / p.tau_actuator)}*x6",
    ]


def closed_loop_jacobian(p: MarchLeubaParams) -> np.ndarray:
    """Jacobian at nominal of the continuous-time loop (plant + PI integrator state).

    State order: the seven plant states, then the integral of the tracking error.
    """
    L = p.generation_time
    J = np.zeros((8, 8))
    # n' = (a + aT T + aV v - beta)/L * n + beta/L * c, evaluated at n=c=1
    J[0, 0] = -p.beta / L
    J[0, 1] = p.beta / L
    J[0, 2] = p.alpha_fuel / L
    J[0, 4] = p.alpha_void / L
    J[0, 6] = 1.0 / L
    J[1, 0], J[1, 1] = p.decay_const, -p.decay_const
    J[2, 0], J[2, 2] = p.fuel_gain / p.tau_fuel, -1.0 / p.tau_fuel
    J[3, 2], J[3, 3] = 1.0 / p.tau_flux, -1.0 / p.tau_flux
    J[4, 3], J[4, 4] = p.void_gain / p.tau_void, -1.0 / p.tau_void
    J[5, 0], J[5, 5] = 1.0 / p.tau_sensor, -1.0 / p.tau_sensor
    # a' = (kp*(r - s) + ki*I - a)/tau_a ; I' = r - s
    J[6, 5] = -p.kp / p.tau_actuator
    J[6, 6] = -1.0 / p.tau_actuator
    J[6, 7] = p.ki / p.tau_actuator
    J[7, 5] = -1.0
    return J


def _setpoint(schedule: Sequence[tuple[float, float]], t: float) -> float:
    value = schedule[0][1]
    for start, v in schedule:
        if t >= start:
            value = v
    return value


def march_leuba_generate(
    params: dict[str, Any] | MarchLeubaParams | None = None,
    setpoints: Sequence[Sequence[float]] = DEFAULT_SETPOINTS,
    t_span: tuple[float, float] = (0.0, 10.0),
    n_samples: int = 1001,
    x0: Sequence[float] | None = None,
    split: float = DEFAULT_SPLIT,
    name: str = "march_leuba",
) -> tuple[Trajectory, SystemSpec]:
    """Simulate the closed loop sample by sample and export plant + input column.

    The controller output computed at sample ``k`` is held on
    ``[t_k, t_{k+1})``; that held value is what ends up in the ``u0`` column.
    """
    p = params if isinstance(params, MarchLeubaParams) else MarchLeubaParams.from_map(params)
    schedule = sorted((float(a), float(b)) for a, b in setpoints)
    if not schedule:
        raise SpecError("setpoint schedule is empty")
    times = np.linspace(t_span[0], t_span[1], n_samples)
    dt = float(times[1] - times[0])
    x = np.array(steady_state() if x0 is None else x0, dtype=float)
    states = np.empty((n_samples, 7))
    controls = np.empty((n_samples, 1))
    states[0] = x
    rhs = plant_rhs(p)
    integral = 0.0
    for k in range(n_samples):
        err = _setpoint(schedule, times[k]) - x[5]
        u_k = p.kp * err + p.ki * integral
        integral += err * dt
        controls[k, 0] = u_k
        if k == n_samples - 1:
            break
        seg = integrate(lambda t, y, _u, uk=u_k: rhs(t, y, [uk]), x, times[k:k + 2], None, _SIM, scale=10.0)
        if not seg.completed:
            raise UnstableConfiguration(f"closed loop failed at t={times[k]:.4g}: {seg.message}")
        x = seg.states[-1]
        if np.max(np.abs(x - steady_state())) > 1e3:
            raise UnstableConfiguration(f"closed loop diverged near t={times[k + 1]:.4g}")
        states[k + 1] = x
    texts = equation_texts(p)
    spec = SystemSpec(
        name=name,
        equations=tuple(parse_expression(t, 7, 1, extended=True) for t in texts),
        x0=tuple(float(v) for v in states[0]),
        t_span=(float(t_span[0]), float(t_span[1])),
        n_samples=n_samples,
        input={"kind": "samples", "values": controls.tolist()},
        baseline_library=None,
        metadata={
            "generator": "march_leuba",
            "params": p.to_map(),
            "setpoints": [list(s) for s in schedule],
            "state_names": list(STATE_NAMES),
            "input_names": ["control"],
            "units": dict(zip(STATE_NAMES, STATE_UNITS)),
            "note": "parameter values are a modelling choice, not published data",
        },
    )
    traj = Trajectory(
        times=times,
        states=states,
        inputs=controls,
        split=int(math.floor(split * n_samples)),
        state_names=STATE_NAMES,
        input_names=("control",),
        units=dict(zip(STATE_NAMES, STATE_UNITS)),
        meta={"system": name, "split_fraction": split},
    )
    return traj, spec


def generator_from_doc(doc: dict[str, Any], split: float = DEFAULT_SPLIT) -> tuple[Trajectory, SystemSpec]:
    """Run the generator described by a ``{"generator": "march_leuba", ...}`` spec document."""
    try:
        return march_leuba_generate(
            params=doc.get("params"),
            setpoints=doc.get("setpoints", DEFAULT_SETPOINTS),
            t_span=tuple(float(v) for v in doc.get("t_span", (0.0, 10.0))),
            n_samples=int(doc.get("n_samples", 1001)),
            x0=doc.get("x0"),
            split=split,
            name=str(doc.get("name", "march_leuba")),
        )
    except (TypeError, ValueError) as exc:
        raise SpecError(f"malformed March-Leuba spec: {exc}") from exc
