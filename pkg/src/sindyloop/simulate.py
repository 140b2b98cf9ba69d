"""Forward rollouts of fitted models with an adaptive Dormand-Prince 5(4) integrator.

Every failure mode (blow-up, wall-clock timeout, step-size collapse) is
reported through :class:`RolloutResult.outcome`; nothing here raises for a
misbehaving model.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateRange, InvalidTrajectory
from .grammar import DomainFault
from .regress import FittedModel, Trajectory, nrmse

Rhs = Callable[[float, Sequence[float], Sequence[float]], Sequence[float]]


class Outcome(str, enum.Enum):
    COMPLETED = "Completed"
    DIVERGED = "Diverged"
    TIMEOUT = "Timeout"
    STIFFNESS_FAILURE = "StiffnessFailure"


@dataclass(frozen=True)
class SimConfig:
    rtol: float = 1e-6
    atol: float = 1e-8
    blowup_factor: float = 1e6
    timeout: float = 10.0
    max_steps: int = 200_000

    def __post_init__(self) -> None:
        for name in ("rtol", "atol", "blowup_factor", "timeout", "max_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SimConfig.{name} must be positive")
        if self.timeout < 0.1:
            raise ValueError("SimConfig.timeout must be at least 0.1 s")


@dataclass(frozen=True, eq=False)
class RolloutResult:
    outcome: Outcome
    times: np.ndarray
    states: np.ndarray | None = None
    nrmse: tuple[float, ...] = ()
    max_nrmse: float = math.inf
    message: str = ""
    n_steps: int = 0
    failed_at: float | None = None

    @property
    def completed(self) -> bool:
        return self.outcome is Outcome.COMPLETED

    def to_doc(self, include_states: bool = False) -> dict:
        doc = {
            "outcome": self.outcome.value,
            "nrmse": [_json_float(v) for v in self.nrmse],
            "max_nrmse": _json_float(self.max_nrmse),
            "message": self.message,
            "n_steps": self.n_steps,
        }
        if include_states and self.states is not None:
            doc["states"] = self.states.tolist()
        return doc


def _json_float(v: float) -> float | str:
    return v if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# b - b_hat, extended with the FSAL stage
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# continuous extension (Shampine), rows = stages, cols = powers of theta
_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_NUMERIC_FAULTS = (DomainFault, OverflowError, ZeroDivisionError, ValueError, FloatingPointError)


class _Abort(Exception):
    def __init__(self, outcome: Outcome, message: str, t: float):
        super().__init__(message)
        self.outcome = outcome
        self.t = t


def _rms(v: np.ndarray) -> float:
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


def _initial_step(f, t0, y0, f0, direction_span, rtol, atol) -> float:
    # Hairer, Norsett & Wanner, II.4
    scale = atol + np.abs(y0) * rtol
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, direction_span)
    y1 = y0 + h0 * f0
    f1 = f(t0 + h0, y1)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, direction_span)


def integrate(
    model: FittedModel | Rhs,
    x0: Sequence[float],
    times: Sequence[float],
    inputs: np.ndarray | None = None,
    cfg: SimConfig | None = None,
    scale: float = 1.0,
) -> RolloutResult:
    """Integrate from ``x0`` at ``times[0]`` and sample the solution at ``times``.

    ``inputs`` (``len(times) x m``) is held constant between samples, so the
    integrator never steps across a sample time at which the input changes.
    The solution is declared diverged once any ``|x_i|`` exceeds
    ``cfg.blowup_factor * max(1, scale)``.
    """
    cfg = cfg or SimConfig()
    rhs = model.rhs if isinstance(model, FittedModel) else model
    times = np.asarray(times, dtype=float)
    y = np.array(x0, dtype=float)
    if times.ndim != 1 or len(times) < 1 or np.any(np.diff(times) <= 0):
        raise InvalidTrajectory("rollout times must be strictly increasing")
    if not np.all(np.isfinite(y)):
        raise InvalidTrajectory("initial state must be finite")
    if inputs is not None:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        if inputs.shape[0] != len(times):
            inputs = inputs.T if inputs.shape[1] == len(times) else inputs
        if inputs.shape[0] != len(times):
            raise InvalidTrajectory("inputs must have one row per rollout time")

    n_out = len(times)
    out = np.empty((n_out, y.size))
    out[0] = y
    t0, tf = float(times[0]), float(times[-1])
    if n_out == 1:
        return RolloutResult(Outcome.COMPLETED, times, out)
    span = tf - t0
    min_step = 1e-14 * span
    bound = cfg.blowup_factor * max(1.0, float(scale))
    deadline = time.monotonic() + cfg.timeout

    # zero-order hold: breakpoints are the sample times where the input changes
    if inputs is not None:
        change = np.flatnonzero(np.any(inputs[1:] != inputs[:-1], axis=1)) + 1
        breakpoints = [float(times[k]) for k in change] + [tf]
        hold_rows = np.concatenate([[0], change])
    else:
        breakpoints = [tf]
        hold_rows = np.array([0])
    u_empty: list[float] = []

    state = {"u": inputs[0].tolist() if inputs is not None else u_empty}

    def f(t: float, yy: np.ndarray) -> np.ndarray:
        try:
            val = np.array(rhs(t, yy.tolist(), state["u"]), dtype=float)
        except _NUMERIC_FAULTS as exc:
            raise _Abort(Outcome.DIVERGED, f"right-hand side failed: {exc}", t) from None
        if not np.all(np.isfinite(val)):
            raise _Abort(Outcome.DIVERGED, "non-finite derivative", t)
        return val

    n_steps = 0
    t = t0
    k_out = 1
    bp_index = 0
    try:
        f0 = f(t, y)
        h = _initial_step(f, t, y, f0, breakpoints[0] - t0, cfg.rtol, cfg.atol)
        K = np.empty((7, y.size))
        while k_out < n_out:
            if time.monotonic() > deadline:
                raise _Abort(Outcome.TIMEOUT, f"wall-clock timeout after {cfg.timeout} s", t)
            bp = breakpoints[bp_index]
            if h < min_step:
                raise _Abort(Outcome.STIFFNESS_FAILURE, f"step size {h:.3e} underflow", t)
            if n_steps >= cfg.max_steps:
                raise _Abort(Outcome.STIFFNESS_FAILURE, f"exceeded {cfg.max_steps} steps", t)
            h_eff = h
            t_new = t + h_eff
            if t_new >= bp - min_step:
                t_new = bp
                h_eff = bp - t
            K[0] = f0
            for s in range(1, 6):
                K[s] = f(t + _C[s] * h_eff, y + h_eff * (np.dot(_A[s], K[:s])))
            y_new = y + h_eff * np.dot(_B, K[:6])
            f_new = f(t_new, y_new)
            K[6] = f_new
            err = h_eff * np.dot(_E, K)
            sc = cfg.atol + np.maximum(np.abs(y), np.abs(y_new)) * cfg.rtol
            err_norm = _rms(err / sc)
            n_steps += 1
            if err_norm > 1.0 or not math.isfinite(err_norm):
                factor = _MIN_FACTOR if not math.isfinite(err_norm) else max(
                    _MIN_FACTOR, _SAFETY * err_norm ** (-1 / 5)
                )
                h = h_eff * factor
                continue
            # accepted: emit dense output for samples inside (t, t_new]
            if k_out < n_out and times[k_out] <= t_new:
                Q = K.T @ _P
                while k_out < n_out and times[k_out] <= t_new:
                    if times[k_out] == t_new:
                        out[k_out] = y_new
                    else:
                        theta = (times[k_out] - t) / h_eff
                        p = np.array([theta, theta ** 2, theta ** 3, theta ** 4])
                        out[k_out] = y + h_eff * (Q @ p)
                    k_out += 1
            if not np.all(np.abs(y_new) <= bound):
                raise _Abort(Outcome.DIVERGED, f"state magnitude exceeded {bound:.3g}", t_new)
            factor = _MAX_FACTOR if err_norm == 0.0 else min(_MAX_FACTOR, _SAFETY * err_norm ** (-1 / 5))
            h = h_eff * max(_MIN_FACTOR, factor)
            t, y, f0 = t_new, y_new, f_new
            if t >= bp and bp_index + 1 < len(breakpoints):
                bp_index += 1
                if inputs is not None:
                    state["u"] = inputs[int(hold_rows[bp_index])].tolist()
                    f0 = f(t, y)
                h = min(h, breakpoints[bp_index] - t)
    except _Abort as abort:
        return RolloutResult(abort.outcome, times, None, message=str(abort), n_steps=n_steps, failed_at=abort.t)
    if not np.all(np.isfinite(out)) or not np.all(np.abs(out) <= bound):
        return RolloutResult(Outcome.DIVERGED, times, None, message="non-finite dense output", n_steps=n_steps)
    return RolloutResult(Outcome.COMPLETED, times, out, n_steps=n_steps)


def training_scale(traj: Trajectory) -> float:
    _, x, _ = traj.train()
    return float(np.max(np.ptp(x, axis=0))) if x.size else 1.0


def score_rollout(model: FittedModel | Rhs, traj: Trajectory, cfg: SimConfig | None = None) -> RolloutResult:
    """Roll out from the first test-segment state and score each state by NRMSE."""
    t, x, u = traj.test()
    if len(t) < 5:
        raise InvalidTrajectory(f"test segment has {len(t)} samples; need at least 5")
    flat = [i for i in range(traj.n_states) if np.ptp(x[:, i]) == 0.0]
    if flat:
        raise DegenerateRange(f"test segment of x{flat[0]} is constant; NRMSE is undefined")
    result = integrate(model, x[0], t, u, cfg, scale=training_scale(traj))
    if not result.completed:
        inf = tuple(math.inf for _ in range(traj.n_states))
        return RolloutResult(
            result.outcome, result.times, None, inf, math.inf, result.message, result.n_steps, result.failed_at
        )
    errs = tuple(nrmse(result.states[:, i], x[:, i]) for i in range(traj.n_states))
    return RolloutResult(result.outcome, result.times, result.states, errs, max(errs), "", result.n_steps)
