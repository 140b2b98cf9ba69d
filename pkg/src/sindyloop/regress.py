"""Trajectories, derivative targets, STLSQ and fit metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import (
    DegenerateRange,
    DegenerateVariance,
    DimensionMismatch,
    EmptyActiveSet,
    InvalidTrajectory,
)
from .grammar import (
    EquationTemplate,
    Expr,
    compile_rhs,
    evaluate_features,
    parse_template,
    to_text,
)

DEFAULT_THRESHOLD = 0.05
DEFAULT_MAX_SWEEPS = 10
ILL_CONDITIONED = 1e12


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled states (and optional exogenous inputs) with a train/test split.

    Rows ``[:split]`` are the training segment, ``[split:]`` the test segment.
    """

    times: np.ndarray
    states: np.ndarray
    split: int
    inputs: np.ndarray | None = None
    state_names: tuple[str, ...] = ()
    input_names: tuple[str, ...] = ()
    units: dict[str, str] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        n = len(times)
        if n < 10:
            raise InvalidTrajectory(f"need at least 10 samples, got {n}")
        if states.shape[0] != n:
            raise InvalidTrajectory(f"{states.shape[0]} state rows vs {n} times")
        if np.any(np.diff(times) <= 0):
            raise InvalidTrajectory("times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(states))):
            raise InvalidTrajectory("non-finite entries in trajectory")
        if not 0 < int(self.split) < n:
            raise InvalidTrajectory(f"split index {self.split} outside (0, {n})")
        object.__setattr__(self, "split", int(self.split))
        if self.inputs is not None:
            inputs = np.asarray(self.inputs, dtype=float)
            if inputs.ndim == 1:
                inputs = inputs[:, None]
            if inputs.shape[0] != n:
                raise InvalidTrajectory(f"{inputs.shape[0]} input rows vs {n} times")
            if not np.all(np.isfinite(inputs)):
                raise InvalidTrajectory("non-finite entries in inputs")
            object.__setattr__(self, "inputs", inputs)
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"x{i}" for i in range(self.n_states)))
        if not self.input_names and self.n_inputs:
            object.__setattr__(self, "input_names", tuple(f"u{j}" for j in range(self.n_inputs)))

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def n_states(self) -> int:
        return self.states.shape[1]

    @property
    def n_inputs(self) -> int:
        return 0 if self.inputs is None else self.inputs.shape[1]

    def train(self) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        s = self.split
        return self.times[:s], self.states[:s], None if self.inputs is None else self.inputs[:s]

    def test(self) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        s = self.split
        return self.times[s:], self.states[s:], None if self.inputs is None else self.inputs[s:]

    def metadata(self) -> dict[str, Any]:
        return {
            "split": self.split,
            "state_names": list(self.state_names),
            "input_names": list(self.input_names),
            "units": dict(self.units),
            "meta": dict(self.meta),
        }


def _fmt(v: float) -> str:
    return repr(float(v))


def sidecar_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def write_trajectory(traj: Trajectory, csv_path: str | Path) -> Path:
    """Write ``t,x0..,u0..`` CSV plus the JSON metadata sidecar."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    header = ["t"] + [f"x{i}" for i in range(traj.n_states)] + [f"u{j}" for j in range(traj.n_inputs)]
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(traj.n):
            row = [traj.times[k], *traj.states[k]]
            if traj.inputs is not None:
                row.extend(traj.inputs[k])
            w.writerow([_fmt(v) for v in row])
    side = sidecar_path(csv_path)
    side.write_text(json.dumps(traj.metadata(), indent=2, sort_keys=True) + "\n")
    return side


def read_trajectory(csv_path: str | Path) -> Trajectory:
    csv_path = Path(csv_path)
    with csv_path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidTrajectory(f"{csv_path} is empty")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t":
        raise InvalidTrajectory(f"{csv_path}: header must start with 't'")
    x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    u_cols = [i for i, h in enumerate(header) if h.startswith("u")]
    expected = ["t"] + [f"x{i}" for i in range(len(x_cols))] + [f"u{j}" for j in range(len(u_cols))]
    if header != expected:
        raise InvalidTrajectory(f"{csv_path}: header {header} does not match t,x0..,u0..")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise InvalidTrajectory(f"{csv_path}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise InvalidTrajectory(f"{csv_path}: ragged rows")
    side = sidecar_path(csv_path)
    meta: dict[str, Any] = json.loads(side.read_text()) if side.exists() else {}
    split = meta.get("split", int(math.floor(0.7 * len(data))))
    return Trajectory(
        times=data[:, 0],
        states=data[:, x_cols],
        inputs=data[:, u_cols] if u_cols else None,
        split=split,
        state_names=tuple(meta.get("state_names", ())),
        input_names=tuple(meta.get("input_names", ())),
        units=dict(meta.get("units", {})),
        meta=dict(meta.get("meta", {})),
    )


# ---------------------------------------------------------------------------
# derivatives
# ---------------------------------------------------------------------------


def estimate_derivatives(traj: Trajectory | np.ndarray, times: np.ndarray | None = None) -> np.ndarray:
    """Second-order finite differences, one-sided at the ends.

    On non-uniform grids the three-point stencil is the derivative of the
    quadratic through the three nearest samples, so accuracy is kept.
    """
    if isinstance(traj, Trajectory):
        states, times = traj.states, traj.times
    else:
        states = np.asarray(traj, dtype=float)
        if times is None:
            raise DimensionMismatch("times are required when passing a raw state array")
    states = np.atleast_2d(states.T).T if states.ndim == 1 else states
    out = np.gradient(states, np.asarray(times, dtype=float), axis=0, edge_order=2)
    # grid round-off leaves ~1e-15 residue on constant columns; make those exact
    out[:, np.ptp(states, axis=0) == 0.0] = 0.0
    return out


# ---------------------------------------------------------------------------
# STLSQ
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StlsqResult:
    coef: np.ndarray
    sweeps: int
    condition: float
    ill_conditioned: bool
    supports: tuple[tuple[int, ...], ...]

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.coef))


def _lstsq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # SVD-based: minimum-norm solution when rank deficient
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    return sol


def _condition(a: np.ndarray) -> float:
    if a.shape[1] == 0:
        return 1.0
    s = np.linalg.svd(a, compute_uv=False)
    if s[-1] == 0.0 or a.shape[0] < a.shape[1]:
        return math.inf
    return float(s[0] / s[-1])


def stlsq(
    features: np.ndarray,
    targets: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> StlsqResult:
    """Sequential thresholded least squares.

    Alternates a least-squares fit on the active columns with hard
    thresholding of coefficients below ``threshold`` in magnitude, until the
    active set stops changing or ``max_sweeps`` refits have run. Inactive
    coefficients are exactly zero.

    Raises :class:`EmptyActiveSet` when every coefficient is thresholded.
    """
    a = np.asarray(features, dtype=float)
    b = np.asarray(targets, dtype=float).ravel()
    if a.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"features {a.shape} vs targets {b.shape}")
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    n_terms = a.shape[1]
    coef = np.zeros(n_terms)
    active = np.ones(n_terms, dtype=bool)
    supports = []
    sweeps = 0

    def refit() -> None:
        idx = np.flatnonzero(active)
        supports.append(tuple(int(i) for i in idx))
        coef[:] = 0.0
        coef[idx] = _lstsq(a[:, idx], b)

    while True:
        refit()
        sweeps += 1
        keep = active & (np.abs(coef) >= threshold)
        if not keep.any():
            raise EmptyActiveSet(n_terms=n_terms)
        if np.array_equal(keep, active):
            break
        active = keep
        if sweeps >= max_sweeps:
            refit()
            break
    cond = _condition(a[:, active])
    return StlsqResult(coef, sweeps, cond, cond > ILL_CONDITIONED, tuple(supports))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _pair(predicted: Sequence[float], actual: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predicted, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if p.shape != a.shape:
        raise DimensionMismatch(f"predicted {p.shape} vs actual {a.shape}")
    return p, a


def r_squared(predicted: Sequence[float], actual: Sequence[float]) -> float:
    p, a = _pair(predicted, actual)
    if len(a) < 2:
        raise DimensionMismatch("need at least two samples")
    if np.ptp(a) == 0.0:
        raise DegenerateVariance("actual series is constant")
    if not np.all(np.isfinite(p)):
        return -math.inf
    ss_res = float(np.sum((a - p) ** 2))
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    return 1.0 - ss_res / ss_tot


def nrmse(predicted: Sequence[float], actual: Sequence[float]) -> float:
    """RMSE normalised by the range of ``actual``; ``inf`` for non-finite predictions."""
    p, a = _pair(predicted, actual)
    rng = float(np.ptp(a)) if len(a) else 0.0
    if rng == 0.0:
        raise DegenerateRange("actual series has zero range")
    if not np.all(np.isfinite(p)):
        return math.inf
    return float(np.sqrt(np.mean((p - a) ** 2)) / rng)


# ---------------------------------------------------------------------------
# fitted models
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FittedModel:
    template: EquationTemplate
    coefficients: tuple[tuple[float, ...], ...]
    train_r2: tuple[float | None, ...] = ()
    residual_norm: tuple[float, ...] = ()
    ill_conditioned: tuple[bool, ...] = ()

    def __post_init__(self) -> None:
        coefs = tuple(tuple(float(c) for c in eq) for eq in self.coefficients)
        if len(coefs) != self.template.n_states or any(
            len(c) != len(f) for c, f in zip(coefs, self.template.equations)
        ):
            raise DimensionMismatch("coefficient count does not match template features")
        if not all(math.isfinite(c) for eq in coefs for c in eq):
            raise ValueError("non-finite coefficient")
        object.__setattr__(self, "coefficients", coefs)

    @property
    def n_states(self) -> int:
        return self.template.n_states

    def terms(self) -> list[list[tuple[float, Expr]]]:
        return [list(zip(c, f)) for c, f in zip(self.coefficients, self.template.equations)]

    def active_template(self) -> EquationTemplate:
        """The template restricted to features with nonzero coefficients."""
        eqs = tuple(
            tuple(f for c, f in zip(cs, fs) if c != 0.0)
            for cs, fs in zip(self.coefficients, self.template.equations)
        )
        return EquationTemplate(eqs, self.template.n_inputs)

    @cached_property
    def rhs(self) -> Callable[[float, Sequence[float], Sequence[float]], list[float]]:
        return compile_rhs(self.terms())

    def with_coefficients(self, coefficients: Sequence[Sequence[float]]) -> "FittedModel":
        return FittedModel(self.template, tuple(tuple(c) for c in coefficients))

    def equations(self, precision: int = 6) -> list[str]:
        out = []
        for i, eq in enumerate(self.terms()):
            parts = [f"{c:.{precision}g}*{to_text(f)}" for c, f in eq if c != 0.0]
            rhs = " + ".join(parts).replace("+ -", "- ") if parts else "0"
            out.append(f"dx{i}/dt = {rhs}")
        return out

    def to_doc(self) -> dict[str, Any]:
        doc = self.template.to_doc()
        for entry, coefs in zip(doc["equations"], self.coefficients):
            entry["coefficients"] = list(coefs)
        doc["n_inputs"] = self.template.n_inputs
        return doc

    @classmethod
    def from_doc(cls, doc: dict[str, Any], extended: bool = False) -> "FittedModel":
        template = parse_template(doc, n_inputs=int(doc.get("n_inputs", 0)))
        coefs = [entry["coefficients"] for entry in sorted(doc["equations"], key=lambda e: e.get("state", 0))]
        return cls(template, tuple(tuple(c) for c in coefs))


def fit_model(
    template: EquationTemplate,
    traj: Trajectory,
    threshold: float = DEFAULT_THRESHOLD,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> FittedModel:
    """Fit every equation of ``template`` on the training segment with STLSQ.

    An equation whose terms are all thresholded away is kept as ``dx_i/dt = 0``.
    """
    if template.n_states != traj.n_states:
        raise DimensionMismatch(f"template has {template.n_states} states, trajectory {traj.n_states}")
    t, x, u = traj.train()
    if template.n_inputs and (u is None or u.shape[1] < template.n_inputs):
        raise DimensionMismatch("template uses inputs the trajectory does not have")
    dxdt = estimate_derivatives(x, t)
    mats = evaluate_features(template, x, u, t)
    coefs, r2s, res, flags = [], [], [], []
    for i, mat in enumerate(mats):
        target = dxdt[:, i]
        try:
            result = stlsq(mat, target, threshold, max_sweeps)
            theta = result.coef
            flags.append(result.ill_conditioned)
        except EmptyActiveSet:
            theta = np.zeros(mat.shape[1])
            flags.append(False)
        pred = mat @ theta
        try:
            r2s.append(r_squared(pred, target))
        except DegenerateVariance:
            r2s.append(None)
        res.append(float(np.linalg.norm(pred - target)))
        coefs.append(tuple(float(c) for c in theta))
    return FittedModel(template, tuple(coefs), tuple(r2s), tuple(res), tuple(flags))
