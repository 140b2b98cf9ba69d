"""Ground-truth system specifications and trajectory generation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import GrammarError, SpecError, TruthDivergence
from ..grammar import Expr, compile_rhs, parse_expression, to_text
from ..regress import Trajectory
from ..simulate import SimConfig, integrate

FIXTURE_DIR = Path(__file__).with_name("fixtures")
FIXTURE_NAMES = ("odebench21", "odebench24", "odebench31", "odebench35", "odebench39")
DEFAULT_SPLIT = 0.7
TRUTH_SIM = SimConfig(rtol=1e-9, atol=1e-11, timeout=120.0, max_steps=2_000_000)


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """A named ODE with its default initial condition and sampling grid.

    ``equations`` use the extended grammar (``tan``/``cot`` allowed).
    ``input`` optionally describes exogenous input columns:
    ``{"kind": "samples", "values": [[...], ...]}`` with one row per grid
    point, or ``{"kind": "piecewise_constant", "times": [...], "values": [...]}``.
    """

    name: str
    equations: tuple[Expr, ...]
    x0: tuple[float, ...]
    t_span: tuple[float, float]
    n_samples: int
    input: dict[str, Any] | None = None
    baseline_library: tuple[str, ...] | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.equations) != len(self.x0):
            raise SpecError(f"{self.name}: {len(self.equations)} equations but {len(self.x0)} initial values")
        if self.n_samples < 50:
            raise SpecError(f"{self.name}: n_samples must be >= 50")
        if not self.t_span[1] > self.t_span[0]:
            raise SpecError(f"{self.name}: empty time span")
        try:
            val = self.rhs()(self.t_span[0], list(self.x0), self.input_rows()[0].tolist() if self.n_inputs else [])
        except (ArithmeticError, ValueError) as exc:
            raise SpecError(f"{self.name}: equations fail at the initial condition ({exc})") from exc
        if not all(math.isfinite(v) for v in val):
            raise SpecError(f"{self.name}: equations are not finite at the initial condition")

    @property
    def dim(self) -> int:
        return len(self.equations)

    @property
    def n_inputs(self) -> int:
        if not self.input:
            return 0
        values = self.input.get("values") or [[]]
        first = values[0]
        return len(first) if isinstance(first, (list, tuple)) else 1

    def times(self) -> np.ndarray:
        return np.linspace(self.t_span[0], self.t_span[1], self.n_samples)

    def input_rows(self) -> np.ndarray | None:
        if not self.input:
            return None
        kind = self.input.get("kind", "samples")
        values = np.asarray(self.input["values"], dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if kind == "samples":
            if values.shape[0] != self.n_samples:
                raise SpecError(f"{self.name}: input has {values.shape[0]} rows, expected {self.n_samples}")
            return values
        if kind == "piecewise_constant":
            knots = np.asarray(self.input["times"], dtype=float)
            idx = np.searchsorted(knots, self.times(), side="right") - 1
            return values[np.clip(idx, 0, len(values) - 1)]
        raise SpecError(f"{self.name}: unknown input kind {kind!r}")

    def rhs(self):
        return compile_rhs([[(1.0, eq)] for eq in self.equations])

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "name": self.name,
            "dim": self.dim,
            "equations": [to_text(e) for e in self.equations],
            "x0": list(self.x0),
            "t_span": list(self.t_span),
            "n_samples": self.n_samples,
        }
        if self.input:
            doc["input"] = self.input
        if self.baseline_library is not None:
            doc["baseline_library"] = list(self.baseline_library)
        if self.metadata:
            doc["metadata"] = self.metadata
        return doc


def spec_from_doc(doc: dict[str, Any]) -> SystemSpec:
    try:
        name = str(doc["name"])
        texts = list(doc["equations"])
        dim = int(doc.get("dim", len(texts)))
        x0 = tuple(float(v) for v in doc["x0"])
        t_span = tuple(float(v) for v in doc["t_span"])
        n_samples = int(doc["n_samples"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"malformed system spec: {exc}") from exc
    if dim != len(texts):
        raise SpecError(f"{name}: dim={dim} but {len(texts)} equations")
    if len(t_span) != 2:
        raise SpecError(f"{name}: t_span needs two entries")
    input_def = doc.get("input")
    n_inputs = 0
    if input_def:
        first = (input_def.get("values") or [[]])[0]
        n_inputs = len(first) if isinstance(first, (list, tuple)) else 1
    try:
        eqs = tuple(parse_expression(t, dim, n_inputs, extended=True) for t in texts)
    except GrammarError as exc:
        raise SpecError(f"{name}: {exc}") from exc
    lib = doc.get("baseline_library")
    return SystemSpec(
        name=name,
        equations=eqs,
        x0=x0,
        t_span=(t_span[0], t_span[1]),
        n_samples=n_samples,
        input=input_def,
        baseline_library=tuple(lib) if lib is not None else None,
        metadata=dict(doc.get("metadata", {})),
    )


def read_spec_doc(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read spec {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecError(f"{path}: spec must be a JSON object")
    return doc


def load_spec(path: str | Path) -> SystemSpec:
    """Read a spec file; generator specs (``"generator": "march_leuba"``) are expanded."""
    doc = read_spec_doc(path)
    if doc.get("generator") == "march_leuba":
        from .march_leuba import generator_from_doc

        return generator_from_doc(doc)[1]
    return spec_from_doc(doc)


def load_fixture(name: str) -> SystemSpec:
    return load_spec(FIXTURE_DIR / f"{name}.json")


def fixture_replay_path(name: str) -> Path:
    return FIXTURE_DIR / f"{name}.replay.json"


def generate_trajectory(spec: SystemSpec, split: float = DEFAULT_SPLIT) -> Trajectory:
    """Noise-free samples of the truth system on a uniform grid."""
    if not 0.0 < split < 1.0:
        raise ValueError("split must lie strictly between 0 and 1")
    times = spec.times()
    inputs = spec.input_rows()
    scale = max(1.0, max(abs(v) for v in spec.x0))
    result = integrate(spec.rhs(), spec.x0, times, inputs, TRUTH_SIM, scale=scale)
    if not result.completed:
        raise TruthDivergence(f"{spec.name}: truth system failed on its span ({result.outcome.value}: {result.message})")
    n = len(times)
    meta: dict[str, Any] = {"system": spec.name, "split_fraction": split}
    if spec.baseline_library is not None:
        meta["baseline_library"] = list(spec.baseline_library)
    md = spec.metadata
    return Trajectory(
        times=times,
        states=result.states,
        inputs=inputs,
        split=int(math.floor(split * n)),
        state_names=tuple(md.get("state_names", ())),
        input_names=tuple(md.get("input_names", ())),
        units=dict(md.get("units", {})),
        meta=meta,
    )
