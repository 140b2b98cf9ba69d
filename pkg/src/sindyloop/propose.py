"""Candidate generation: prompt assembly, proposers, novelty filtering.

Three proposers share one interface (:class:`Proposer`):

* :class:`RemoteProposer` sends the prompt to a chat-completion endpoint;
* :class:`ScriptedProposer` replays pre-recorded batches from a JSON file;
* :class:`MutationProposer` applies seeded random edits to the current best.

Candidates travel as raw text (one JSON template document each) until the
loop parses and validates them.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import random
import re
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import httpx
import numpy as np

from .characterize import DataSummary, Family, Preference, PriorSpec
from .errors import GrammarError, MalformedResponse, ProposerUnavailable
from .grammar import EXP_RATE_GRID, EquationTemplate, parse_template, to_text

log = logging.getLogger(__name__)

SECTIONS = (
    "METADATA",
    "DATA CHARACTERISTICS",
    "CURRENT BEST",
    "BASELINE",
    "PRIORS",
    "ERROR FOCUS",
    "ROLLOUT DIAGNOSTICS",
    "REJECTED CANDIDATES",
    "OUTPUT FORMAT",
)
DEFAULT_MEMORY = 20
TEMPERATURE_RANGE = (0.2, 1.2)


class Reason(str, enum.Enum):
    """Closed set of rejection reasons (shared by prompts, run logs and replay files)."""

    SYNTAX = "syntax"
    DISALLOWED_SYMBOL = "disallowed-symbol"
    LINEARITY = "linearity"
    TOO_MANY_TERMS = "too-many-terms"
    DUPLICATE = "duplicate"
    FIT_FAILURE = "fit-failure"
    ROLLOUT_DIVERGENCE = "rollout-divergence"


_GRAMMAR_REASON = {
    "syntax": Reason.SYNTAX,
    "disallowed-symbol": Reason.DISALLOWED_SYMBOL,
    "disallowed-form": Reason.DISALLOWED_SYMBOL,
    "linearity": Reason.LINEARITY,
    "too-many-terms": Reason.TOO_MANY_TERMS,
    "duplicate": Reason.DUPLICATE,
}


def reason_for(exc: GrammarError) -> Reason:
    return _GRAMMAR_REASON.get(exc.reason, Reason.SYNTAX)


# ---------------------------------------------------------------------------
# prompt context


@dataclass(frozen=True)
class StateDiagnostic:
    amplitude_ratio: float
    phase_lag: float
    drift_slope: float


def rollout_diagnostics(predicted: np.ndarray, truth: np.ndarray, times: np.ndarray) -> list[StateDiagnostic]:
    """Per-state amplitude ratio, phase lag and error drift of a rollout against truth.

    The phase lag is the cross-correlation argmax converted to time (positive
    when the rollout lags the truth); the drift is the slope of a straight-line
    fit to the rollout error.
    """
    predicted = np.atleast_2d(np.asarray(predicted, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    times = np.asarray(times, dtype=float)
    dt = float(np.mean(np.diff(times))) if len(times) > 1 else 0.0
    out = []
    for i in range(truth.shape[1]):
        p = predicted[:, i] - predicted[:, i].mean()
        q = truth[:, i] - truth[:, i].mean()
        sq = float(np.std(q))
        amp = float(np.std(p)) / sq if sq > 0 else math.inf
        if sq > 0 and np.std(p) > 0:
            corr = np.correlate(p, q, mode="full")
            lag = int(np.argmax(corr)) - (len(q) - 1)
        else:
            lag = 0
        slope = float(np.polyfit(times, predicted[:, i] - truth[:, i], 1)[0]) if len(times) > 1 else 0.0
        out.append(StateDiagnostic(amp, lag * dt, slope))
    return out


@dataclass(frozen=True)
class RejectedEntry:
    signature: str
    text: str
    reason: Reason
    detail: str = ""


class RejectionMemory:
    """Last ``capacity`` rejections, oldest dropped first."""

    def __init__(self, capacity: int = DEFAULT_MEMORY):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self._items: deque[RejectedEntry] = deque(maxlen=capacity or None)
        self.capacity = capacity

    def add(self, entry: RejectedEntry) -> None:
        if self.capacity:
            self._items.append(entry)

    def entries(self) -> tuple[RejectedEntry, ...]:
        return tuple(self._items)

    def __len__(self) -> int:
        return len(self._items)


@dataclass(frozen=True)
class PromptContext:
    state_names: tuple[str, ...]
    input_names: tuple[str, ...]
    units: dict[str, str]
    known_parameters: dict[str, Any]
    summary: DataSummary
    best_equations: tuple[str, ...]
    best_nrmse: tuple[float, ...]
    best_template: EquationTemplate
    baseline_equations: tuple[str, ...]
    trust: tuple[bool, ...]
    priors: PriorSpec
    error_focus: int
    diagnostics: tuple[StateDiagnostic, ...] = ()
    rejected: tuple[RejectedEntry, ...] = ()
    max_terms: int = 8

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)


def _num(v: float) -> str:
    if v is None:
        return "n/a"
    if not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return f"{v:.6g}"


def build_prompt(ctx: PromptContext) -> str:
    """Render the context as a fixed-layout text document."""
    d = ctx.n_states
    out: list[str] = []

    def section(name: str, lines: Iterable[str]) -> None:
        out.append(f"## {name}")
        out.extend(lines)
        out.append("")

    meta = []
    for i, name in enumerate(ctx.state_names):
        meta.append(f"x{i}: {name} [{ctx.units.get(name, '1')}] (state)")
    for j, name in enumerate(ctx.input_names):
        meta.append(f"u{j}: {name} [{ctx.units.get(name, '1')}] (exogenous input, not a state)")
    for key in sorted(ctx.known_parameters):
        meta.append(f"parameter {key} = {ctx.known_parameters[key]}")
    section("METADATA", meta)

    chars = []
    for i, s in enumerate(ctx.summary.states):
        flags = [n for n, on in (("monotonic", s.monotonic), ("oscillatory", s.oscillatory),
                                 ("saturating", s.saturating), ("sign-definite", s.sign_definite),
                                 ("constant", s.degenerate)) if on]
        line = f"x{i}: range [{_num(s.min)}, {_num(s.max)}], std {_num(s.std)}"
        if s.period is not None:
            line += f", period ~{_num(s.period)}"
        line += f"; {', '.join(flags) if flags else 'no notable trend'}"
        chars.append(line)
    section("DATA CHARACTERISTICS", chars)

    best = [f"{eq}   (test NRMSE {_num(e)})" for eq, e in zip(ctx.best_equations, ctx.best_nrmse)]
    best.append("template: " + json.dumps(ctx.best_template.to_doc(), sort_keys=True))
    section("CURRENT BEST", best)

    base = [
        f"{eq}   [{'reliable' if ok else 'unreliable'}]"
        for eq, ok in zip(ctx.baseline_equations, ctx.trust)
    ]
    section("BASELINE", base)

    section("PRIORS", ctx.priors.render().splitlines())

    focus_err = ctx.best_nrmse[ctx.error_focus] if ctx.best_nrmse else math.inf
    section(
        "ERROR FOCUS",
        [f"x{ctx.error_focus} has the largest test error (NRMSE {_num(focus_err)}); prioritise dx{ctx.error_focus}/dt"],
    )

    diag = [
        f"x{i}: amplitude ratio {_num(g.amplitude_ratio)}, phase lag {_num(g.phase_lag)}, drift slope {_num(g.drift_slope)}"
        for i, g in enumerate(ctx.diagnostics)
    ] or ["no completed rollout for the current best"]
    section("ROLLOUT DIAGNOSTICS", diag)

    section("REJECTED CANDIDATES", [f"- {r.text} :: {r.reason.value}" for r in ctx.rejected])

    vars_ = ", ".join([f"x0..x{d - 1}"] + ([f"u0..u{ctx.n_inputs - 1}"] if ctx.n_inputs else []) + ["t"])
    section(
        "OUTPUT FORMAT",
        [
            "Return candidate templates inside one fenced ```json block: a JSON list of documents",
            '  {"equations": [{"state": 0, "features": ["x1", "x0^2*x1"]}, ...]}',
            f"with one entry per state 0..{d - 1}.",
            f"Allowed symbols: {vars_}, decimal constants, + - * / ^, sin cos exp log sqrt abs.",
            f"exp arguments must be r*x_i with r in {{{', '.join(_num(r) for r in EXP_RATE_GRID)}}}.",
            "Exponents are integer or half-integer constants. No trigonometric denominators.",
            f"At most {ctx.max_terms} features per equation. Features must not contain unknown",
            "coefficients: each feature gets exactly one fitted outer coefficient.",
        ],
    )
    return "\n".join(out).rstrip("\n") + "\n"


def section_order(prompt: str) -> list[str]:
    return [line[3:] for line in prompt.splitlines() if line.startswith("## ")]


# ---------------------------------------------------------------------------
# proposers


@dataclass(frozen=True)
class ProposalBatch:
    candidates: tuple[str, ...]
    diversity: float
    proposer: str


class Proposer(Protocol):
    tag: str

    def propose(self, prompt: str, n: int, diversity: float, ctx: PromptContext | None = None) -> ProposalBatch:
        ...


def _check_request(n: int, diversity: float) -> None:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= diversity <= 1.0:
        raise ValueError("diversity must lie in [0, 1]")


def _canonical_doc_text(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


class ScriptedProposer:
    """Replays batches of template documents from a JSON file, in file order."""

    def __init__(self, batches: Sequence[Sequence[Any]], source: str = "<memory>"):
        self._batches = [list(b) for b in batches]
        self._next = 0
        self.tag = f"replay:{source}"

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProposer":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ProposerUnavailable(f"cannot read replay file {path}: {exc}") from exc
        batches = doc.get("batches") if isinstance(doc, dict) else doc
        if not isinstance(batches, list) or not all(isinstance(b, list) for b in batches):
            raise ProposerUnavailable(f"replay file {path} must hold a list of batches")
        return cls(batches, path.name)

    @property
    def remaining(self) -> int:
        return len(self._batches) - self._next

    def propose(self, prompt: str, n: int, diversity: float, ctx: PromptContext | None = None) -> ProposalBatch:
        _check_request(n, diversity)
        if section_order(prompt) != list(SECTIONS):
            raise ValueError(f"prompt sections out of order: {section_order(prompt)}")
        if self._next >= len(self._batches):
            raise ProposerUnavailable("replay exhausted")
        batch = self._batches[self._next]
        self._next += 1
        texts = tuple((d if isinstance(d, str) else _canonical_doc_text(d)) for d in batch[:n])
        return ProposalBatch(texts, diversity, self.tag)


def _feature_pool(state: int, d: int, m: int, prefs: dict[Family, Preference] | None) -> list[str]:
    def allowed(fam: Family) -> bool:
        return prefs is None or prefs[fam] is not Preference.DISCOURAGED

    pool = ["1"] + [f"x{j}" for j in range(d)] + [f"x{j}^2" for j in range(d)] + [f"x{j}^3" for j in range(d)]
    pool += [f"u{j}" for j in range(m)]
    if d > 1 and allowed(Family.BILINEAR):
        pool += [f"x{a}*x{b}" for a in range(d) for b in range(a + 1, d)]
        pool += [f"x{a}^2*x{b}" for a in range(d) for b in range(d) if a != b]
    if allowed(Family.TRIG):
        pool += [f"sin(x{j})" for j in range(d)] + [f"cos(x{j})" for j in range(d)]
    if allowed(Family.EXPONENTIAL):
        pool += [f"exp({r:g}*x{j})" for j in range(d) for r in EXP_RATE_GRID]
    return pool


class MutationProposer:
    """Seeded add / drop / swap edits of the current-best template."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = random.Random(self.seed)
        self.tag = f"mutate:{self.seed}"

    def propose(self, prompt: str, n: int, diversity: float, ctx: PromptContext | None = None) -> ProposalBatch:
        _check_request(n, diversity)
        if ctx is None:
            raise ProposerUnavailable("mutation proposer needs the structured context")
        rng = self._rng
        base = [[to_text(f) for f in eq] for eq in ctx.best_template.equations]
        d, m = ctx.n_states, ctx.n_inputs
        out = []
        for _ in range(n):
            eqs = [list(eq) for eq in base]
            edits = 1 + int(round(2 * diversity))
            for _ in range(edits):
                i = ctx.error_focus if rng.random() < 0.5 else rng.randrange(d)
                pool = [f for f in _feature_pool(i, d, m, ctx.priors.per_state[i]) if f not in eqs[i]]
                op = rng.choice(("add", "drop", "swap"))
                if op == "drop" and len(eqs[i]) > 1:
                    eqs[i].pop(rng.randrange(len(eqs[i])))
                elif op == "swap" and eqs[i] and pool:
                    eqs[i][rng.randrange(len(eqs[i]))] = rng.choice(pool)
                elif pool and len(eqs[i]) < ctx.max_terms:
                    eqs[i].append(rng.choice(pool))
            doc = {"equations": [{"state": i, "features": eq} for i, eq in enumerate(eqs)]}
            out.append(_canonical_doc_text(doc))
        return ProposalBatch(tuple(out), diversity, self.tag)


_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.S)


def extract_candidates(text: str) -> list[str]:
    """Template documents found in fenced blocks of a free-text reply.

    A block may hold one template document, a list of them, or
    ``{"candidates": [...]}``. Unparseable blocks are skipped; if nothing
    usable remains :class:`MalformedResponse` is raised.
    """
    found: list[str] = []
    for _, body in _FENCE_RE.findall(text):
        try:
            doc = json.loads(body)
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict) and isinstance(doc.get("candidates"), list):
            doc = doc["candidates"]
        docs = doc if isinstance(doc, list) else [doc]
        found.extend(_canonical_doc_text(x) for x in docs if isinstance(x, dict) and "equations" in x)
    if not found:
        raise MalformedResponse("no parseable fenced template block in response")
    return found


@dataclass
class RemoteProposer:
    """Chat-completion client (OpenAI-style JSON over HTTPS)."""

    endpoint: str
    model: str
    api_key: str = field(repr=False)
    max_tokens: int = 2048
    retries: int = 2
    backoff: float = 1.0
    timeout: float = 60.0
    transport: httpx.BaseTransport | None = field(default=None, repr=False)
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)
    tag: str = "remote"

    SYSTEM_MESSAGE = (
        "You propose candidate right-hand-side feature sets for sparse regression of ODEs. "
        "Answer with fenced JSON template documents only."
    )

    @classmethod
    def from_env(cls, endpoint: str, model: str, env_var: str = "SINDYLOOP_API_KEY", **kw: Any) -> "RemoteProposer":
        key = os.environ.get(env_var, "")
        if not key:
            raise ProposerUnavailable(f"credential environment variable {env_var} is not set")
        if not endpoint:
            raise ProposerUnavailable("no endpoint configured for the remote proposer")
        return cls(endpoint=endpoint, model=model, api_key=key, **kw)

    @staticmethod
    def temperature(diversity: float) -> float:
        lo, hi = TEMPERATURE_RANGE
        return lo + (hi - lo) * diversity

    def request_body(self, prompt: str, n: int, diversity: float) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.SYSTEM_MESSAGE},
                {"role": "user", "content": f"{prompt}\nPropose {n} candidate templates."},
            ],
            "temperature": self.temperature(diversity),
            "max_tokens": self.max_tokens,
        }

    def _exchange(self, body: dict[str, Any]) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last: Exception | None = None
        with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
            for attempt in range(self.retries + 1):
                if attempt:
                    self.sleep(self.backoff * 2 ** (attempt - 1))
                try:
                    resp = client.post(self.endpoint, json=body, headers=headers)
                    resp.raise_for_status()
                    data = resp.json()
                    return str(data["choices"][0]["message"]["content"])
                except httpx.HTTPStatusError as exc:
                    last = exc
                    if exc.response.status_code in (401, 403):
                        break
                except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
                    last = exc
                log.warning("remote proposer attempt %d failed: %s", attempt + 1, last)
        raise ProposerUnavailable(f"remote proposer failed: {last}")

    def propose(self, prompt: str, n: int, diversity: float, ctx: PromptContext | None = None) -> ProposalBatch:
        _check_request(n, diversity)
        text = self._exchange(self.request_body(prompt, n, diversity))
        return ProposalBatch(tuple(extract_candidates(text)[:n]), diversity, self.tag)


# ---------------------------------------------------------------------------
# parsing + novelty


@dataclass(frozen=True)
class ParsedCandidate:
    raw: str
    template: EquationTemplate | None
    reason: Reason | None = None
    detail: str = ""


def parse_candidate(raw: str, n_states: int, n_inputs: int) -> ParsedCandidate:
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        return ParsedCandidate(raw, None, Reason.SYNTAX, f"not a JSON document: {exc.msg}")
    try:
        template = parse_template(doc, n_states, n_inputs)
    except GrammarError as exc:
        return ParsedCandidate(raw, None, reason_for(exc), str(exc))
    return ParsedCandidate(raw, template)


def novelty_filter(
    batch: Sequence[EquationTemplate], history: set[str] | frozenset[str]
) -> tuple[list[EquationTemplate], list[tuple[int, Reason, str]]]:
    """Drop templates already tested (or repeated within the batch).

    Returns the survivors and ``(index, reason, detail)`` for each drop.
    ``history`` is not modified.
    """
    kept: list[EquationTemplate] = []
    dropped: list[tuple[int, Reason, str]] = []
    seen: set[str] = set()
    for k, template in enumerate(batch):
        sig = template.signature()
        if sig in history:
            dropped.append((k, Reason.DUPLICATE, "previously tested"))
        elif sig in seen:
            dropped.append((k, Reason.DUPLICATE, "repeated within batch"))
        else:
            seen.add(sig)
            kept.append(template)
    return kept, dropped
