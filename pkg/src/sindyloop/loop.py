"""Baseline fit, seed model and the propose -> validate -> fit -> score loop."""

from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .characterize import PriorSpec, derive_priors, prior_penalty, summarize
from .errors import (
    DegenerateVariance,
    DimensionMismatch,
    EvaluationError,
    GrammarError,
    MalformedResponse,
    ProposerUnavailable,
)
from .grammar import (
    EXP_RATE_GRID,
    EquationTemplate,
    complexity,
    const,
    evaluate_features,
    parse_expression,
    validate_template,
)
from .propose import (
    PromptContext,
    Proposer,
    Reason,
    RejectedEntry,
    RejectionMemory,
    build_prompt,
    novelty_filter,
    parse_candidate,
    reason_for,
    rollout_diagnostics,
)
from .regress import FittedModel, Trajectory, estimate_derivatives, fit_model, r_squared
from .simulate import Outcome, RolloutResult, SimConfig, score_rollout

log = logging.getLogger(__name__)

ACCEPTED = "accepted"
STATUSES = (ACCEPTED,) + tuple(r.value for r in Reason)
TRUST_R2 = 0.95
TRUST_NRMSE = 0.2


@dataclass(frozen=True)
class LoopConfig:
    tau: float = 0.1
    max_iterations: int = 10
    lambda_c: float = 0.1
    lambda_p: float = 0.1
    plateau_window: int = 3
    plateau_eps: float = 0.02
    base_candidates: int = 4
    plateau_candidates: int = 8
    base_diversity: float = 0.3
    plateau_diversity: float = 0.9
    max_terms: int = 8
    stlsq_threshold: float = 0.05
    max_sweeps: int = 10
    safeguard_margin: float = 0.05
    rejection_memory: int = 20
    complexity_normalizer: float = 50.0
    workers: int = 4
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if min(self.lambda_c, self.lambda_p, self.safeguard_margin, self.stlsq_threshold) < 0:
            raise ValueError("weights, margin and threshold must be >= 0")
        if self.plateau_window < 1 or self.base_candidates < 1 or self.plateau_candidates < 1:
            raise ValueError("window and candidate counts must be >= 1")
        for name in ("base_diversity", "plateau_diversity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.max_terms < 1 or self.workers < 1 or self.complexity_normalizer <= 0:
            raise ValueError("max_terms, workers and complexity_normalizer must be positive")

    def to_doc(self) -> dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class CandidateScore:
    nrmse: tuple[float, ...]
    max_nrmse: float
    complexity: float
    penalty: float
    J: float
    outcome: Outcome

    @property
    def completed(self) -> bool:
        return self.outcome is Outcome.COMPLETED

    def to_doc(self) -> dict[str, Any]:
        def f(v: float) -> float | str:
            return v if math.isfinite(v) else "inf"

        return {
            "nrmse": [f(v) for v in self.nrmse],
            "max_nrmse": f(self.max_nrmse),
            "complexity": self.complexity,
            "penalty": self.penalty,
            "J": f(self.J),
            "outcome": self.outcome.value,
        }


def objective(max_nrmse: float, c: float, p: float, cfg: LoopConfig) -> float:
    return max_nrmse + cfg.lambda_c * c + cfg.lambda_p * p


def score_from_rollout(
    model: FittedModel, rollout: RolloutResult, priors: PriorSpec, cfg: LoopConfig
) -> CandidateScore:
    active = model.active_template()
    c = complexity(active, cfg.complexity_normalizer)
    p = prior_penalty(active, priors)
    if not rollout.completed:
        n = model.n_states
        return CandidateScore(tuple([math.inf] * n), math.inf, c, p, math.inf, rollout.outcome)
    return CandidateScore(rollout.nrmse, rollout.max_nrmse, c, p, objective(rollout.max_nrmse, c, p, cfg), rollout.outcome)


def score_candidate(model: FittedModel, traj: Trajectory, priors: PriorSpec, cfg: LoopConfig) -> CandidateScore:
    """Rollout NRMSE + weighted complexity + weighted prior penalty; +inf if the rollout fails."""
    return score_from_rollout(model, score_rollout(model, traj, cfg.sim), priors, cfg)


def improves(candidate: CandidateScore, incumbent: CandidateScore) -> bool:
    """Selection rule: strictly lower J wins, so ties keep the incumbent."""
    return candidate.J < incumbent.J


def select_best(scores: Sequence[CandidateScore]) -> int:
    """Index of the score the loop would keep when offered ``scores`` in order."""
    if not scores:
        raise ValueError("select_best needs at least one score")
    best = 0
    for k in range(1, len(scores)):
        if improves(scores[k], scores[best]):
            best = k
    return best


def select_error_focus(score: CandidateScore) -> int:
    """Index of the worst state (lowest index on ties)."""
    errs = list(score.nrmse)
    worst = max(errs)
    return errs.index(worst)


def detect_plateau(history: Sequence[float], window: int, eps: float) -> bool:
    """True iff the last ``window`` best-J values improved by less than ``eps`` (relative)."""
    if len(history) < window:
        return False
    oldest, newest = history[-window], history[-1]
    if math.isinf(oldest):
        return math.isinf(newest)
    if oldest <= 0:
        return newest >= oldest
    return (oldest - newest) / oldest < eps


# ---------------------------------------------------------------------------
# baseline


def broad_dictionary(n_states: int, n_inputs: int = 0, degree: int = 3) -> EquationTemplate:
    """Constant, monomials up to ``degree`` (so all pairwise cross terms), sin/cos and exp-grid terms."""
    feats = [const(1.0)]
    names = [f"x{i}" for i in range(n_states)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_states), deg):
            powers = {i: combo.count(i) for i in sorted(set(combo))}
            text = "*".join(names[i] if k == 1 else f"{names[i]}^{k}" for i, k in powers.items())
            feats.append(parse_expression(text, n_states, n_inputs))
    for i in range(n_states):
        feats.append(parse_expression(f"sin(x{i})", n_states, n_inputs))
        feats.append(parse_expression(f"cos(x{i})", n_states, n_inputs))
    for i in range(n_states):
        for r in EXP_RATE_GRID:
            feats.append(parse_expression(f"exp({r!r}*x{i})", n_states, n_inputs))
    for j in range(n_inputs):
        feats.append(parse_expression(f"u{j}", n_states, n_inputs))
    return EquationTemplate(tuple(tuple(feats) for _ in range(n_states)), n_inputs)


def library_template(features: Sequence[str], n_states: int, n_inputs: int = 0) -> EquationTemplate:
    """A shared feature list applied to every state equation."""
    feats = tuple(parse_expression(f, n_states, n_inputs) for f in features)
    return EquationTemplate(tuple(feats for _ in range(n_states)), n_inputs)


def baseline_dictionary(traj: Trajectory) -> EquationTemplate:
    """Broad dictionary, unless the trajectory metadata pins a baseline library."""
    lib = traj.meta.get("baseline_library")
    if lib:
        return library_template(lib, traj.n_states, traj.n_inputs)
    return broad_dictionary(traj.n_states, traj.n_inputs)


def seed_template(n_states: int, n_inputs: int = 0) -> EquationTemplate:
    feats = tuple(parse_expression(f"x{j}", n_states, n_inputs) for j in range(n_states))
    return EquationTemplate(tuple(feats for _ in range(n_states)), n_inputs)


@dataclass(frozen=True, eq=False)
class BaselineReport:
    model: FittedModel
    train_r2: tuple[float | None, ...]
    test_r2: tuple[float | None, ...]
    rollout: RolloutResult
    trust: tuple[bool, ...]

    @property
    def all_reliable(self) -> bool:
        return all(self.trust)

    def to_doc(self) -> dict[str, Any]:
        return {
            "equations": self.model.equations(),
            "model": self.model.to_doc(),
            "n_active_terms": self.model.active_template().n_features,
            "train_r2": list(self.train_r2),
            "test_r2": list(self.test_r2),
            "rollout": self.rollout.to_doc(),
            "trust": ["reliable" if t else "unreliable" for t in self.trust],
        }


def trust_labels(train_r2: Sequence[float | None], rollout: RolloutResult) -> tuple[bool, ...]:
    if not rollout.completed:
        return tuple(False for _ in train_r2)
    return tuple(
        r is not None and r >= TRUST_R2 and e <= TRUST_NRMSE for r, e in zip(train_r2, rollout.nrmse)
    )


def _test_derivative_r2(model: FittedModel, traj: Trajectory) -> tuple[float | None, ...]:
    t, x, u = traj.test()
    if len(t) < 3:
        return tuple(None for _ in range(model.n_states))
    target = estimate_derivatives(x, t)
    try:
        mats = evaluate_features(model.template, x, u, t)
    except (EvaluationError, DimensionMismatch):
        return tuple(None for _ in range(model.n_states))
    out = []
    for i, (mat, coef) in enumerate(zip(mats, model.coefficients)):
        try:
            out.append(r_squared(mat @ np.asarray(coef), target[:, i]))
        except DegenerateVariance:
            out.append(None)
    return tuple(out)


def run_baseline(traj: Trajectory, dictionary: EquationTemplate, cfg: LoopConfig | None = None) -> BaselineReport:
    """Fit the fixed dictionary, roll it out, and label each derivative reliable or not."""
    cfg = cfg or LoopConfig()
    model = fit_model(dictionary, traj, cfg.stlsq_threshold, cfg.max_sweeps)
    rollout = score_rollout(model, traj, cfg.sim)
    return BaselineReport(model, model.train_r2, _test_derivative_r2(model, traj), rollout, trust_labels(model.train_r2, rollout))


# ---------------------------------------------------------------------------
# refinement


@dataclass(frozen=True, eq=False)
class Evaluation:
    model: FittedModel
    score: CandidateScore
    rollout: RolloutResult


@dataclass(eq=False)
class CandidateRecord:
    iteration: int
    index: int
    raw: str
    status: str
    detail: str = ""
    template: EquationTemplate | None = None
    evaluation: Evaluation | None = None

    def to_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"index": self.index, "raw": self.raw, "status": self.status}
        if self.detail:
            doc["detail"] = self.detail
        if self.template is not None:
            doc["template"] = self.template.to_doc()
            doc["signature"] = self.template.signature()
        if self.evaluation is not None:
            doc["equations"] = self.evaluation.model.equations()
            doc["coefficients"] = [list(c) for c in self.evaluation.model.coefficients]
            doc["score"] = self.evaluation.score.to_doc()
        return doc


@dataclass(eq=False)
class RefinementResult:
    best_model: FittedModel
    best_score: CandidateScore
    history: list[CandidateRecord]
    stop_reason: str
    safeguard_applied: bool
    iterations: int
    baseline: BaselineReport
    seed_score: CandidateScore
    best_j_trace: list[float]
    log: dict[str, Any]

    def status_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in STATUSES}
        for rec in self.history:
            counts[rec.status] += 1
        return counts


def _evaluate(template: EquationTemplate, traj: Trajectory, priors: PriorSpec, cfg: LoopConfig) -> Evaluation | tuple[Reason, str]:
    try:
        model = fit_model(template, traj, cfg.stlsq_threshold, cfg.max_sweeps)
    except (EvaluationError, DimensionMismatch, ValueError, np.linalg.LinAlgError) as exc:
        return Reason.FIT_FAILURE, str(exc)
    rollout = score_rollout(model, traj, cfg.sim)
    return Evaluation(model, score_from_rollout(model, rollout, priors, cfg), rollout)


def _working_template(model: FittedModel) -> EquationTemplate:
    """Active features per equation; an all-zero equation keeps its full feature list."""
    eqs = []
    for coefs, feats in zip(model.coefficients, model.template.equations):
        active = tuple(f for c, f in zip(coefs, feats) if c != 0.0)
        eqs.append(active or feats)
    return EquationTemplate(tuple(eqs), model.template.n_inputs)


def _jf(v: float) -> float | str:
    return v if math.isfinite(v) else "inf"


def refine(
    traj: Trajectory,
    proposer: Proposer,
    cfg: LoopConfig | None = None,
    dictionary: EquationTemplate | None = None,
) -> RefinementResult:
    """Run the refinement loop and return the best model seen (subject to the baseline safeguard)."""
    cfg = cfg or LoopConfig()
    started = time.time()
    d, m = traj.n_states, traj.n_inputs
    summary = summarize(traj)
    priors = derive_priors(summary)
    baseline = run_baseline(traj, dictionary or baseline_dictionary(traj), cfg)

    seed = seed_template(d, m)
    seed_eval = _evaluate(seed, traj, priors, cfg)
    if not isinstance(seed_eval, Evaluation):
        raise RuntimeError(f"seed model cannot be fitted: {seed_eval[1]}")
    best = seed_eval
    history_sigs: set[str] = {seed.signature()}
    memory = RejectionMemory(cfg.rejection_memory)
    records: list[CandidateRecord] = []
    best_j: list[float] = [best.score.J]
    iter_logs: list[dict[str, Any]] = []
    stop_reason = "BudgetExhausted"
    iterations = 0
    _, x_test, _ = traj.test()
    t_test = traj.test()[0]

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for it in range(1, cfg.max_iterations + 1):
            focus = select_error_focus(best.score)
            plateau = detect_plateau(best_j, cfg.plateau_window, cfg.plateau_eps)
            n_req = cfg.plateau_candidates if plateau else cfg.base_candidates
            diversity = cfg.plateau_diversity if plateau else cfg.base_diversity
            diags = (
                tuple(rollout_diagnostics(best.rollout.states, x_test, t_test)) if best.rollout.completed else ()
            )
            ctx = PromptContext(
                state_names=traj.state_names,
                input_names=traj.input_names,
                units=dict(traj.units),
                known_parameters=dict(traj.meta.get("known_parameters", {})),
                summary=summary,
                best_equations=tuple(best.model.equations()),
                best_nrmse=best.score.nrmse,
                best_template=_working_template(best.model),
                baseline_equations=tuple(baseline.model.equations()),
                trust=baseline.trust,
                priors=priors,
                error_focus=focus,
                diagnostics=diags,
                rejected=memory.entries(),
                max_terms=cfg.max_terms,
            )
            prompt = build_prompt(ctx)
            it_log: dict[str, Any] = {
                "iteration": it,
                "error_focus": focus,
                "plateau": plateau,
                "requested": n_req,
                "diversity": diversity,
                "prompt": prompt,
            }
            iterations = it
            try:
                batch = proposer.propose(prompt, n_req, diversity, ctx=ctx)
                raws = list(batch.candidates)
            except ProposerUnavailable as exc:
                it_log["proposer_error"] = f"unavailable: {exc}"
                iter_logs.append(it_log)
                log.info("proposer unavailable at iteration %d: %s", it, exc)
                iterations = it - 1
                break
            except MalformedResponse as exc:
                it_log["proposer_error"] = f"malformed: {exc}"
                raws = []
            it_log["proposals"] = raws

            recs: list[CandidateRecord] = []
            valid: list[tuple[CandidateRecord, EquationTemplate]] = []
            for k, raw in enumerate(raws):
                parsed = parse_candidate(raw, d, m)
                rec = CandidateRecord(it, k, raw, ACCEPTED, template=parsed.template)
                recs.append(rec)
                if parsed.template is None:
                    rec.status, rec.detail = parsed.reason.value, parsed.detail
                    continue
                try:
                    validate_template(parsed.template, cfg.max_terms)
                except GrammarError as exc:
                    rec.status, rec.detail = reason_for(exc).value, str(exc)
                    continue
                valid.append((rec, parsed.template))

            kept, dropped = novelty_filter([t for _, t in valid], history_sigs)
            for k, reason, detail in dropped:
                valid[k][0].status, valid[k][0].detail = reason.value, detail
            dropped_idx = {k for k, _, _ in dropped}
            survivors = [valid[k] for k in range(len(valid)) if k not in dropped_idx]

            results = list(pool.map(lambda rt: _evaluate(rt[1], traj, priors, cfg), survivors))
            for (rec, template), res in zip(survivors, results):
                history_sigs.add(template.signature())
                if isinstance(res, Evaluation):
                    rec.evaluation = res
                    if not res.score.completed:
                        rec.status = Reason.ROLLOUT_DIVERGENCE.value
                        rec.detail = f"{res.rollout.outcome.value}: {res.rollout.message}"
                else:
                    rec.status, rec.detail = res[0].value, res[1]

            for rec in recs:
                if rec.status != ACCEPTED:
                    sig = rec.template.signature() if rec.template is not None else ""
                    text = str(rec.template) if rec.template is not None else rec.raw[:160]
                    memory.add(RejectedEntry(sig, text, Reason(rec.status), rec.detail))
                elif improves(rec.evaluation.score, best.score):
                    best = rec.evaluation
            records.extend(recs)
            best_j.append(best.score.J)
            it_log["candidates"] = [r.to_doc() for r in recs]
            it_log["best_J"] = _jf(best.score.J)
            it_log["best_max_nrmse"] = _jf(best.score.max_nrmse)
            iter_logs.append(it_log)
            if best.score.completed and best.score.max_nrmse < cfg.tau:
                stop_reason = "EarlyStop"
                break

    final_model, final_score = best.model, best.score
    safeguard = False
    if baseline.all_reliable and final_score.max_nrmse > baseline.rollout.max_nrmse + cfg.safeguard_margin:
        safeguard = True
        final_model = baseline.model
        final_score = score_from_rollout(baseline.model, baseline.rollout, priors, cfg)

    result_doc = {
        "stop_reason": stop_reason,
        "iterations": iterations,
        "safeguard_applied": safeguard,
        "equations": final_model.equations(),
        "model": final_model.to_doc(),
        "score": final_score.to_doc(),
        "best_J_trace": [_jf(v) for v in best_j],
    }
    run_log = {
        "started_at": started,
        "config": _config_doc(cfg),
        "trajectory": traj.metadata(),
        "data_summary": summary.to_doc(),
        "priors": priors.to_doc(),
        "proposer": getattr(proposer, "tag", type(proposer).__name__),
        "baseline": baseline.to_doc(),
        "seed": {"equations": seed_eval.model.equations(), "score": seed_eval.score.to_doc()},
        "iterations": iter_logs,
        "result": result_doc,
        "finished_at": time.time(),
    }
    return RefinementResult(
        best_model=final_model,
        best_score=final_score,
        history=records,
        stop_reason=stop_reason,
        safeguard_applied=safeguard,
        iterations=iterations,
        baseline=baseline,
        seed_score=seed_eval.score,
        best_j_trace=best_j,
        log=run_log,
    )


def _config_doc(cfg: LoopConfig) -> dict[str, Any]:
    doc = cfg.to_doc()
    doc["workers"] = None  # execution detail; does not affect results
    return doc


TIMESTAMP_KEYS = frozenset({"started_at", "finished_at"})


def normalize_log(doc: Any) -> Any:
    """Copy of a run log with wall-clock fields removed."""
    if isinstance(doc, dict):
        return {k: normalize_log(v) for k, v in doc.items() if k not in TIMESTAMP_KEYS}
    if isinstance(doc, list):
        return [normalize_log(v) for v in doc]
    return doc
