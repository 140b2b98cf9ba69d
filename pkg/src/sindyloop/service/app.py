"""FastAPI application. Handlers are thin wrappers over the library calls."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..bench.march_leuba import generator_from_doc
from ..bench.report import BenchResult, emit_report
from ..bench.systems import generate_trajectory, spec_from_doc
from ..config import load_config
from ..errors import (
    DegenerateRange,
    DegenerateVariance,
    GrammarError,
    ProposerUnavailable,
    SindyLoopError,
)
from ..grammar import (
    canonical_signature,
    complexity,
    feature_signature,
    node_count,
    parse_expression,
    parse_template,
    to_text,
    validate_template,
)
from ..loop import baseline_dictionary, normalize_log, refine, run_baseline
from ..propose import MutationProposer, ScriptedProposer, reason_for
from ..serialize import jsonable
from . import schemas

app = FastAPI(title="sindyloop", version=__version__)


@app.exception_handler(SindyLoopError)
async def _library_error(request: Request, exc: SindyLoopError) -> JSONResponse:
    if isinstance(exc, ProposerUnavailable):
        status = 503
    elif isinstance(exc, (DegenerateRange, DegenerateVariance)):
        status = 422
    else:
        status = 400
    return JSONResponse(status_code=status, content={"error": type(exc).__name__, "detail": str(exc)})


def _overrides(settings: dict[str, str]) -> list[str]:
    return [f"{k}={v}" for k, v in settings.items()]


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/grammar/parse", response_model=schemas.ParseResponse)
def grammar_parse(req: schemas.ParseRequest) -> schemas.ParseResponse:
    node = parse_expression(req.text, req.n_states, req.n_inputs)
    return schemas.ParseResponse(
        text=to_text(node), canonical=canonical_signature(node), signature=feature_signature(node),
        node_count=node_count(node),
    )


@app.post("/grammar/validate", response_model=schemas.ValidateResponse)
def grammar_validate(req: schemas.ValidateRequest) -> schemas.ValidateResponse:
    try:
        template = parse_template(req.template, req.n_states, req.n_inputs)
        validate_template(template, req.max_terms)
    except GrammarError as exc:
        return schemas.ValidateResponse(valid=False, reason=reason_for(exc).value, detail=str(exc))
    return schemas.ValidateResponse(valid=True, signature=template.signature(), complexity=complexity(template))


@app.post("/generate", response_model=schemas.TrajectoryPayload)
def generate(req: schemas.GenerateRequest) -> schemas.TrajectoryPayload:
    if req.spec.get("generator") == "march_leuba":
        traj, _ = generator_from_doc(req.spec, req.split)
    else:
        traj = generate_trajectory(spec_from_doc(req.spec), req.split)
    return schemas.TrajectoryPayload.from_trajectory(traj)


@app.post("/baseline")
def baseline(req: schemas.BaselineRequest) -> dict:
    cfg = load_config(None, _overrides(req.settings))
    traj = req.trajectory.to_trajectory()
    return jsonable(run_baseline(traj, baseline_dictionary(traj), cfg.loop_config()).to_doc())


@app.post("/refine", response_model=schemas.RefineResponse)
def refine_endpoint(req: schemas.RefineRequest) -> schemas.RefineResponse:
    cfg = load_config(None, _overrides(req.settings))
    traj = req.trajectory.to_trajectory()
    if isinstance(req.proposer, schemas.ReplaySource):
        proposer = ScriptedProposer(req.proposer.batches, source="request")
    else:
        proposer = MutationProposer(req.proposer.seed)
    result = refine(traj, proposer, cfg.loop_config())
    s = result.best_score
    return schemas.RefineResponse(
        equations=result.best_model.equations(),
        stop_reason=result.stop_reason,
        iterations=result.iterations,
        max_nrmse=jsonable(s.max_nrmse),
        J=jsonable(s.J),
        safeguard_applied=result.safeguard_applied,
        status_counts=result.status_counts(),
        log=jsonable(normalize_log(result.log) if req.normalize else result.log),
    )


@app.post("/report")
def report(req: schemas.ReportRequest) -> dict:
    rows = [BenchResult(**row.model_dump()) for row in req.results]
    return jsonable(emit_report(rows, req.tau))


__all__ = ["app"]
