"""Baseline + refinement over a set of system specs."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..errors import SindyLoopError
from ..loop import LoopConfig, refine
from ..propose import Proposer
from ..regress import FittedModel, Trajectory, r_squared
from ..simulate import score_rollout
from .grading import MATCH_FRACTION, SPURIOUS_THRESHOLD, grade_structure
from .report import BenchResult
from .systems import DEFAULT_SPLIT, SystemSpec, generate_trajectory

log = logging.getLogger(__name__)

ProposerFactory = Callable[[SystemSpec, Path | None], Proposer]


def rollout_r2(model: FittedModel, traj: Trajectory, cfg: LoopConfig) -> float:
    """Worst per-state test R^2 of a rollout (-inf when it does not complete)."""
    res = score_rollout(model, traj, cfg.sim)
    if not res.completed:
        return -math.inf
    _, x, _ = traj.test()
    vals = []
    for i in range(traj.n_states):
        if np.ptp(x[:, i]) > 0:
            vals.append(r_squared(res.states[:, i], x[:, i]))
    return min(vals) if vals else math.nan


def run_system(
    spec: SystemSpec,
    proposer: Proposer,
    cfg: LoopConfig,
    split: float = DEFAULT_SPLIT,
    match_fraction: float = MATCH_FRACTION,
    spurious_threshold: float = SPURIOUS_THRESHOLD,
) -> BenchResult:
    grading = {"match_fraction": match_fraction, "spurious_threshold": spurious_threshold, "sim": cfg.sim}
    try:
        traj = generate_trajectory(spec, split)
        result = refine(traj, proposer, cfg)
        base_model = result.baseline.model
        return BenchResult(
            system=spec.name,
            baseline_max_nrmse=result.baseline.rollout.max_nrmse,
            refined_max_nrmse=result.best_score.max_nrmse,
            baseline_r2=rollout_r2(base_model, traj, cfg),
            refined_r2=rollout_r2(result.best_model, traj, cfg),
            baseline_grade=grade_structure(base_model, spec, traj, **grading).grade.value,
            refined_grade=grade_structure(result.best_model, spec, traj, **grading).grade.value,
            stop_reason=result.stop_reason,
            iterations=result.iterations,
        )
    except (SindyLoopError, ValueError, RuntimeError) as exc:
        log.warning("%s failed: %s", spec.name, exc)
        return BenchResult(system=spec.name, error=f"{type(exc).__name__}: {exc}")


def run_bench(
    specs: Sequence[tuple[SystemSpec, Path | None]],
    make_proposer: ProposerFactory,
    cfg: LoopConfig,
    jobs: int = 1,
    split: float = DEFAULT_SPLIT,
    match_fraction: float = MATCH_FRACTION,
    spurious_threshold: float = SPURIOUS_THRESHOLD,
) -> list[BenchResult]:
    """Run every system independently (up to ``jobs`` at once); results keep input order."""

    def one(item: tuple[SystemSpec, Path | None]) -> BenchResult:
        spec, path = item
        try:
            proposer = make_proposer(spec, path)
        except SindyLoopError as exc:
            return BenchResult(system=spec.name, error=f"{type(exc).__name__}: {exc}")
        return run_system(spec, proposer, cfg, split, match_fraction, spurious_threshold)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(one, specs))
