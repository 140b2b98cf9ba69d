"""Structural Good/Failed grading of a fitted model against the truth equations."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from ..characterize import Family, feature_families
from ..grammar import EquationTemplate, feature_signature, split_terms
from ..regress import FittedModel, Trajectory
from ..simulate import SimConfig, score_rollout
from .systems import SystemSpec, generate_trajectory

MATCH_FRACTION = 0.5
SPURIOUS_THRESHOLD = 0.1
# ablated rollouts that stall are treated as failed rather than waited on
GRADING_SIM = SimConfig(timeout=2.0)


class Grade(str, enum.Enum):
    GOOD = "Good"
    FAILED = "Failed"


@dataclass(frozen=True)
class StructuralGrade:
    grade: Grade
    matched: int
    truth_terms: int
    spurious_family: bool
    spurious: tuple[str, ...] = ()

    def to_doc(self) -> dict:
        return {
            "grade": self.grade.value,
            "matched": self.matched,
            "truth_terms": self.truth_terms,
            "spurious_family": self.spurious_family,
            "spurious": list(self.spurious),
        }


def truth_model(spec: SystemSpec) -> FittedModel:
    """The truth equations expanded into signed terms, as a fitted model."""
    feats, coefs = [], []
    for eq in spec.equations:
        terms = split_terms(eq)
        feats.append(tuple(f for _, f in terms))
        coefs.append(tuple(c for c, _ in terms))
    return FittedModel(EquationTemplate(tuple(feats), spec.n_inputs), tuple(coefs))


def _zero_family(model: FittedModel, state: int, family: Family) -> FittedModel:
    coefs = [list(c) for c in model.coefficients]
    for k, f in enumerate(model.template.equations[state]):
        if family in feature_families(f):
            coefs[state][k] = 0.0
    return model.with_coefficients(coefs)


def grade_structure(
    model: FittedModel,
    spec: SystemSpec,
    traj: Trajectory | None = None,
    match_fraction: float = MATCH_FRACTION,
    spurious_threshold: float = SPURIOUS_THRESHOLD,
    sim: SimConfig | None = None,
) -> StructuralGrade:
    """Count truth terms recovered (ignoring coefficients) and test for spurious families.

    A function family present in a fitted equation but absent from that
    truth equation is spurious when zeroing its coefficients moves the
    test-rollout max NRMSE by more than ``spurious_threshold`` (absolute),
    or changes whether the rollout completes.
    """
    if model.n_states != spec.dim:
        raise ValueError(f"model has {model.n_states} states, spec {spec.dim}")
    matched = total = 0
    extra: list[tuple[int, Family]] = []
    for i, eq in enumerate(spec.equations):
        truth = split_terms(eq)
        truth_sigs = {feature_signature(f) for _, f in truth}
        truth_fams: set[Family] = set()
        for _, f in truth:
            truth_fams |= feature_families(f)
        active = [f for c, f in zip(model.coefficients[i], model.template.equations[i]) if c != 0.0]
        model_sigs = {feature_signature(f) for f in active}
        total += len(truth_sigs)
        matched += len(truth_sigs & model_sigs)
        model_fams: set[Family] = set()
        for f in active:
            model_fams |= feature_families(f)
        extra.extend((i, fam) for fam in sorted(model_fams - truth_fams, key=lambda f: f.value))

    spurious: list[str] = []
    if extra:
        traj = traj if traj is not None else generate_trajectory(spec)
        sim = sim if sim is not None else GRADING_SIM
        full = score_rollout(model, traj, sim)
        for i, fam in extra:
            if not full.completed:
                # a failed rollout cannot clear any family of blame
                spurious.append(f"x{i}:{fam.value}")
                continue
            reduced = score_rollout(_zero_family(model, i, fam), traj, sim)
            if not reduced.completed or abs(reduced.max_nrmse - full.max_nrmse) > spurious_threshold:
                spurious.append(f"x{i}:{fam.value}")
    enough = matched >= math.ceil(total * match_fraction)
    grade = Grade.GOOD if enough and not spurious else Grade.FAILED
    return StructuralGrade(grade, matched, total, bool(spurious), tuple(spurious))
