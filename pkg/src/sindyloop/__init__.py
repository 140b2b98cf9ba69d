"""Sparse identification of ODE models with a proposal-guided refinement loop.

The core pieces: an expression grammar for candidate features
(:mod:`sindyloop.grammar`), sequentially thresholded least squares
(:mod:`sindyloop.regress`), rollout scoring (:mod:`sindyloop.simulate`),
data characterization and priors (:mod:`sindyloop.characterize`), candidate
proposers (:mod:`sindyloop.propose`) and the loop itself (:mod:`sindyloop.loop`).
"""

__version__ = "0.1.0"

from .characterize import DataSummary, PriorSpec, derive_priors, summarize
from .errors import SindyLoopError
from .grammar import EquationTemplate, parse_expression, parse_template, validate_template
from .loop import LoopConfig, RefinementResult, refine, run_baseline
from .propose import MutationProposer, RemoteProposer, ScriptedProposer
from .regress import FittedModel, Trajectory, fit_model, read_trajectory, stlsq, write_trajectory
from .simulate import Outcome, RolloutResult, SimConfig, integrate, score_rollout

__all__ = [
    "DataSummary",
    "EquationTemplate",
    "FittedModel",
    "LoopConfig",
    "MutationProposer",
    "Outcome",
    "PriorSpec",
    "RefinementResult",
    "RemoteProposer",
    "RolloutResult",
    "ScriptedProposer",
    "SimConfig",
    "SindyLoopError",
    "Trajectory",
    "__version__",
    "derive_priors",
    "fit_model",
    "integrate",
    "parse_expression",
    "parse_template",
    "read_trajectory",
    "refine",
    "run_baseline",
    "score_rollout",
    "stlsq",
    "summarize",
    "validate_template",
    "write_trajectory",
]
