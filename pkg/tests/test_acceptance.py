"""Acceptance criteria 1-11. Every tolerance below is pinned; none may be loosened."""

from __future__ import annotations

import itertools
import json
import math
import shutil
import time

import numpy as np
import pytest

from sindyloop.bench.grading import Grade, grade_structure, truth_model
from sindyloop.bench.march_leuba import MarchLeubaParams, march_leuba_generate, plant_rhs, steady_state
from sindyloop.bench.systems import FIXTURE_DIR, FIXTURE_NAMES, fixture_replay_path, generate_trajectory, load_fixture
from sindyloop.characterize import Family, Preference, PriorSpec, feature_families
from sindyloop.cli import main
from sindyloop.errors import DisallowedSymbol
from sindyloop.grammar import feature_signature, node_count, parse_expression, template_from_strings
from sindyloop.loop import LoopConfig, refine, score_candidate, select_best
from sindyloop.propose import ScriptedProposer
from sindyloop.regress import FittedModel, stlsq
from sindyloop.simulate import SimConfig, integrate, score_rollout

TAU = 0.1


def coef_of(model: FittedModel, state: int, feature: str) -> float:
    sig = feature_signature(parse_expression(feature))
    for c, f in zip(model.coefficients[state], model.template.equations[state]):
        if c != 0.0 and feature_signature(f) == sig:
            return c
    return 0.0


def active_signatures(model: FittedModel, state: int) -> set[str]:
    return {feature_signature(f) for c, f in zip(model.coefficients[state], model.template.equations[state]) if c}


def sigs(*features: str) -> set[str]:
    return {feature_signature(parse_expression(f)) for f in features}


def replay_refine(name: str, cfg: LoopConfig | None = None):
    start = time.perf_counter()
    traj = generate_trajectory(load_fixture(name))
    result = refine(traj, ScriptedProposer.from_file(fixture_replay_path(name)), cfg or LoopConfig())
    return traj, result, time.perf_counter() - start


def test_c01_oscillator_recovery(criterion):
    _, r, secs = replay_refine("odebench24")
    m = r.best_model
    a, b = coef_of(m, 0, "x1"), coef_of(m, 1, "x0")
    ok = (
        active_signatures(m, 0) == sigs("x1")
        and active_signatures(m, 1) == sigs("x0")
        and abs(a - 1.0) <= 0.01 * 1.0
        and abs(b + 2.1) <= 0.01 * 2.1
        and r.stop_reason == "EarlyStop"
        and r.iterations <= 2
        and secs < 30.0
    )
    criterion(1, ok, f"coefs=({a:.6g}, {b:.6g}) stop={r.stop_reason}@{r.iterations} t={secs:.2f}s")


def test_c02_sir_recovery(criterion):
    _, r, secs = replay_refine("odebench31")
    m = r.best_model
    got = (coef_of(m, 0, "x0*x1"), coef_of(m, 1, "x0*x1"), coef_of(m, 1, "x1"))
    want = (-0.4, 0.4, -0.314)
    within = all(abs(g - w) <= 0.05 * abs(w) for g, w in zip(got, want))
    nrmse = r.best_score.max_nrmse
    ok = nrmse <= 1e-3 and within and secs < 30.0
    criterion(2, ok, f"max_nrmse={nrmse:.3g} coefs={tuple(round(g, 5) for g in got)} t={secs:.2f}s")


def test_c03_exponential_pivot(criterion):
    spec = load_fixture("odebench21")
    traj, r, _ = replay_refine("odebench21")
    base = r.baseline
    base_lib = {feature_signature(f) for f in base.model.template.equations[0]}
    surrogate = base_lib == sigs("x0", "x0^2", "x0^3", "sin(x0)", "cos(x0)")
    fams = set()
    for c, f in zip(r.best_model.coefficients[0], r.best_model.template.equations[0]):
        if c:
            fams |= feature_families(f)
    base_grade = grade_structure(base.model, spec, traj).grade
    ok = (
        surrogate
        and r.best_score.max_nrmse < base.rollout.max_nrmse
        and Family.EXPONENTIAL in fams
        and base_grade is Grade.FAILED
    )
    criterion(
        3, ok,
        f"refined={r.best_score.max_nrmse:.3g} < baseline={base.rollout.max_nrmse:.3g}, "
        f"exp in model={Family.EXPONENTIAL in fams}, baseline grade={base_grade.value}",
    )


def test_c04_negative_control(criterion):
    try:
        parse_expression("cot(x1)", 2)
        cot_excluded = False
    except DisallowedSymbol:
        cot_excluded = True
    _, r, secs = replay_refine("odebench35")
    nrmse = r.best_score.max_nrmse
    ok = cot_excluded and r.stop_reason == "BudgetExhausted" and r.iterations == 10 and nrmse > TAU
    criterion(4, ok, f"cot excluded={cot_excluded} stop={r.stop_reason}@{r.iterations} max_nrmse={nrmse:.3g}")


NEUTRAL = PriorSpec(tuple({f: Preference.OPTIONAL for f in Family} for _ in range(2)))
NEUTRAL_1D = PriorSpec(NEUTRAL.per_state[:1])
EXTRAS = ["x0", "x1^2", "x0*x1", "sin(x0)", "cos(x1)", "exp(-0.5*x0)", "x0^3", "x0^2*x1"]


def test_c05_parsimony_selection(criterion, fixture_traj):
    traj = fixture_traj("odebench24")
    cfg = LoopConfig()
    rng = np.random.default_rng(2024)
    agree = 0
    for _ in range(50):
        # lean: truth structure with a tiny coefficient perturbation
        eps = rng.uniform(-1e-7, 1e-7, 2)
        lean = FittedModel(template_from_strings([["x1"], ["x0"]]), ((1.0 + eps[0],), (-2.1 + eps[1],)))
        # rich: truth plus 1-3 extra features with negligible coefficients
        k = int(rng.integers(1, 4))
        state = int(rng.integers(0, 2))
        pool = [e for e in EXTRAS if e != ("x1" if state == 0 else "x0")]
        extra = list(rng.permutation(pool)[:k])
        feats = [["x1"], ["x0"]]
        feats[state] = feats[state] + list(extra)
        coefs = [[1.0], [-2.1]]
        coefs[state] = coefs[state] + list(rng.uniform(-1e-9, 1e-9, len(extra)))
        rich = FittedModel(template_from_strings(feats), tuple(tuple(c) for c in coefs))
        s_lean, s_rich = score_candidate(lean, traj, NEUTRAL, cfg), score_candidate(rich, traj, NEUTRAL, cfg)
        nodes = [sum(node_count(f) for eq in m.template.equations for f in eq) for m in (lean, rich)]
        assert s_lean.completed and s_rich.completed
        assert abs(s_lean.max_nrmse - s_rich.max_nrmse) < 1e-4 and nodes[0] < nodes[1]
        order = [(s_lean, 0), (s_rich, 1)]
        if rng.random() < 0.5:
            order.reverse()
        picked = order[select_best([s for s, _ in order])][1]
        agree += picked == 0
    criterion(5, agree == 50, f"fewer-node candidate selected in {agree}/50 pairs")


def test_c06_blowup_penalty(criterion, fixture_traj):
    traj = fixture_traj("odebench21")
    cfg = LoopConfig()
    blow = FittedModel(template_from_strings([["x0^2"]]), ((1.0,),))
    # from x ~ 5 the blow-up time is ~0.2, far inside the 4.5-unit test horizon
    s_blow = score_candidate(blow, traj, NEUTRAL_1D, cfg)
    rng = np.random.default_rng(6)
    never = True
    for _ in range(200):
        c = float(rng.uniform(-2, 2))
        m = FittedModel(template_from_strings([["x0", "1"]]), ((-abs(c) - 0.01, float(rng.uniform(0, 5))),))
        s = score_candidate(m, traj, NEUTRAL_1D, cfg)
        if not s.completed:
            continue
        never &= select_best([s, s_blow]) == 0 and select_best([s_blow, s]) == 1
    ok = s_blow.J == math.inf and not s_blow.completed and never
    criterion(6, ok, f"blow-up J={s_blow.J} outcome={s_blow.outcome.value}; never selected={never}")


def _exhaustive_support(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    """Smallest column subset reproducing ``b`` exactly (least residual among equals)."""
    scale = np.linalg.norm(b)
    for size in range(1, a.shape[1] + 1):
        best = None
        for cols in itertools.combinations(range(a.shape[1]), size):
            coef, *_ = np.linalg.lstsq(a[:, cols], b, rcond=None)
            res = np.linalg.norm(a[:, cols] @ coef - b)
            if best is None or res < best[0]:
                best = (res, cols)
        if best[0] <= 1e-9 * scale:
            return best[1]
    return tuple(range(a.shape[1]))


def test_c07_stlsq_matches_exhaustive_oracle(criterion):
    rng = np.random.default_rng(7)
    agree = 0
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 7))
        s = int(rng.integers(1, min(3, k) + 1))
        a = rng.normal(size=(200, k))
        support = np.sort(rng.choice(k, s, replace=False))
        true = np.zeros(k)
        true[support] = rng.uniform(0.2, 2.0, s) * rng.choice([-1, 1], s)
        b = a @ true
        res = stlsq(a, b)
        oracle = _exhaustive_support(a, b)
        if res.support == oracle:
            coef, *_ = np.linalg.lstsq(a[:, oracle], b, rcond=None)
            err = float(np.max(np.abs(res.coef[list(oracle)] - coef)))
            if err <= 1e-6:
                agree += 1
            worst = max(worst, err)
    criterion(7, agree >= 95, f"support+coef agreement {agree}/100 (>=95), worst coef diff {worst:.2e}")


def test_c08_integrator_accuracy(criterion):
    osc = FittedModel(template_from_strings([["x1"], ["x0"]]), ((1.0,), (-1.0,)))
    decay = FittedModel(template_from_strings([["x0"]]), ((-1.0,),))
    r1 = integrate(osc, [1.0, 0.0], np.linspace(0, 2 * math.pi, 50), None, SimConfig())
    r2 = integrate(decay, [1.0], np.linspace(0, 1, 11), None, SimConfig())
    e1 = float(np.max(np.abs(r1.states[-1] - [1.0, 0.0])))
    e2 = abs(float(r2.states[-1, 0]) - math.exp(-1))
    criterion(8, e1 < 1e-6 and e2 < 1e-6, f"harmonic endpoint err={e1:.2e}, exp(-1) err={e2:.2e}")


def test_c09_determinism(criterion, tmp_path):
    csv = tmp_path / "osc.csv"
    assert main(["generate", "--spec", str(FIXTURE_DIR / "odebench24.json"), "--out", str(csv)]) == 0
    replay = fixture_replay_path("odebench24")
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}.json"
        code = main(["refine", "--traj", str(csv), "--proposer", f"replay:{replay}", "--out", str(out), "--normalize"])
        assert code == 0
        outs.append(out.read_bytes())
    criterion(9, outs[0] == outs[1], f"run logs byte-identical ({len(outs[0])} bytes)")


def test_c10_bench_over_fixtures(criterion, tmp_path):
    specs = tmp_path / "specs"
    specs.mkdir()
    for name in FIXTURE_NAMES:
        shutil.copy(FIXTURE_DIR / f"{name}.json", specs)
        shutil.copy(FIXTURE_DIR / f"{name}.replay.json", specs)
    start = time.perf_counter()
    assert main(["bench", "--specs", str(specs), "--proposer", "replay", "--out", str(tmp_path / "out")]) == 0
    secs = time.perf_counter() - start
    report = json.loads((tmp_path / "out" / "report.json").read_text())

    def better(row) -> bool:
        b, r = (float(row[k]) for k in ("baseline_max_nrmse", "refined_max_nrmse"))
        return r < b

    rows = report["systems"]
    wins = [row["system"] for row in rows if row["error"] is None and better(row)]
    required = [n for n in FIXTURE_NAMES if n != "odebench35"]
    ok = len(rows) == 5 and len(wins) >= 4 and set(required) <= set(wins) and secs < 300.0
    criterion(10, ok, f"refined better on {len(wins)}/5 ({', '.join(wins)}), t={secs:.1f}s")


def _fd_closed_loop_jacobian(p: MarchLeubaParams) -> np.ndarray:
    f = plant_rhs(p)

    def g(z):
        u = p.kp * (1.0 - z[5]) + p.ki * z[7]
        return np.array(f(0.0, z[:7], [u]) + [1.0 - z[5]])

    z0 = np.append(steady_state(), 0.0)
    h = 1e-7
    return np.column_stack([(g(z0 + h * e) - g(z0 - h * e)) / (2 * h) for e in np.eye(8)])


def test_c11_march_leuba_properties(criterion):
    traj, spec = march_leuba_generate()
    bounded = bool(np.all(np.isfinite(traj.states))) and float(np.max(np.abs(traj.states - steady_state()))) < 1.0
    eig = np.linalg.eigvals(_fd_closed_loop_jacobian(MarchLeubaParams()))
    stable = bool(np.all(eig.real < 0))
    res = score_rollout(truth_model(spec), traj)
    resim = max(res.nrmse) if res.completed else math.inf
    ok = traj.states.shape == (1001, 7) and bounded and stable and resim < 1e-4
    criterion(
        11, ok,
        f"7-state bounded={bounded}, max Re(eig)={eig.real.max():.3g}, re-simulation NRMSE={resim:.2e}",
    )
