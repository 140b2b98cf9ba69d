from __future__ import annotations

import json
import math

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sindyloop.characterize import derive_priors, summarize
from sindyloop.errors import (
    DisallowedForm,
    DisallowedSymbol,
    DuplicateFeature,
    ExprSyntaxError,
    LinearityViolation,
    MalformedResponse,
    ProposerUnavailable,
    TooManyTerms,
)
from sindyloop.grammar import template_from_strings
from sindyloop.propose import (
    SECTIONS,
    MutationProposer,
    PromptContext,
    Reason,
    RejectedEntry,
    RejectionMemory,
    RemoteProposer,
    ScriptedProposer,
    build_prompt,
    extract_candidates,
    novelty_filter,
    parse_candidate,
    reason_for,
    rollout_diagnostics,
    section_order,
)
from sindyloop.regress import Trajectory


def _traj():
    t = np.linspace(0, 10, 200)
    return Trajectory(t, np.column_stack([np.cos(t), np.exp(-t)]), 140)


def make_ctx(**kw):
    tr = _traj()
    summary = summarize(tr)
    base = dict(
        state_names=("x0", "x1"),
        input_names=(),
        units={"x0": "m"},
        known_parameters={"g": 9.81},
        summary=summary,
        best_equations=("dx0/dt = 1*x1", "dx1/dt = -1*x0"),
        best_nrmse=(0.01, 0.5),
        best_template=template_from_strings([["x1"], ["x0"]]),
        baseline_equations=("dx0/dt = 0", "dx1/dt = 0"),
        trust=(True, False),
        priors=derive_priors(summary),
        error_focus=1,
    )
    base.update(kw)
    return PromptContext(**base)


# ---------------------------------------------------------------- prompt


def test_prompt_section_order_and_determinism():
    ctx = make_ctx()
    p = build_prompt(ctx)
    assert section_order(p) == list(SECTIONS)
    assert build_prompt(make_ctx()) == p


def test_empty_rejections_keep_header():
    p = build_prompt(make_ctx())
    body = p.split("## REJECTED CANDIDATES\n", 1)[1].split("## OUTPUT FORMAT", 1)[0]
    assert body.strip() == ""


def test_error_focus_names_state_and_nrmse():
    p = build_prompt(make_ctx())
    focus = p.split("## ERROR FOCUS\n", 1)[1].splitlines()[0]
    assert "x1" in focus and "0.5" in focus


def test_prompt_mentions_units_parameters_and_trust():
    p = build_prompt(make_ctx())
    assert "[m]" in p and "parameter g = 9.81" in p
    assert "[reliable]" in p and "[unreliable]" in p
    assert "```json" in p


def test_rejection_memory_truncates_oldest_first():
    mem = RejectionMemory(3)
    for k in range(5):
        mem.add(RejectedEntry(f"s{k}", f"t{k}", Reason.SYNTAX))
    assert [e.text for e in mem.entries()] == ["t2", "t3", "t4"]
    p = build_prompt(make_ctx(rejected=mem.entries()))
    assert "t1" not in p and "- t4 :: syntax" in p


def test_prompt_size_bounded_by_memory():
    mem = RejectionMemory(20)
    sizes = []
    for k in range(60):
        mem.add(RejectedEntry(f"s{k}", f"candidate number {k:03d}", Reason.DUPLICATE))
        sizes.append(len(build_prompt(make_ctx(rejected=mem.entries()))))
    assert max(sizes[20:]) == min(sizes[20:])


def test_rollout_diagnostics():
    t = np.linspace(0, 20, 400)
    truth = np.sin(t)[:, None]
    (g,) = rollout_diagnostics((0.5 * np.sin(t - 0.5))[:, None], truth, t)
    assert g.amplitude_ratio == pytest.approx(0.5, rel=0.1)
    assert g.phase_lag == pytest.approx(0.5, abs=0.1)
    (g,) = rollout_diagnostics(truth + 0.01 * t[:, None], truth, t)
    assert g.drift_slope == pytest.approx(0.01, rel=1e-9)
    assert g.amplitude_ratio == pytest.approx(1.0, rel=0.2)


# ---------------------------------------------------------------- scripted


def test_scripted_replay_contract(tmp_path):
    docs = [template_from_strings([["x1"], ["x0"]]).to_doc(), template_from_strings([["x0"], ["x1"]]).to_doc()]
    path = tmp_path / "r.replay.json"
    path.write_text(json.dumps({"batches": [[docs[0]], [docs[1], docs[0]]]}))
    prop = ScriptedProposer.from_file(path)
    prompt = build_prompt(make_ctx())
    b1 = prop.propose(prompt, 4, 0.3)
    b2 = prop.propose(prompt, 1, 0.3)
    assert json.loads(b1.candidates[0]) == docs[0]
    assert len(b2.candidates) == 1 and json.loads(b2.candidates[0]) == docs[1]
    with pytest.raises(ProposerUnavailable, match="exhausted"):
        prop.propose(prompt, 4, 0.3)


def test_scripted_checks_section_order():
    prop = ScriptedProposer([[{"equations": []}]])
    with pytest.raises(ValueError):
        prop.propose("## METADATA\n## BASELINE\n", 1, 0.3)


def test_scripted_missing_file(tmp_path):
    with pytest.raises(ProposerUnavailable):
        ScriptedProposer.from_file(tmp_path / "nope.json")


# ---------------------------------------------------------------- mutation


def test_mutation_is_seeded():
    ctx = make_ctx()
    prompt = build_prompt(ctx)
    a = [MutationProposer(42).propose(prompt, 4, 0.3, ctx=ctx).candidates for _ in range(2)]
    b = MutationProposer(43).propose(prompt, 4, 0.3, ctx=ctx).candidates
    assert a[0] == a[1]
    assert a[0] != b


def test_mutation_candidates_parse_and_avoid_discouraged():
    ctx = make_ctx()
    prop = MutationProposer(7)
    for _ in range(10):
        for raw in prop.propose(build_prompt(ctx), 8, 0.9, ctx=ctx).candidates:
            parsed = parse_candidate(raw, 2, 0)
            assert parsed.template is not None
            # x1 decays monotonically, so trig is discouraged for dx1/dt
            assert not any("sin" in f or "cos" in f for f in json.loads(raw)["equations"][1]["features"])


# ---------------------------------------------------------------- remote

REPLY = """Here are my ideas.

```json
[{"equations": [{"state": 0, "features": ["x1"]}, {"state": 1, "features": ["x0", "x0^3"]}]}]
```
Hope this helps."""


def _chat(content):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def remote(handler, **kw):
    return RemoteProposer("https://llm.invalid/v1/chat", "m", "k", transport=httpx.MockTransport(handler), sleep=lambda s: None, **kw)


def test_remote_extracts_one_template():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers["authorization"]
        return _chat(REPLY)

    batch = remote(handler).propose(build_prompt(make_ctx()), 4, 0.3)
    assert len(batch.candidates) == 1
    assert seen["auth"] == "Bearer k"
    body = seen["body"]
    assert body["model"] == "m" and body["temperature"] == pytest.approx(0.5)
    assert [m["role"] for m in body["messages"]] == ["system", "user"]


def test_temperature_mapping():
    assert RemoteProposer.temperature(0.0) == pytest.approx(0.2)
    assert RemoteProposer.temperature(1.0) == pytest.approx(1.2)


def test_remote_retries_with_backoff_then_succeeds():
    calls, sleeps = [], []

    def handler(request):
        calls.append(1)
        return httpx.Response(503) if len(calls) < 3 else _chat(REPLY)

    p = RemoteProposer("https://llm.invalid", "m", "k", transport=httpx.MockTransport(handler), sleep=sleeps.append, backoff=0.5)
    assert len(p.propose("x", 1, 0.0).candidates) == 1
    assert len(calls) == 3 and sleeps == [0.5, 1.0]


def test_remote_gives_up_after_retries():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("down")

    with pytest.raises(ProposerUnavailable):
        remote(handler).propose("x", 1, 0.0)
    assert len(calls) == 3


def test_remote_auth_failure_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401)

    with pytest.raises(ProposerUnavailable):
        remote(handler).propose("x", 1, 0.0)
    assert len(calls) == 1


def test_remote_prose_only_is_malformed():
    with pytest.raises(MalformedResponse):
        remote(lambda r: _chat("I cannot help with that.")).propose("x", 1, 0.0)


def test_remote_missing_credential(monkeypatch):
    monkeypatch.delenv("SINDYLOOP_API_KEY", raising=False)
    with pytest.raises(ProposerUnavailable):
        RemoteProposer.from_env("https://llm.invalid", "m")
    monkeypatch.setenv("SINDYLOOP_API_KEY", "secret")
    p = RemoteProposer.from_env("https://llm.invalid", "m")
    assert "secret" not in repr(p)


def test_extract_candidates_shapes():
    doc = {"equations": [{"state": 0, "features": ["x0"]}]}
    assert len(extract_candidates(f"```json\n{json.dumps(doc)}\n```")) == 1
    assert len(extract_candidates(f"```\n{json.dumps({'candidates': [doc, doc]})}\n```")) == 2
    with pytest.raises(MalformedResponse):
        extract_candidates("```json\nnot json\n```")


# ---------------------------------------------------------------- parsing, novelty


@pytest.mark.parametrize(
    "exc, reason",
    [
        (ExprSyntaxError("x"), Reason.SYNTAX),
        (DisallowedSymbol("x"), Reason.DISALLOWED_SYMBOL),
        (DisallowedForm("x"), Reason.DISALLOWED_SYMBOL),
        (LinearityViolation("x"), Reason.LINEARITY),
        (TooManyTerms("x"), Reason.TOO_MANY_TERMS),
        (DuplicateFeature("x"), Reason.DUPLICATE),
    ],
)
def test_reason_mapping(exc, reason):
    assert reason_for(exc) is reason


def test_parse_candidate_reasons():
    assert parse_candidate("{oops", 1, 0).reason is Reason.SYNTAX
    bad = json.dumps({"equations": [{"state": 0, "features": ["tan(x0)"]}]})
    assert parse_candidate(bad, 1, 0).reason is Reason.DISALLOWED_SYMBOL
    lin = json.dumps({"equations": [{"state": 0, "features": ["exp(c*x0)"]}]})
    assert parse_candidate(lin, 1, 0).reason is Reason.LINEARITY


def T(*eqs):
    return template_from_strings([list(e) for e in eqs])


def test_novelty_examples():
    best = T(["x1"], ["x0"])
    history = {best.signature()}
    kept, dropped = novelty_filter([T(["x1"], ["x0"]), T(["x1", "x0"], ["x0"]), T(["x0", "x1"], ["x0"])], history)
    assert dropped[0] == (0, Reason.DUPLICATE, "previously tested")
    assert dropped[1][0] == 2 and dropped[1][1] is Reason.DUPLICATE
    assert [k.signature() for k in kept] == [T(["x1", "x0"], ["x0"]).signature()]
    assert history == {best.signature()}


POOL = ["x0", "x1", "x0^2", "x0*x1", "sin(x0)", "exp(-1*x1)"]
templates = st.lists(st.sampled_from(POOL), min_size=1, max_size=3, unique=True).map(lambda f: T(f, ["x0"]))


@given(st.lists(templates, max_size=6), st.lists(templates, max_size=4))
def test_novelty_idempotent(batch, past):
    history = {t.signature() for t in past}
    once, _ = novelty_filter(batch, history)
    twice, dropped = novelty_filter(once, history)
    assert [t.signature() for t in twice] == [t.signature() for t in once]
    assert dropped == []
    assert not any(t.signature() in history for t in once)


def test_diagnostics_handle_flat_truth():
    t = np.linspace(0, 1, 50)
    (g,) = rollout_diagnostics(np.zeros((50, 1)), np.zeros((50, 1)), t)
    assert math.isfinite(g.drift_slope)
