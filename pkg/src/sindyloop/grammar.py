"""Restricted symbolic grammar for candidate right-hand-side features.

Expressions are immutable trees over states ``x0..x{d-1}``, exogenous
inputs ``u0..``, the time symbol ``t`` and numeric constants. The operator
set is deliberately small: ``+ - * / ^`` (constant integer or half-integer
exponents only) and the unary functions ``sin cos exp log sqrt abs``.
``tan`` and ``cot`` exist only in the *extended* grammar used to write down
ground-truth systems; candidate features can never contain them.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DisallowedForm,
    DisallowedSymbol,
    DuplicateFeature,
    EvaluationError,
    ExprSyntaxError,
    LinearityViolation,
    TooManyTerms,
)

UNARY_FUNCS = ("sin", "cos", "exp", "log", "sqrt", "abs")
TRUTH_ONLY_FUNCS = ("tan", "cot")
BINARY_OPS = ("add", "sub", "mul", "div", "pow")
LEAF_KINDS = ("const", "x", "u", "t")
NODE_KINDS = frozenset(LEAF_KINDS + ("neg",) + UNARY_FUNCS + BINARY_OPS)
EXTENDED_NODE_KINDS = NODE_KINDS | frozenset(TRUTH_ONLY_FUNCS)

# rates allowed inside exp(rate * x_i) for candidate features
EXP_RATE_GRID = (-2.0, -1.0, -0.5, -0.25, 0.25, 0.5, 1.0, 2.0)

DEFAULT_MAX_TERMS = 8
COMPLEXITY_NORMALIZER = 50.0
DENOM_EPS = 1e-12


@dataclass(frozen=True)
class Expr:
    """One node of an expression tree.

    ``value`` holds the number for ``const`` nodes and the index for ``x``
    and ``u`` leaves; it is ``None`` everywhere else.
    """

    kind: str
    value: float | int | None = None
    children: tuple["Expr", ...] = field(default=())

    def __str__(self) -> str:
        return to_text(self)

    def __repr__(self) -> str:
        return f"Expr({to_text(self)!r})"


def const(v: float) -> Expr:
    return Expr("const", float(v))


def state(i: int) -> Expr:
    return Expr("x", int(i))


def inp(j: int) -> Expr:
    return Expr("u", int(j))


TIME = Expr("t")


def unary(kind: str, arg: Expr) -> Expr:
    return Expr(kind, None, (arg,))


def binary(kind: str, a: Expr, b: Expr) -> Expr:
    return Expr(kind, None, (a, b))


def add(a: Expr, b: Expr) -> Expr:
    return binary("add", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    return binary("mul", a, b)


def power(base: Expr, exponent: float) -> Expr:
    return binary("pow", base, const(exponent))


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
    r")"
)
_STATE_RE = re.compile(r"x(\d+)")
_INPUT_RE = re.compile(r"u(\d+)")
# identifiers an LLM typically uses for unknown coefficients
_PLACEHOLDER_RE = re.compile(r"(?:c|C|theta|a|b|k|w|coef|coeff)\d*")

_PLACEHOLDER = "coef"


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens: list[tuple[str, str, int]] = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {text[pos:pos + 1]!r} at offset {pos}")
        kind = m.lastgroup
        if kind is None:
            break
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, n_states: int | None, n_inputs: int | None, extended: bool):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.n_states = n_states
        self.n_inputs = n_inputs
        self.funcs = UNARY_FUNCS + TRUTH_ONLY_FUNCS if extended else UNARY_FUNCS

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def next(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, op: str) -> None:
        kind, val, pos = self.next()
        if kind != "op" or val != op:
            got = val or "end of input"
            raise ExprSyntaxError(f"expected {op!r} at offset {pos}, got {got!r}")

    def parse(self) -> Expr:
        if self.peek()[0] == "end":
            raise ExprSyntaxError("empty expression")
        node = self.sum()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {val!r} at offset {pos}")
        return node

    def sum(self) -> Expr:
        node = self.product()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                rhs = self.product()
                node = binary("add" if val == "+" else "sub", node, rhs)
            else:
                return node

    def product(self) -> Expr:
        node = self.signed()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.next()
                rhs = self.signed()
                node = binary("mul" if val == "*" else "div", node, rhs)
            else:
                return node

    def signed(self) -> Expr:
        kind, val, _ = self.peek()
        if kind == "op" and val in "+-":
            self.next()
            operand = self.signed()
            if val == "+":
                return operand
            if operand.kind == "const":
                return const(-operand.value)
            return unary("neg", operand)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, val, pos = self.peek()
        if kind == "op" and val == "^":
            self.next()
            exponent = self.signed()
            return binary("pow", base, const(_exponent_value(exponent, pos)))
        return base

    def atom(self) -> Expr:
        kind, val, pos = self.next()
        if kind == "num":
            return const(float(val))
        if kind == "op" and val == "(":
            node = self.sum()
            self.expect(")")
            return node
        if kind == "id":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if val not in self.funcs:
                    if _is_variable_name(val):
                        raise ExprSyntaxError(f"{val!r} cannot be called (offset {pos})")
                    raise DisallowedSymbol(f"function {val!r} is not in the grammar")
                self.next()
                arg = self.sum()
                self.expect(")")
                return unary(val, arg)
            return self.identifier(val, pos)
        if kind == "end":
            raise ExprSyntaxError("unexpected end of input")
        raise ExprSyntaxError(f"unexpected {val!r} at offset {pos}")

    def identifier(self, name: str, pos: int) -> Expr:
        if name == "t":
            return TIME
        m = _STATE_RE.fullmatch(name)
        if m:
            idx = int(m.group(1))
            if self.n_states is not None and idx >= self.n_states:
                raise DisallowedSymbol(f"state {name} out of range for dimension {self.n_states}")
            return state(idx)
        m = _INPUT_RE.fullmatch(name)
        if m:
            idx = int(m.group(1))
            if self.n_inputs is not None and idx >= self.n_inputs:
                raise DisallowedSymbol(f"input {name} out of range ({self.n_inputs} inputs)")
            return inp(idx)
        if name in UNARY_FUNCS + TRUTH_ONLY_FUNCS:
            raise ExprSyntaxError(f"function {name!r} used without an argument (offset {pos})")
        if _PLACEHOLDER_RE.fullmatch(name):
            return Expr(_PLACEHOLDER, None)
        raise DisallowedSymbol(f"unknown identifier {name!r}")


def _is_variable_name(name: str) -> bool:
    return name == "t" or bool(_STATE_RE.fullmatch(name) or _INPUT_RE.fullmatch(name))


def _exponent_value(node: Expr, pos: int) -> float:
    if _contains(node, lambda n: n.kind in ("x", "u", "t")):
        raise DisallowedForm(f"variable exponent at offset {pos}")
    if _contains(node, lambda n: n.kind == _PLACEHOLDER):
        raise LinearityViolation("coefficient placeholder inside an exponent")
    try:
        with np.errstate(all="raise"):
            value = float(evaluate(node, np.zeros((1, 0)), None, np.zeros(1))[0])
    except (EvaluationError, FloatingPointError) as exc:
        raise DisallowedForm(f"exponent at offset {pos} is not a finite constant") from exc
    if not math.isfinite(value) or not _is_half_integer(value):
        raise DisallowedForm(f"exponent {value!r} must be an integer or half-integer constant")
    return value


def _is_half_integer(v: float) -> bool:
    return abs(2.0 * v - round(2.0 * v)) < 1e-12


def _contains(node: Expr, pred: Callable[[Expr], bool]) -> bool:
    if pred(node):
        return True
    return any(_contains(c, pred) for c in node.children)


def _strip_placeholder(node: Expr) -> Expr:
    """Remove an outer coefficient factor (``c*phi``); reject any other use."""
    if not _contains(node, lambda n: n.kind == _PLACEHOLDER):
        return node
    factors = _mul_factors(node)
    holders = [f for f in factors if f.kind == _PLACEHOLDER]
    rest = [f for f in factors if f.kind != _PLACEHOLDER]
    if len(holders) == 1 and not any(_contains(f, lambda n: n.kind == _PLACEHOLDER) for f in rest):
        if not rest:
            return const(1.0)
        out = rest[0]
        for f in rest[1:]:
            out = mul(out, f)
        return out
    if _placeholder_in_nonlinear(node, False):
        raise LinearityViolation("coefficient placeholder inside a nonlinear function, denominator or exponent")
    raise DisallowedForm("coefficient placeholders may only appear as an outer multiplier")


def _mul_factors(node: Expr) -> list[Expr]:
    if node.kind == "mul":
        return _mul_factors(node.children[0]) + _mul_factors(node.children[1])
    return [node]


def _placeholder_in_nonlinear(node: Expr, inside: bool) -> bool:
    if node.kind == _PLACEHOLDER:
        return inside
    if node.kind in UNARY_FUNCS or node.kind in TRUTH_ONLY_FUNCS:
        return _placeholder_in_nonlinear(node.children[0], True)
    if node.kind == "div":
        return _placeholder_in_nonlinear(node.children[0], inside) or _placeholder_in_nonlinear(node.children[1], True)
    if node.kind == "pow":
        return _placeholder_in_nonlinear(node.children[0], True)
    return any(_placeholder_in_nonlinear(c, inside) for c in node.children)


def parse_expression(
    text: str,
    n_states: int | None = None,
    n_inputs: int | None = None,
    extended: bool = False,
) -> Expr:
    """Parse infix text into an :class:`Expr`.

    A single coefficient placeholder used as an outer multiplier (``c*x0``)
    is tolerated and dropped, since every feature already carries its own
    fitted coefficient. Placeholders anywhere else raise
    :class:`LinearityViolation` or :class:`DisallowedForm`.

    >>> to_text(parse_expression("x0^2 * x1"))
    'x0^2*x1'
    """
    if not isinstance(text, str):
        raise ExprSyntaxError(f"expected a string, got {type(text).__name__}")
    node = _Parser(text, n_states, n_inputs, extended).parse()
    return _strip_placeholder(node)


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4}
_SYMBOL = {"add": " + ", "sub": " - ", "mul": "*", "div": "/"}


def _fmt_number(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _prec(node: Expr) -> int:
    if node.kind == "const" and node.value < 0:
        return 3
    return _PREC.get(node.kind, 5)


def to_text(node: Expr) -> str:
    """Render ``node`` in the surface syntax; the output always reparses."""
    k = node.kind
    if k == "const":
        return _fmt_number(node.value)
    if k == "x":
        return f"x{node.value}"
    if k == "u":
        return f"u{node.value}"
    if k == "t":
        return "t"
    if k == _PLACEHOLDER:
        return "c"
    if k == "neg":
        child = node.children[0]
        inner = to_text(child)
        return f"-({inner})" if _prec(child) < 3 else f"-{inner}"
    if k in UNARY_FUNCS or k in TRUTH_ONLY_FUNCS:
        return f"{k}({to_text(node.children[0])})"
    a, b = node.children
    if k == "pow":
        base = to_text(a)
        if _prec(a) <= 4:
            base = f"({base})"
        return f"{base}^{_fmt_number(b.value)}"
    p = _PREC[k]
    left = to_text(a)
    if _prec(a) < p:
        left = f"({left})"
    right = to_text(b)
    rp = _prec(b)
    # negative constants and negations parse fine after a binary operator
    if rp < p:
        right = f"({right})"
    elif rp == p and k in ("sub", "div"):
        right = f"({right})"
    return f"{left}{_SYMBOL[k]}{right}"


def node_count(node: Expr) -> int:
    return 1 + sum(node_count(c) for c in node.children)


def variables(node: Expr) -> set[tuple[str, int | None]]:
    if node.kind in ("x", "u"):
        return {(node.kind, node.value)}
    if node.kind == "t":
        return {("t", None)}
    out: set[tuple[str, int | None]] = set()
    for c in node.children:
        out |= variables(c)
    return out


def kinds(node: Expr) -> set[str]:
    out = {node.kind}
    for c in node.children:
        out |= kinds(c)
    return out


# ---------------------------------------------------------------------------
# canonical form and signatures
# ---------------------------------------------------------------------------
# Canonical nodes are nested tuples:
#   ("c", v) ("x", i) ("u", j) ("t",) (fn, arg) ("+", kids) ("*", kids)
#   ("/", num, den) ("^", base, exponent)

_COMMUTATIVE = ("+", "*")


def _sig_number(v: float) -> str:
    s = f"{v:.6g}"
    return "0" if s in ("-0", "0") else s


def _render(c: tuple) -> str:
    tag = c[0]
    if tag == "c":
        return _sig_number(c[1])
    if tag in ("x", "u"):
        return f"{tag}{c[1]}"
    if tag == "t":
        return "t"
    if tag in _COMMUTATIVE:
        name = "add" if tag == "+" else "mul"
        return f"{name}({','.join(_render(k) for k in c[1])})"
    if tag == "/":
        return f"div({_render(c[1])},{_render(c[2])})"
    if tag == "^":
        return f"pow({_render(c[1])},{_sig_number(c[2])})"
    return f"{tag}({_render(c[1])})"


def _const_value(c: tuple) -> float | None:
    return c[1] if c[0] == "c" else None


_SCALAR_FUNCS: dict[str, Callable[[float], float]] = {
    "sin": math.sin,
    "cos": math.cos,
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "abs": abs,
    "tan": math.tan,
    "cot": lambda v: 1.0 / math.tan(v),
}


def _fold_unary(tag: str, v: float) -> float | None:
    try:
        out = _SCALAR_FUNCS[tag](v)
    except (ValueError, OverflowError, ZeroDivisionError):
        return None
    return out if math.isfinite(out) else None


def _nary(tag: str, kids: list[tuple]) -> tuple:
    flat: list[tuple] = []
    for k in kids:
        if k[0] == tag:
            flat.extend(k[1])
        else:
            flat.append(k)
    consts = [k[1] for k in flat if k[0] == "c"]
    rest = [k for k in flat if k[0] != "c"]
    if tag == "+":
        total = math.fsum(consts)
        identity = 0.0
    else:
        total = math.prod(consts) if consts else 1.0
        identity = 1.0
    if consts and (total != identity or not rest):
        rest.append(("c", total))
    if not rest:
        return ("c", identity)
    if len(rest) == 1:
        return rest[0]
    rest.sort(key=_render)
    return (tag, tuple(rest))


def _canon(node: Expr) -> tuple:
    k = node.kind
    if k == "const":
        return ("c", float(node.value))
    if k in ("x", "u"):
        return (k, node.value)
    if k == "t":
        return ("t",)
    if k == "neg":
        return _nary("*", [("c", -1.0), _canon(node.children[0])])
    if k in UNARY_FUNCS or k in TRUTH_ONLY_FUNCS:
        arg = _canon(node.children[0])
        v = _const_value(arg)
        if v is not None:
            folded = _fold_unary(k, v)
            if folded is not None:
                return ("c", folded)
        return (k, arg)
    a, b = (_canon(c) for c in node.children)
    if k == "add":
        return _nary("+", [a, b])
    if k == "sub":
        return _nary("+", [a, _nary("*", [("c", -1.0), b])])
    if k == "mul":
        return _nary("*", [a, b])
    if k == "div":
        if _const_value(b) == 1.0:
            return a
        return ("/", a, b)
    if k == "pow":
        e = float(node.children[1].value)
        if e == 1.0:
            return a
        if e == 0.0:
            return ("c", 1.0)
        av = _const_value(a)
        if av is not None:
            try:
                folded = av ** e
            except (ZeroDivisionError, OverflowError):
                folded = None
            if isinstance(folded, float) and math.isfinite(folded):
                return ("c", folded)
        return ("^", a, e)
    raise DisallowedForm(f"unknown node kind {k!r}")


def _from_canon(c: tuple) -> Expr:
    tag = c[0]
    if tag == "c":
        return const(c[1])
    if tag == "x":
        return state(c[1])
    if tag == "u":
        return inp(c[1])
    if tag == "t":
        return TIME
    if tag in _COMMUTATIVE:
        kids = [_from_canon(k) for k in c[1]]
        out = kids[0]
        for nxt in kids[1:]:
            out = binary("add" if tag == "+" else "mul", out, nxt)
        return out
    if tag == "/":
        return binary("div", _from_canon(c[1]), _from_canon(c[2]))
    if tag == "^":
        return power(_from_canon(c[1]), c[2])
    return unary(tag, _from_canon(c[1]))


def canonicalize(node: Expr) -> Expr:
    """Fold constants and sort commutative operands; no distribution."""
    return _from_canon(_canon(node))


def canonical_signature(node: Expr) -> str:
    """Deterministic string identity of ``node`` up to reordering and folding."""
    return _render(_canon(node))


def _split_scale(c: tuple) -> tuple[float, tuple]:
    if c[0] == "c":
        return c[1], ("c", 1.0)
    if c[0] == "*":
        scale = math.prod(k[1] for k in c[1] if k[0] == "c")
        rest = [k for k in c[1] if k[0] != "c"]
        if len(rest) == 1:
            return scale, rest[0]
        return scale, ("*", tuple(rest))
    return 1.0, c


def feature_signature(node: Expr) -> str:
    """Signature with any overall numeric factor removed.

    Two features that differ only by a constant multiple span the same
    regression column, so they share this signature.
    """
    return _render(_split_scale(_canon(node))[1])


def split_terms(node: Expr) -> list[tuple[float, Expr]]:
    """Expand a sum into ``(coefficient, term)`` pairs (no distribution)."""
    c = _canon(node)
    kids = c[1] if c[0] == "+" else (c,)
    return [(scale, _from_canon(term)) for scale, term in (_split_scale(k) for k in kids)]


# ---------------------------------------------------------------------------
# numeric evaluation
# ---------------------------------------------------------------------------


def _first_bad(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


def evaluate(
    node: Expr,
    states: np.ndarray,
    inputs: np.ndarray | None,
    times: np.ndarray,
    label: str | None = None,
) -> np.ndarray:
    """Vectorised evaluation over ``n`` samples.

    ``states`` is ``n x d``; ``inputs`` is ``n x m`` or ``None``. Domain
    violations raise :class:`EvaluationError` naming the first offending
    sample.
    """
    n = len(times)
    label = label if label is not None else to_text(node)

    def fail(msg: str, mask: np.ndarray) -> EvaluationError:
        idx = _first_bad(mask)
        return EvaluationError(f"{msg} in feature {label!r} at sample {idx}", sample=idx, feature=label)

    def ev(nd: Expr) -> np.ndarray:
        k = nd.kind
        if k == "const":
            return np.full(n, float(nd.value))
        if k == "x":
            if nd.value >= states.shape[1]:
                raise DimensionMismatch(f"x{nd.value} requested but states have {states.shape[1]} columns")
            return states[:, nd.value].astype(float)
        if k == "u":
            if inputs is None or nd.value >= inputs.shape[1]:
                raise DimensionMismatch(f"u{nd.value} requested but no such input column")
            return inputs[:, nd.value].astype(float)
        if k == "t":
            return np.asarray(times, dtype=float)
        if k == _PLACEHOLDER:
            raise EvaluationError(f"unresolved coefficient placeholder in {label!r}", feature=label)
        if k == "neg":
            return -ev(nd.children[0])
        if k in UNARY_FUNCS or k in TRUTH_ONLY_FUNCS:
            a = ev(nd.children[0])
            if k == "log" and np.any(a <= 0):
                raise fail("log of non-positive value", a <= 0)
            if k == "sqrt" and np.any(a < 0):
                raise fail("sqrt of negative value", a < 0)
            with np.errstate(all="ignore"):
                if k == "cot":
                    tan = np.tan(a)
                    if np.any(np.abs(tan) < DENOM_EPS):
                        raise fail("cot pole", np.abs(tan) < DENOM_EPS)
                    out = 1.0 / tan
                else:
                    out = getattr(np, "abs" if k == "abs" else k)(a)
            if not np.all(np.isfinite(out)):
                raise fail(f"non-finite {k}", ~np.isfinite(out))
            return out
        a = ev(nd.children[0])
        if k == "pow":
            e = float(nd.children[1].value)
            if not float(e).is_integer() and np.any(a < 0):
                raise fail("fractional power of negative value", a < 0)
            if e < 0 and np.any(np.abs(a) < DENOM_EPS):
                raise fail("negative power of zero", np.abs(a) < DENOM_EPS)
            with np.errstate(all="ignore"):
                out = np.power(a, e)
        else:
            b = ev(nd.children[1])
            with np.errstate(all="ignore"):
                if k == "add":
                    out = a + b
                elif k == "sub":
                    out = a - b
                elif k == "mul":
                    out = a * b
                else:
                    if np.any(np.abs(b) < DENOM_EPS):
                        raise fail("division by near-zero value", np.abs(b) < DENOM_EPS)
                    out = a / b
        if not np.all(np.isfinite(out)):
            raise fail(f"non-finite result of {k}", ~np.isfinite(out))
        return out

    return ev(node)


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EquationTemplate:
    """Per-state feature lists; each feature carries one unknown coefficient."""

    equations: tuple[tuple[Expr, ...], ...]
    n_inputs: int = 0

    @property
    def n_states(self) -> int:
        return len(self.equations)

    @property
    def n_features(self) -> int:
        return sum(len(eq) for eq in self.equations)

    def to_doc(self) -> dict[str, Any]:
        return {
            "equations": [
                {"state": i, "features": [to_text(f) for f in eq]}
                for i, eq in enumerate(self.equations)
            ]
        }

    def signature(self) -> str:
        """Template-level identity used by the novelty filter."""
        per_eq = ["[" + ";".join(sorted(feature_signature(f) for f in eq)) + "]" for eq in self.equations]
        return "|".join(f"{i}:{s}" for i, s in enumerate(per_eq))

    def __str__(self) -> str:
        return "; ".join(
            f"dx{i}/dt ~ {{{', '.join(to_text(f) for f in eq)}}}" for i, eq in enumerate(self.equations)
        )


def _parse_feature_entry(text: str, n_states: int, n_inputs: int) -> list[Expr]:
    """Parse one feature string; ``c1*x0 + c2*x1`` is split into two features."""
    try:
        return [parse_expression(text, n_states, n_inputs)]
    except DisallowedForm as exc:
        if isinstance(exc, LinearityViolation):
            raise
        raw = _Parser(text, n_states, n_inputs, False).parse()
        parts = _sum_parts(raw)
        if len(parts) < 2:
            raise
        return [_strip_placeholder(p) for p in parts]


def _sum_parts(node: Expr) -> list[Expr]:
    if node.kind == "add":
        return _sum_parts(node.children[0]) + _sum_parts(node.children[1])
    if node.kind == "sub":
        # the sign is absorbed by the fitted coefficient
        return _sum_parts(node.children[0]) + _sum_parts(node.children[1])
    return [node]


def parse_template(doc: Any, n_states: int | None = None, n_inputs: int = 0) -> EquationTemplate:
    """Build a template from its structured document.

    ``{"equations": [{"state": 0, "features": ["x1", "x0^2*x1"]}, ...]}``
    Every state ``0..d-1`` must appear exactly once.
    """
    if not isinstance(doc, dict) or not isinstance(doc.get("equations"), list):
        raise ExprSyntaxError("template document must be an object with an 'equations' list")
    entries = doc["equations"]
    d = n_states if n_states is not None else len(entries)
    by_state: dict[int, list[Expr]] = {}
    for pos, entry in enumerate(entries):
        if not isinstance(entry, dict) or not isinstance(entry.get("features"), list):
            raise ExprSyntaxError(f"equation entry {pos} needs a 'features' list")
        idx = entry.get("state", pos)
        if not isinstance(idx, int) or isinstance(idx, bool) or not 0 <= idx < d:
            raise DisallowedSymbol(f"equation entry {pos} has invalid state index {idx!r}")
        if idx in by_state:
            raise DisallowedForm(f"state {idx} listed twice")
        feats: list[Expr] = []
        for text in entry["features"]:
            feats.extend(_parse_feature_entry(text, d, n_inputs))
        by_state[idx] = feats
    missing = [i for i in range(d) if i not in by_state]
    if missing:
        raise DisallowedForm(f"template has no equation for state(s) {missing}")
    return EquationTemplate(tuple(tuple(by_state[i]) for i in range(d)), n_inputs)


def template_from_strings(equations: Sequence[Sequence[str]], n_inputs: int = 0) -> EquationTemplate:
    return parse_template(
        {"equations": [{"state": i, "features": list(f)} for i, f in enumerate(equations)]},
        n_inputs=n_inputs,
    )


def _check_candidate_feature(f: Expr) -> None:
    bad = kinds(f) - NODE_KINDS
    if _PLACEHOLDER in bad:
        raise LinearityViolation(f"feature {to_text(f)!r} contains a coefficient placeholder")
    if bad:
        raise DisallowedSymbol(f"feature {to_text(f)!r} uses {sorted(bad)}")
    for node in walk(f):
        denom = None
        if node.kind == "div":
            denom = node.children[1]
        elif node.kind == "pow" and node.children[1].value < 0:
            denom = node.children[0]
        if denom is not None and _contains(denom, lambda n: n.kind in ("sin", "cos")):
            raise DisallowedForm(f"trigonometric denominator in {to_text(f)!r}")
        if node.kind == "exp" and not _on_exp_grid(node.children[0]):
            raise DisallowedForm(
                f"exp argument {to_text(node.children[0])!r} is not rate*x_i with rate in {EXP_RATE_GRID}"
            )


def walk(node: Expr) -> Iterable[Expr]:
    yield node
    for c in node.children:
        yield from walk(c)


def _on_exp_grid(arg: Expr) -> bool:
    scale, core = _split_scale(_canon(arg))
    return core[0] == "x" and any(abs(scale - r) < 1e-12 for r in EXP_RATE_GRID)


def validate_template(template: EquationTemplate, max_terms: int = DEFAULT_MAX_TERMS) -> None:
    """Raise a :class:`GrammarError` subclass unless ``template`` is admissible."""
    for i, eq in enumerate(template.equations):
        if len(eq) == 0:
            raise DisallowedForm(f"equation for x{i} has no features")
        if len(eq) > max_terms:
            raise TooManyTerms(f"equation for x{i} has {len(eq)} features (max {max_terms})")
        seen: dict[str, str] = {}
        for f in eq:
            _check_candidate_feature(f)
            for kind, idx in variables(f):
                if kind == "x" and idx >= template.n_states:
                    raise DisallowedSymbol(f"x{idx} out of range in {to_text(f)!r}")
                if kind == "u" and idx >= template.n_inputs:
                    raise DisallowedSymbol(f"u{idx} out of range in {to_text(f)!r}")
            sig = feature_signature(f)
            if sig in seen:
                raise DuplicateFeature(f"x{i}: {to_text(f)!r} duplicates {seen[sig]!r}")
            seen[sig] = to_text(f)


def complexity(template: EquationTemplate, normalizer: float = COMPLEXITY_NORMALIZER) -> float:
    """Expression-tree node count (one extra node per coefficient) / normalizer."""
    nodes = sum(node_count(f) + 1 for eq in template.equations for f in eq)
    return nodes / normalizer


def evaluate_features(
    template: EquationTemplate,
    states: np.ndarray,
    inputs: np.ndarray | None,
    times: np.ndarray,
) -> list[np.ndarray]:
    """One ``n x K_i`` matrix per state equation."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    times = np.asarray(times, dtype=float)
    n = len(times)
    if states.shape[0] != n:
        raise DimensionMismatch(f"{states.shape[0]} state rows vs {n} times")
    if states.shape[1] != template.n_states:
        raise DimensionMismatch(f"template has {template.n_states} states, data has {states.shape[1]}")
    if inputs is not None:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        if inputs.shape[0] != n:
            raise DimensionMismatch(f"{inputs.shape[0]} input rows vs {n} times")
    cache: dict[str, np.ndarray] = {}
    out = []
    for eq in template.equations:
        cols = []
        for f in eq:
            key = canonical_signature(f)
            if key not in cache:
                cache[key] = evaluate(f, states, inputs, times)
            cols.append(cache[key])
        out.append(np.column_stack(cols) if cols else np.zeros((n, 0)))
    return out


# ---------------------------------------------------------------------------
# scalar compilation for rollouts
# ---------------------------------------------------------------------------


class DomainFault(ArithmeticError):
    """Raised by compiled right-hand sides on a domain violation."""


def _g_log(v: float) -> float:
    if v <= 0.0:
        raise DomainFault("log of non-positive value")
    return math.log(v)


def _g_sqrt(v: float) -> float:
    if v < 0.0:
        raise DomainFault("sqrt of negative value")
    return math.sqrt(v)


def _g_div(a: float, b: float) -> float:
    if abs(b) < DENOM_EPS:
        raise DomainFault("division by near-zero value")
    return a / b


def _g_pow(a: float, e: float) -> float:
    if a < 0.0 and not float(e).is_integer():
        raise DomainFault("fractional power of negative value")
    if e < 0 and abs(a) < DENOM_EPS:
        raise DomainFault("negative power of zero")
    return a ** e


def _g_cot(v: float) -> float:
    return _g_div(1.0, math.tan(v))


_CODE_ENV = {
    "_sin": math.sin,
    "_cos": math.cos,
    "_exp": math.exp,
    "_tan": math.tan,
    "_abs": abs,
    "_log": _g_log,
    "_sqrt": _g_sqrt,
    "_div": _g_div,
    "_pow": _g_pow,
    "_cot": _g_cot,
}


def _code(node: Expr) -> str:
    k = node.kind
    if k == "const":
        return f"({float(node.value)!r})"
    if k == "x":
        return f"x[{node.value}]"
    if k == "u":
        return f"u[{node.value}]"
    if k == "t":
        return "t"
    if k == "neg":
        return f"(-{_code(node.children[0])})"
    if k in UNARY_FUNCS or k in TRUTH_ONLY_FUNCS:
        return f"_{k}({_code(node.children[0])})"
    a, b = node.children
    if k == "pow":
        e = float(b.value)
        if e.is_integer() and e > 0:
            return f"({_code(a)}**{int(e)})"
        return f"_pow({_code(a)}, {e!r})"
    if k == "div":
        return f"_div({_code(a)}, {_code(b)})"
    op = {"add": "+", "sub": "-", "mul": "*"}[k]
    return f"({_code(a)} {op} {_code(b)})"


def compile_rhs(
    terms: Sequence[Sequence[tuple[float, Expr]]],
) -> Callable[[float, Sequence[float], Sequence[float]], list[float]]:
    """Compile ``dx_i/dt = sum_k coef_ik * phi_ik`` to a plain Python function.

    The returned callable has signature ``f(t, x, u) -> list[float]`` and
    raises :class:`DomainFault`, ``OverflowError`` or ``ZeroDivisionError``
    on numerical trouble. Zero coefficients are skipped entirely.
    """
    lines = ["def _rhs(t, x, u):"]
    names: dict[str, str] = {}
    sums = []
    for eq in terms:
        parts = []
        for coef, feat in eq:
            if coef == 0.0:
                continue
            key = canonical_signature(feat) + "|" + to_text(feat)
            if key not in names:
                names[key] = f"f{len(names)}"
                lines.append(f"    {names[key]} = {_code(feat)}")
            parts.append(f"{float(coef)!r}*{names[key]}")
        sums.append(" + ".join(parts) if parts else "0.0")
    lines.append("    return [" + ", ".join(sums) + "]")
    env = dict(_CODE_ENV)
    exec(compile("\n".join(lines), "<rhs>", "exec"), env)  # noqa: S102 - source built from validated trees
    return env["_rhs"]
