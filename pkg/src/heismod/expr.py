"""Symbolic expression trees with Wirtinger calculus.

This module provides the small expression language used everywhere else in
the package: coefficient functions of quadratic differentials on the
Heisenberg group are expressions in ``z``, ``zb``, ``t``; leaf
parametrizations are expressions in ``s``, ``p1``, ``p2``; the planar
cross-check module uses ``w``, ``wb``, ``s``, ``p``.  The conjugate-looking
variables ``zb`` and ``wb`` are syntactically independent of ``z`` and
``w``: differentiation is Wirtinger differentiation, and evaluation only
requires that bindings supply numerically consistent conjugate values.

Grammar (text form accepted by :func:`parse`)::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := unary ('^' exponent)?
    unary  := '-' unary | atom
    atom   := number | 'i' | ident | ident '(' expr ')' | '(' expr ')'

The exponent after ``^`` must be a real literal: a decimal number, a
rational ``a/b``, or either of those parenthesized and optionally negated
(``z^2``, ``z^-1``, ``z^(2/3)``).  Anything else raises
:class:`~heismod.errors.NonLiteralExponent`.  Note that ``^`` applies to
the whole unary term, so ``-z^2`` parses as ``(-z)^2``.

Functions: ``conj``, ``sqrt``, ``exp``, ``log``, ``sin``, ``cos``, ``re``,
``im``, ``abs2``.  ``conj(u)`` is desugared structurally (``conj(z)``
becomes ``zb``); there is no conjugation node.  ``sqrt``, ``log`` and
fractional powers use principal branches.

Nodes are immutable and hash-consed: structurally equal subtrees are the
same object, which makes evaluation over the resulting DAG cache shared
work automatically.  The intern table only grows; expressions are tiny, so
this is a deliberate trade for fast repeated evaluation.
"""

from __future__ import annotations

import warnings
from typing import Callable, Mapping

import numpy as np

from .errors import (
    BranchCutWarning,
    DivisionNearZero,
    ExprSyntaxError,
    NonLiteralExponent,
    UnknownIdentifier,
    VariableMismatch,
)

#: Variables the language knows about.  ``t, s, p1, p2, p`` are real;
#: ``(z, zb)`` and ``(w, wb)`` are conjugate pairs.
VAR_NAMES = ("z", "zb", "t", "s", "p1", "p2", "w", "wb", "p")
CONJUGATE_PAIRS = {"z": "zb", "zb": "z", "w": "wb", "wb": "w"}
REAL_VARS = frozenset(v for v in VAR_NAMES if v not in CONJUGATE_PAIRS)

_FUNCTION_NAMES = ("conj", "sqrt", "exp", "log", "sin", "cos", "re", "im", "abs2")

#: Directional derivative fields on the Heisenberg group, in terms of the
#: Wirtinger partials: Z = d_z + i*zb*d_t, Zbar = d_zb - i*z*d_t, T = d_t.
FIELDS = ("Z", "Zbar", "T")

_DIV_FLOOR = 1e-300


# ---------------------------------------------------------------------------
# nodes

class Expr:
    """Base class of all expression nodes.  Instances are immutable."""

    __slots__ = ()
    prec = 5  # printing precedence; atoms highest

    def _children(self) -> tuple:
        return ()

    # Building expressions with operators keeps calling code readable.
    def __add__(self, other):
        return add(self, _as_expr(other))

    def __radd__(self, other):
        return add(_as_expr(other), self)

    def __sub__(self, other):
        return sub(self, _as_expr(other))

    def __rsub__(self, other):
        return sub(_as_expr(other), self)

    def __mul__(self, other):
        return mul(self, _as_expr(other))

    def __rmul__(self, other):
        return mul(_as_expr(other), self)

    def __truediv__(self, other):
        return div(self, _as_expr(other))

    def __rtruediv__(self, other):
        return div(_as_expr(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, expo):
        return powr(self, expo)

    def __str__(self):
        return to_string(self)

    def __repr__(self):
        return f"<{type(self).__name__} {to_string(self)}>"


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value: complex):
        object.__setattr__(self, "value", value)

    def __setattr__(self, *a):  # pragma: no cover - defensive
        raise AttributeError("expression nodes are immutable")


class Var(Expr):
    __slots__ = ("name",)

    def __init__(self, name: str):
        object.__setattr__(self, "name", name)

    def __setattr__(self, *a):  # pragma: no cover - defensive
        raise AttributeError("expression nodes are immutable")


class _Unary(Expr):
    __slots__ = ("arg",)

    def __init__(self, arg: Expr):
        object.__setattr__(self, "arg", arg)

    def __setattr__(self, *a):  # pragma: no cover - defensive
        raise AttributeError("expression nodes are immutable")

    def _children(self):
        return (self.arg,)


class _Binary(Expr):
    __slots__ = ("lhs", "rhs")

    def __init__(self, lhs: Expr, rhs: Expr):
        object.__setattr__(self, "lhs", lhs)
        object.__setattr__(self, "rhs", rhs)

    def __setattr__(self, *a):  # pragma: no cover - defensive
        raise AttributeError("expression nodes are immutable")

    def _children(self):
        return (self.lhs, self.rhs)


class Add(_Binary):
    __slots__ = ()
    prec = 1


class Sub(_Binary):
    __slots__ = ()
    prec = 1


class Mul(_Binary):
    __slots__ = ()
    prec = 2


class Div(_Binary):
    __slots__ = ()
    prec = 2


class Neg(_Unary):
    __slots__ = ()
    prec = 3


class PowR(Expr):
    """Power with a real literal exponent (principal branch)."""

    __slots__ = ("base", "expo")
    prec = 4

    def __init__(self, base: Expr, expo: float):
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "expo", expo)

    def __setattr__(self, *a):  # pragma: no cover - defensive
        raise AttributeError("expression nodes are immutable")

    def _children(self):
        return (self.base,)


class Sqrt(_Unary):
    __slots__ = ()


class Exp(_Unary):
    __slots__ = ()


class Log(_Unary):
    __slots__ = ()


class Sin(_Unary):
    __slots__ = ()


class Cos(_Unary):
    __slots__ = ()


class Re(_Unary):
    __slots__ = ()


class Im(_Unary):
    __slots__ = ()


class Abs2(_Unary):
    __slots__ = ()


# ---------------------------------------------------------------------------
# hash-consing constructors with constant folding

_INTERN: dict[tuple, Expr] = {}


def _fkey(x: float) -> str:
    # hex distinguishes -0.0 from 0.0 and round-trips exactly
    return float(x).hex()


def _interned(cls, key, *args) -> Expr:
    node = _INTERN.get(key)
    if node is None:
        node = cls(*args)
        _INTERN[key] = node
    return node


def const(value) -> Const:
    v = complex(value)
    return _interned(Const, ("c", _fkey(v.real), _fkey(v.imag)), v)


ZERO = const(0.0)
ONE = const(1.0)


def var(name: str) -> Var:
    if name not in VAR_NAMES:
        raise VariableMismatch(f"unknown variable {name!r}")
    return _interned(Var, ("v", name), name)


def _as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float, complex)):
        return const(x)
    raise TypeError(f"cannot coerce {type(x).__name__} to Expr")


def _is_const(e: Expr, value=None) -> bool:
    if not isinstance(e, Const):
        return False
    return value is None or e.value == value


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return const(a.value + b.value)
    if _is_const(a, 0):
        return b
    if _is_const(b, 0):
        return a
    return _interned(Add, ("+", id(a), id(b)), a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return const(a.value - b.value)
    if _is_const(b, 0):
        return a
    if _is_const(a, 0):
        return neg(b)
    return _interned(Sub, ("-", id(a), id(b)), a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return const(a.value * b.value)
    if _is_const(a, 0) or _is_const(b, 0):
        return ZERO
    if _is_const(a, 1):
        return b
    if _is_const(b, 1):
        return a
    return _interned(Mul, ("*", id(a), id(b)), a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b) and abs(b.value) >= _DIV_FLOOR:
        return const(a.value / b.value)
    if _is_const(b, 1):
        return a
    return _interned(Div, ("/", id(a), id(b)), a, b)


def neg(a: Expr) -> Expr:
    if _is_const(a):
        return const(-a.value)
    return _interned(Neg, ("n", id(a)), a)


def powr(base: Expr, expo) -> Expr:
    expo = float(expo)
    if expo == 1.0:
        return base
    return _interned(PowR, ("^", id(base), _fkey(expo)), base, expo)


def _unary_ctor(cls, tag):
    def ctor(arg: Expr) -> Expr:
        return _interned(cls, (tag, id(arg)), arg)

    ctor.__name__ = tag
    return ctor


sqrt = _unary_ctor(Sqrt, "sqrt")
exp = _unary_ctor(Exp, "exp")
log = _unary_ctor(Log, "log")
sin = _unary_ctor(Sin, "sin")
cos = _unary_ctor(Cos, "cos")
re_part = _unary_ctor(Re, "re")
im_part = _unary_ctor(Im, "im")
abs2 = _unary_ctor(Abs2, "abs2")


# ---------------------------------------------------------------------------
# parser

class _Tokenizer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self._skip_ws()
        if self.pos >= len(self.text):
            return ("end", "", self.pos)
        c = self.text[self.pos]
        if c in "+-*/^()":
            return ("op", c, self.pos)
        if c.isdigit() or c == ".":
            j = self.pos
            n = len(self.text)
            while j < n and self.text[j].isdigit():
                j += 1
            if j < n and self.text[j] == ".":
                j += 1
                while j < n and self.text[j].isdigit():
                    j += 1
            if j < n and self.text[j] in "eE":
                k = j + 1
                if k < n and self.text[k] in "+-":
                    k += 1
                if k < n and self.text[k].isdigit():
                    j = k
                    while j < n and self.text[j].isdigit():
                        j += 1
            tok = self.text[self.pos:j]
            if tok == ".":
                raise ExprSyntaxError("bad number", self.pos)
            return ("num", tok, self.pos)
        if c.isalpha() or c == "_":
            j = self.pos
            while j < len(self.text) and (self.text[j].isalnum() or self.text[j] == "_"):
                j += 1
            return ("ident", self.text[self.pos:j], self.pos)
        raise ExprSyntaxError(f"unexpected character {c!r}", self.pos)

    def take(self):
        kind, tok, off = self.peek()
        self.pos = off + len(tok)
        return kind, tok, off


def parse(text: str) -> Expr:
    """Parse expression text into an :class:`Expr`.

    Raises
    ------
    ExprSyntaxError
        On malformed input; the exception carries the byte offset.
    UnknownIdentifier
        For identifiers outside the variable and function vocabulary.
    NonLiteralExponent
        When the right operand of ``^`` is not a real literal.
    """
    tz = _Tokenizer(text)
    e = _parse_expr(tz)
    kind, tok, off = tz.peek()
    if kind != "end":
        raise ExprSyntaxError(f"unexpected trailing {tok!r}", off)
    return e


def _parse_expr(tz: _Tokenizer) -> Expr:
    e = _parse_term(tz)
    while True:
        kind, tok, _ = tz.peek()
        if kind == "op" and tok in "+-":
            tz.take()
            rhs = _parse_term(tz)
            e = add(e, rhs) if tok == "+" else sub(e, rhs)
        else:
            return e


def _parse_term(tz: _Tokenizer) -> Expr:
    e = _parse_factor(tz)
    while True:
        kind, tok, _ = tz.peek()
        if kind == "op" and tok in "*/":
            tz.take()
            rhs = _parse_factor(tz)
            e = mul(e, rhs) if tok == "*" else div(e, rhs)
        else:
            return e


def _parse_factor(tz: _Tokenizer) -> Expr:
    e = _parse_unary(tz)
    kind, tok, _ = tz.peek()
    if kind == "op" and tok == "^":
        tz.take()
        e = powr(e, _parse_exponent(tz))
    return e


def _parse_unary(tz: _Tokenizer) -> Expr:
    kind, tok, _ = tz.peek()
    if kind == "op" and tok == "-":
        tz.take()
        return neg(_parse_unary(tz))
    return _parse_atom(tz)


def _parse_exponent(tz: _Tokenizer) -> float:
    # real literal: [-] number [/ number], optionally parenthesized
    kind, tok, off = tz.peek()
    parens = kind == "op" and tok == "("
    if parens:
        tz.take()
        kind, tok, off = tz.peek()
    sign = 1.0
    if kind == "op" and tok == "-":
        tz.take()
        sign = -1.0
        kind, tok, off = tz.peek()
    if kind != "num":
        raise NonLiteralExponent("exponent must be a real literal", off)
    tz.take()
    value = float(tok)
    kind, tok, off = tz.peek()
    # a rational exponent a/b is only recognized in the parenthesized
    # form, so a bare '/' after 'x^2' stays ordinary division
    if parens and kind == "op" and tok == "/":
        tz.take()
        kind, tok, off = tz.peek()
        if kind != "num":
            raise NonLiteralExponent("exponent must be a real literal", off)
        tz.take()
        den = float(tok)
        if den == 0.0:
            raise NonLiteralExponent("zero denominator in exponent", off)
        value /= den
    if parens:
        kind, tok, off = tz.peek()
        if not (kind == "op" and tok == ")"):
            raise NonLiteralExponent("exponent must be a real literal", off)
        tz.take()
    return sign * value


def _parse_atom(tz: _Tokenizer) -> Expr:
    kind, tok, off = tz.take()
    if kind == "num":
        return const(float(tok))
    if kind == "op" and tok == "(":
        e = _parse_expr(tz)
        kind, tok, off = tz.take()
        if not (kind == "op" and tok == ")"):
            raise ExprSyntaxError("expected ')'", off)
        return e
    if kind == "ident":
        if tok == "i":
            return const(1j)
        nkind, ntok, _ = tz.peek()
        if nkind == "op" and ntok == "(":
            if tok not in _FUNCTION_NAMES:
                raise UnknownIdentifier(f"unknown function {tok!r}", off)
            tz.take()
            arg = _parse_expr(tz)
            k2, t2, o2 = tz.take()
            if not (k2 == "op" and t2 == ")"):
                raise ExprSyntaxError("expected ')'", o2)
            return _FUNCTION_CTORS[tok](arg)
        if tok in VAR_NAMES:
            return var(tok)
        raise UnknownIdentifier(f"unknown identifier {tok!r}", off)
    raise ExprSyntaxError(f"unexpected {tok!r}", off)


_FUNCTION_CTORS: dict[str, Callable[[Expr], Expr]] = {
    "conj": lambda e: conj_expr(e),
    "sqrt": sqrt,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "re": re_part,
    "im": im_part,
    "abs2": abs2,
}


# ---------------------------------------------------------------------------
# printing

_FUNC_LABEL = {Sqrt: "sqrt", Exp: "exp", Log: "log", Sin: "sin", Cos: "cos",
               Re: "re", Im: "im", Abs2: "abs2"}


def _fmt_real(x: float) -> str:
    return repr(float(x))


def _fmt_const(v: complex) -> tuple[str, int]:
    # returns text and effective precedence of the rendered form
    if v.imag == 0.0:
        text = _fmt_real(v.real)
        return text, (3 if v.real < 0 else 5)
    if v.real == 0.0:
        if v.imag == 1.0:
            return "i", 5
        return f"{_fmt_real(v.imag)}*i", 2
    return f"({_fmt_real(v.real)} + {_fmt_real(v.imag)}*i)", 5


def to_string(e: Expr) -> str:
    """Render an expression as text that :func:`parse` accepts.

    Reparsing the output yields an expression that evaluates identically
    (grouping is preserved with explicit parentheses; floats are printed
    with ``repr`` so they round-trip exactly).
    """
    if isinstance(e, Const):
        return _fmt_const(e.value)[0]
    if isinstance(e, Var):
        return e.name
    if isinstance(e, (Add, Sub)):
        op = " + " if isinstance(e, Add) else " - "
        return _child(e.lhs, 1) + op + _child(e.rhs, 2)
    if isinstance(e, (Mul, Div)):
        op = "*" if isinstance(e, Mul) else "/"
        return _child(e.lhs, 2) + op + _child(e.rhs, 3)
    if isinstance(e, Neg):
        # '^' would bind to the printed '-', so exponents need parens
        inner = to_string(e.arg)
        if _effective_prec(e.arg) < 3 or isinstance(e.arg, PowR):
            inner = "(" + inner + ")"
        return "-" + inner
    if isinstance(e, PowR):
        base = to_string(e.base)
        if _effective_prec(e.base) < 3 or isinstance(e.base, PowR):
            base = "(" + base + ")"
        ex = e.expo
        if ex >= 0:
            return f"{base}^{_fmt_real(ex)}"
        return f"{base}^(-{_fmt_real(-ex)})"
    label = _FUNC_LABEL[type(e)]
    return f"{label}({to_string(e.arg)})"


def _child(e: Expr, min_prec: int) -> str:
    text = to_string(e)
    if _effective_prec(e) < min_prec:
        return "(" + text + ")"
    return text


def _effective_prec(e: Expr) -> int:
    if isinstance(e, Const):
        return _fmt_const(e.value)[1]
    return e.prec


# ---------------------------------------------------------------------------
# evaluation

def _coerce_binding(binding: Mapping, checked: bool) -> dict:
    vals = {}
    for name, v in binding.items():
        if name not in VAR_NAMES:
            raise VariableMismatch(f"unknown variable {name!r} in binding")
        if isinstance(v, np.ndarray):
            vals[name] = np.asarray(v, dtype=np.complex128)
        else:
            vals[name] = complex(v)
    if checked:
        for a, b in (("z", "zb"), ("w", "wb")):
            if a in vals and b in vals:
                za, zb_ = vals[a], vals[b]
                bad = abs(zb_ - np.conjugate(za)) > 1e-12 * (1.0 + abs(za))
                if np.any(bad):
                    raise VariableMismatch(
                        f"binding has {b} inconsistent with conj({a})")
    return vals


def _pow_value(base, expo: float, checked: bool):
    n = round(expo)
    if expo == n and abs(n) <= 128:
        if checked and n < 0 and abs(base) < _DIV_FLOOR:
            raise DivisionNearZero(f"0^{n} in power")
        try:
            with np.errstate(divide="ignore", invalid="ignore"):
                return base ** int(n)
        except (ZeroDivisionError, OverflowError):
            if checked:
                raise DivisionNearZero(f"overflow in ^{n}") from None
            return complex(np.inf, np.nan)
    if checked and isinstance(base, complex):
        if base.imag == 0.0 and base.real < 0.0:
            warnings.warn("fractional power on the negative real axis",
                          BranchCutWarning, stacklevel=4)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.power(base, expo)


def _eval_dag(e: Expr, vals: dict, checked: bool):
    with np.errstate(all="ignore"):
        return _eval_dag_inner(e, vals, checked)


def _count_uses(e: Expr) -> dict[int, int]:
    """Number of parent references per node, for early release of
    intermediate arrays during evaluation."""
    uses: dict[int, int] = {id(e): 1}
    stack = [e]
    seen = set()
    while stack:
        node = stack.pop()
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        for c in node._children():
            uses[id(c)] = uses.get(id(c), 0) + 1
            stack.append(c)
    return uses


def _eval_dag_inner(e: Expr, vals: dict, checked: bool):
    uses = _count_uses(e)
    done: dict[int, object] = {}
    memo: dict[int, object] = {}

    def consume(node):
        # fetch a child's value, releasing it once all parents have read it
        nid = id(node)
        v = memo[nid]
        uses[nid] -= 1
        if uses[nid] <= 0 and nid != id(e):
            del memo[nid]
        return v

    stack = [e]
    while stack:
        node = stack[-1]
        nid = id(node)
        if nid in done:
            stack.pop()
            continue
        kids = node._children()
        pending = [c for c in kids if id(c) not in done]
        if pending:
            stack.extend(pending)
            continue
        stack.pop()
        if isinstance(node, Const):
            v = node.value
        elif isinstance(node, Var):
            if node.name not in vals:
                raise VariableMismatch(f"unbound variable {node.name!r}")
            v = vals[node.name]
        elif isinstance(node, Add):
            v = consume(node.lhs) + consume(node.rhs)
        elif isinstance(node, Sub):
            v = consume(node.lhs) - consume(node.rhs)
        elif isinstance(node, Mul):
            v = consume(node.lhs) * consume(node.rhs)
        elif isinstance(node, Div):
            den = consume(node.rhs)
            if checked and abs(den) < _DIV_FLOOR:
                raise DivisionNearZero(f"denominator {den!r}")
            with np.errstate(divide="ignore", invalid="ignore"):
                v = consume(node.lhs) / den
        elif isinstance(node, Neg):
            v = -consume(node.arg)
        elif isinstance(node, PowR):
            v = _pow_value(consume(node.base), node.expo, checked)
        elif isinstance(node, Sqrt):
            v = np.sqrt(consume(node.arg))
        elif isinstance(node, Exp):
            v = np.exp(consume(node.arg))
        elif isinstance(node, Log):
            a = consume(node.arg)
            if checked and isinstance(a, complex):
                if a.imag == 0.0 and a.real < 0.0:
                    warnings.warn("log on the negative real axis",
                                  BranchCutWarning, stacklevel=4)
                if abs(a) < _DIV_FLOOR:
                    raise DivisionNearZero("log of zero")
            with np.errstate(divide="ignore", invalid="ignore"):
                v = np.log(a)
        elif isinstance(node, Sin):
            v = np.sin(consume(node.arg))
        elif isinstance(node, Cos):
            v = np.cos(consume(node.arg))
        elif isinstance(node, Re):
            a = consume(node.arg)
            v = complex(a.real) if isinstance(a, complex) else a.real + 0j
        elif isinstance(node, Im):
            a = consume(node.arg)
            v = complex(a.imag) if isinstance(a, complex) else a.imag + 0j
        elif isinstance(node, Abs2):
            a = consume(node.arg)
            v = a * np.conjugate(a)
        else:  # pragma: no cover
            raise TypeError(f"unhandled node {type(node).__name__}")
        memo[nid] = v
        done[nid] = True
    return memo[id(e)]


def evaluate(e: Expr, binding: Mapping[str, complex]) -> complex:
    """Evaluate at a point, with the checked error semantics.

    Parameters
    ----------
    e : Expr
    binding : mapping from variable names to numbers.  When both halves of
        a conjugate pair are bound they must be numerically conjugate.

    Raises
    ------
    DivisionNearZero
        If a denominator magnitude falls below 1e-300.
    VariableMismatch
        For unbound variables or inconsistent conjugate bindings.

    Warns
    -----
    BranchCutWarning
        When a log or fractional power lands on the negative real axis.
    """
    vals = _coerce_binding(binding, checked=True)
    return complex(_eval_dag(e, vals, checked=True))


def eval_array(e: Expr, binding: Mapping) -> np.ndarray:
    """Vectorized evaluation over numpy arrays (unchecked fast path).

    Array bindings broadcast against each other.  Division by zero and
    powers of zero produce inf/nan silently; quadrature callers treat
    non-finite panel values as a refinement signal.
    """
    vals = _coerce_binding(binding, checked=False)
    out = _eval_dag(e, vals, checked=False)
    return np.asarray(out, dtype=np.complex128)


# ---------------------------------------------------------------------------
# structural transforms

def free_vars(e: Expr) -> frozenset[str]:
    cache = _FREE_CACHE
    out = cache.get(id(e))
    if out is not None:
        return out
    if isinstance(e, Var):
        out = frozenset((e.name,))
    elif isinstance(e, Const):
        out = frozenset()
    else:
        out = frozenset().union(*(free_vars(c) for c in e._children()))
    cache[id(e)] = out
    return out


_FREE_CACHE: dict[int, frozenset] = {}


def conj_expr(e: Expr) -> Expr:
    """Structural conjugate: swaps conjugate-pair variables, conjugates
    constants, and maps every operation through itself.

    Evaluating the result equals conjugating the evaluation whenever the
    binding is consistent (real variables real, ``zb = conj(z)``) and no
    argument of ``log``/``sqrt``/fractional powers sits on a branch cut.
    """
    out = _CONJ_CACHE.get(id(e))
    if out is not None:
        return out
    if isinstance(e, Const):
        out = const(e.value.conjugate())
    elif isinstance(e, Var):
        out = var(CONJUGATE_PAIRS.get(e.name, e.name))
    elif isinstance(e, (Re, Im, Abs2)):
        out = e  # real-valued
    elif isinstance(e, Add):
        out = add(conj_expr(e.lhs), conj_expr(e.rhs))
    elif isinstance(e, Sub):
        out = sub(conj_expr(e.lhs), conj_expr(e.rhs))
    elif isinstance(e, Mul):
        out = mul(conj_expr(e.lhs), conj_expr(e.rhs))
    elif isinstance(e, Div):
        out = div(conj_expr(e.lhs), conj_expr(e.rhs))
    elif isinstance(e, Neg):
        out = neg(conj_expr(e.arg))
    elif isinstance(e, PowR):
        out = powr(conj_expr(e.base), e.expo)
    else:
        ctor = {Sqrt: sqrt, Exp: exp, Log: log, Sin: sin, Cos: cos}[type(e)]
        out = ctor(conj_expr(e.arg))
    _CONJ_CACHE[id(e)] = out
    return out


_CONJ_CACHE: dict[int, Expr] = {}


def diff(e: Expr, v: str) -> Expr:
    """Wirtinger partial derivative with respect to variable ``v``.

    All nine variables are treated as independent: ``diff(var('zb'), 'z')``
    is zero.  ``re``, ``im`` and ``abs2`` differentiate through their
    rewriting in terms of the structural conjugate.
    """
    if v not in VAR_NAMES:
        raise VariableMismatch(f"unknown variable {v!r}")
    return _diff(e, v, {})


def _diff(e: Expr, v: str, memo: dict) -> Expr:
    out = memo.get(id(e))
    if out is not None:
        return out
    if isinstance(e, Const):
        out = ZERO
    elif isinstance(e, Var):
        out = ONE if e.name == v else ZERO
    elif v not in free_vars(e) and CONJUGATE_PAIRS.get(v) not in free_vars(e):
        # The partner variable matters: re/im/abs2 subtrees differentiate
        # through the structural conjugate, which swaps the pair.
        out = ZERO
    elif isinstance(e, Add):
        out = add(_diff(e.lhs, v, memo), _diff(e.rhs, v, memo))
    elif isinstance(e, Sub):
        out = sub(_diff(e.lhs, v, memo), _diff(e.rhs, v, memo))
    elif isinstance(e, Mul):
        out = add(mul(_diff(e.lhs, v, memo), e.rhs),
                  mul(e.lhs, _diff(e.rhs, v, memo)))
    elif isinstance(e, Div):
        num = sub(mul(_diff(e.lhs, v, memo), e.rhs),
                  mul(e.lhs, _diff(e.rhs, v, memo)))
        out = div(num, mul(e.rhs, e.rhs))
    elif isinstance(e, Neg):
        out = neg(_diff(e.arg, v, memo))
    elif isinstance(e, PowR):
        out = mul(mul(const(e.expo), powr(e.base, e.expo - 1.0)),
                  _diff(e.base, v, memo))
    elif isinstance(e, Sqrt):
        out = div(_diff(e.arg, v, memo), mul(const(2.0), sqrt(e.arg)))
    elif isinstance(e, Exp):
        out = mul(_diff(e.arg, v, memo), e)
    elif isinstance(e, Log):
        out = div(_diff(e.arg, v, memo), e.arg)
    elif isinstance(e, Sin):
        out = mul(_diff(e.arg, v, memo), cos(e.arg))
    elif isinstance(e, Cos):
        out = neg(mul(_diff(e.arg, v, memo), sin(e.arg)))
    elif isinstance(e, Re):
        cj = conj_expr(e.arg)
        out = div(add(_diff(e.arg, v, memo), _diff(cj, v, memo)), const(2.0))
    elif isinstance(e, Im):
        cj = conj_expr(e.arg)
        out = div(sub(_diff(e.arg, v, memo), _diff(cj, v, memo)), const(2j))
    elif isinstance(e, Abs2):
        cj = conj_expr(e.arg)
        out = add(mul(_diff(e.arg, v, memo), cj),
                  mul(e.arg, _diff(cj, v, memo)))
    else:  # pragma: no cover
        raise TypeError(f"unhandled node {type(e).__name__}")
    memo[id(e)] = out
    return out


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Replace variables by expressions (capture is the caller's problem)."""
    for name in mapping:
        if name not in VAR_NAMES:
            raise VariableMismatch(f"unknown variable {name!r}")
    return _subst(e, dict(mapping), {})


def _subst(e: Expr, mapping: dict, memo: dict) -> Expr:
    out = memo.get(id(e))
    if out is not None:
        return out
    if isinstance(e, Var):
        out = mapping.get(e.name, e)
    elif isinstance(e, Const):
        out = e
    elif isinstance(e, Add):
        out = add(_subst(e.lhs, mapping, memo), _subst(e.rhs, mapping, memo))
    elif isinstance(e, Sub):
        out = sub(_subst(e.lhs, mapping, memo), _subst(e.rhs, mapping, memo))
    elif isinstance(e, Mul):
        out = mul(_subst(e.lhs, mapping, memo), _subst(e.rhs, mapping, memo))
    elif isinstance(e, Div):
        out = div(_subst(e.lhs, mapping, memo), _subst(e.rhs, mapping, memo))
    elif isinstance(e, Neg):
        out = neg(_subst(e.arg, mapping, memo))
    elif isinstance(e, PowR):
        out = powr(_subst(e.base, mapping, memo), e.expo)
    else:
        ctor = {Sqrt: sqrt, Exp: exp, Log: log, Sin: sin, Cos: cos,
                Re: re_part, Im: im_part, Abs2: abs2}[type(e)]
        out = ctor(_subst(e.arg, mapping, memo))
    memo[id(e)] = out
    return out


def apply_field(e: Expr, field: str) -> Expr:
    """Apply one of the frame fields Z, Zbar, T to a point-space expression.

    ``Z = d_z + i*zb*d_t`` and ``Zbar = d_zb - i*z*d_t`` span the contact
    planes; ``T = d_t`` is the vertical field.  The expression must live in
    the variables ``z, zb, t`` only.
    """
    bad = free_vars(e) - {"z", "zb", "t"}
    if bad:
        raise VariableMismatch(
            f"field {field} needs a point-space expression; found {sorted(bad)}")
    if field == "Z":
        return add(diff(e, "z"), mul(mul(const(1j), var("zb")), diff(e, "t")))
    if field == "Zbar":
        return sub(diff(e, "zb"), mul(mul(const(1j), var("z")), diff(e, "t")))
    if field == "T":
        return diff(e, "t")
    raise ValueError(f"unknown field {field!r}; expected one of {FIELDS}")


# ---------------------------------------------------------------------------
# scalar compilation for hot loops (ODE tracing, Newton inversion)

_COMPILED_FUNCS = {Sqrt: "_sqrt", Exp: "_exp", Log: "_log", Sin: "_sin",
                   Cos: "_cos"}


def compile_scalar(e: Expr, argnames: tuple[str, ...]) -> Callable:
    """Compile an expression to a plain Python function of scalars.

    The generated function takes ``argnames`` positionally as complex
    numbers and returns a complex number.  Shared subtrees are computed
    once.  Semantics match :func:`eval_array` (no checked errors, no
    branch-cut warnings); it exists because tree evaluation per point is
    too slow inside adaptive ODE stepping.
    """
    missing = free_vars(e) - set(argnames)
    if missing:
        raise VariableMismatch(f"unbound variables {sorted(missing)}")
    order: list[Expr] = []
    seen: set[int] = set()
    stack = [e]
    while stack:
        node = stack[-1]
        if id(node) in seen:
            stack.pop()
            continue
        pending = [c for c in node._children() if id(c) not in seen]
        if pending:
            stack.extend(pending)
            continue
        stack.pop()
        seen.add(id(node))
        order.append(node)
    names = {id(n): f"v{k}" for k, n in enumerate(order)}
    lines = []
    for n in order:
        tgt = names[id(n)]
        if isinstance(n, Const):
            lines.append(f"{tgt} = {complex(n.value)!r}")
        elif isinstance(n, Var):
            lines.append(f"{tgt} = {n.name}")
        elif isinstance(n, Add):
            lines.append(f"{tgt} = {names[id(n.lhs)]} + {names[id(n.rhs)]}")
        elif isinstance(n, Sub):
            lines.append(f"{tgt} = {names[id(n.lhs)]} - {names[id(n.rhs)]}")
        elif isinstance(n, Mul):
            lines.append(f"{tgt} = {names[id(n.lhs)]} * {names[id(n.rhs)]}")
        elif isinstance(n, Div):
            lines.append(f"{tgt} = {names[id(n.lhs)]} / {names[id(n.rhs)]}")
        elif isinstance(n, Neg):
            lines.append(f"{tgt} = -{names[id(n.arg)]}")
        elif isinstance(n, PowR):
            ex = n.expo
            src = names[id(n.base)]
            if ex == round(ex) and abs(ex) <= 128:
                lines.append(f"{tgt} = {src} ** {int(round(ex))}")
            else:
                lines.append(f"{tgt} = {src} ** {float(ex)!r}")
        elif isinstance(n, Re):
            lines.append(f"{tgt} = complex(({names[id(n.arg)]}).real)")
        elif isinstance(n, Im):
            lines.append(f"{tgt} = complex(({names[id(n.arg)]}).imag)")
        elif isinstance(n, Abs2):
            src = names[id(n.arg)]
            lines.append(f"{tgt} = {src} * ({src}).conjugate()")
        else:
            fn = _COMPILED_FUNCS[type(n)]
            lines.append(f"{tgt} = {fn}(complex({names[id(n.arg)]}))")
    body = "\n    ".join(lines) if lines else "pass"
    src = (f"def _f({', '.join(argnames)}):\n"
           f"    {body}\n"
           f"    return {names[id(e)]}\n")
    import cmath

    ns = {"_sqrt": cmath.sqrt, "_exp": cmath.exp, "_log": cmath.log,
          "_sin": cmath.sin, "_cos": cmath.cos}
    exec(compile(src, "<heismod-expr>", "exec"), ns)
    return ns["_f"]
