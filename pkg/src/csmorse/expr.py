"""Scalar expression language with exact first and second derivatives.

Expressions are parsed once into an immutable tree and evaluated by
second-order forward propagation: every node carries its value, gradient
and dense Hessian with respect to the ambient coordinates ``x1..xn``.
Evaluation is vectorised over a batch of points.

Grammar (loosest binding first)::

    expr     := term (('+' | '-') term)*
    term     := unary (('*' | '/') unary)*
    unary    := ('-' | '+') unary | power
    power    := atom ('^' exponent)*
    exponent := ['-' | '+'] INT | '(' ['-' | '+'] INT ')'
    atom     := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Optional, Union

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt")


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    """Parse failure; ``offset`` is the byte offset into the UTF-8 source."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.reason = message
        self.offset = offset


class ExprDomainError(ExprError):
    def __init__(self, message: str, subexpression: str, point: Optional[np.ndarray] = None):
        super().__init__(f"{message} in '{subexpression}'")
        self.subexpression = subexpression
        self.point = point


# --------------------------------------------------------------------------
# AST

class Node:
    __slots__ = ()


@dataclass(frozen=True)
class Num(Node):
    value: float

    def __str__(self) -> str:
        return repr(self.value) if self.value != int(self.value) else str(int(self.value))


@dataclass(frozen=True)
class Var(Node):
    index: int  # 1-based

    def __str__(self) -> str:
        return f"x{self.index}"

    def __repr__(self) -> str:
        return str(self)


@dataclass(frozen=True)
class Neg(Node):
    arg: Node

    def __str__(self) -> str:
        return f"-({self.arg})"


@dataclass(frozen=True)
class _Binary(Node):
    left: Node
    right: Node
    symbol = "?"

    def __str__(self) -> str:
        return f"({self.left} {self.symbol} {self.right})"


class Add(_Binary):
    symbol = "+"


class Sub(_Binary):
    symbol = "-"


class Mul(_Binary):
    symbol = "*"


class Div(_Binary):
    symbol = "/"


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: int

    def __str__(self) -> str:
        return f"({self.base})^{self.exponent}"

    def __repr__(self) -> str:
        return f"Pow({self.base!r},{self.exponent})"


@dataclass(frozen=True)
class Call(Node):
    name: str
    arg: Node

    def __str__(self) -> str:
        return f"{self.name}({self.arg})"


def _binary_repr(self: _Binary) -> str:
    return f"{type(self).__name__}({self.left!r},{self.right!r})"


for _cls in (Add, Sub, Mul, Div):
    _cls.__repr__ = _binary_repr


# --------------------------------------------------------------------------
# Tokenizer / parser

_TOKEN = re.compile(
    r"""\s*(?:
        (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
      | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
      | (?P<op>[-+*/^()])
    )""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # num | name | op | end
    text: str
    pos: int  # character offset


def _tokenize(src: str) -> Iterator[_Tok]:
    pos = 0
    while True:
        while pos < len(src) and src[pos].isspace():
            pos += 1
        if pos >= len(src):
            yield _Tok("end", "", pos)
            return
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            raise _SyntaxAt(f"unexpected character {src[pos]!r}", pos)
        kind = m.lastgroup
        yield _Tok(kind, m.group(kind), m.start(kind))
        pos = m.end()


class _SyntaxAt(Exception):
    def __init__(self, message: str, pos: int):
        self.message = message
        self.pos = pos


class _Parser:
    def __init__(self, src: str, n: int):
        self.src = src
        self.n = n
        # pulled lazily so errors surface in source order
        self._tokens = _tokenize(src)
        self.tok = next(self._tokens)

    def advance(self) -> _Tok:
        t = self.tok
        if t.kind != "end":
            self.tok = next(self._tokens)
        return t

    def expect(self, text: str) -> None:
        if self.tok.text != text or self.tok.kind != "op":
            found = self.tok.text or "end of input"
            raise _SyntaxAt(f"expected '{text}', found '{found}'", self.tok.pos)
        self.advance()

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            raise _SyntaxAt(f"unexpected token '{self.tok.text}'", self.tok.pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            rhs = self.unary()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            arg = self.unary()
            return Neg(arg) if op == "-" else arg
        return self.power()

    def power(self) -> Node:
        node = self.atom()
        while self.tok.kind == "op" and self.tok.text == "^":
            self.advance()
            node = Pow(node, self.exponent())
        return node

    def exponent(self) -> int:
        paren = self.tok.kind == "op" and self.tok.text == "("
        if paren:
            self.advance()
        sign = 1
        if self.tok.kind == "op" and self.tok.text in "+-":
            sign = -1 if self.advance().text == "-" else 1
        t = self.tok
        if t.kind != "num":
            raise _SyntaxAt("exponent must be an integer literal", t.pos)
        if not re.fullmatch(r"\d+", t.text):
            raise _SyntaxAt(f"non-integer exponent literal '{t.text}'", t.pos)
        self.advance()
        if paren:
            self.expect(")")
        return sign * int(t.text)

    def atom(self) -> Node:
        t = self.tok
        if t.kind == "num":
            self.advance()
            return Num(float(t.text))
        if t.kind == "name":
            self.advance()
            m = re.fullmatch(r"x([1-9]\d*)", t.text)
            if m:
                idx = int(m.group(1))
                if idx > self.n:
                    raise _SyntaxAt(
                        f"variable index exceeds dimension: {t.text} with n={self.n}", t.pos
                    )
                return Var(idx)
            if t.text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(t.text, arg)
            raise _SyntaxAt(f"unknown identifier {t.text}", t.pos)
        if t.kind == "op" and t.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = t.text or "end of input"
        raise _SyntaxAt(f"malformed syntax: unexpected '{found}'", t.pos)


@dataclass(frozen=True)
class Expression:
    """A parsed scalar field on R^n."""

    root: Node
    n: int
    source: str = ""

    def __str__(self) -> str:
        return self.source or str(self.root)

    def jet(self, x, order: int = 2) -> "Jet2":
        return eval_jet2(self, x, order=order)

    def value(self, x) -> Union[float, np.ndarray]:
        return eval_jet2(self, x, order=0).value


def parse(src: str, n: int) -> Expression:
    if n < 1:
        raise ValueError("ambient dimension must be >= 1")
    try:
        root = _Parser(src, n).parse()
    except _SyntaxAt as exc:
        raise ExprSyntaxError(exc.message, len(src[: exc.pos].encode("utf-8"))) from None
    return Expression(root, n, src)


# --------------------------------------------------------------------------
# Second-order forward propagation

@dataclass
class Jet2:
    """Value, gradient and Hessian; arrays carry a leading batch axis when batched."""

    value: np.ndarray
    gradient: Optional[np.ndarray]
    hessian: Optional[np.ndarray]

    def __iter__(self):
        return iter((self.value, self.gradient, self.hessian))


class _J:
    """Batched jet: v (B,), g (B, n), h (B, n, n); g/h are None below the order."""

    __slots__ = ("v", "g", "h")

    def __init__(self, v, g=None, h=None):
        self.v, self.g, self.h = v, g, h


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[:, :, None] * b[:, None, :]


def _chain(u: _J, f0, f1, f2) -> _J:
    """Compose a univariate map with derivatives f0, f1, f2 (evaluated at u.v)."""
    g = h = None
    if u.g is not None:
        g = f1[:, None] * u.g
    if u.h is not None:
        h = f1[:, None, None] * u.h + f2[:, None, None] * _outer(u.g, u.g)
    return _J(f0, g, h)


def _add(a: _J, b: _J, sign: float = 1.0) -> _J:
    g = None if a.g is None else a.g + sign * b.g
    h = None if a.h is None else a.h + sign * b.h
    return _J(a.v + sign * b.v, g, h)


def _mul(a: _J, b: _J) -> _J:
    g = h = None
    if a.g is not None:
        g = a.v[:, None] * b.g + b.v[:, None] * a.g
    if a.h is not None:
        h = (
            a.v[:, None, None] * b.h
            + b.v[:, None, None] * a.h
            + (_outer(a.g, b.g) + _outer(b.g, a.g))
        )
    return _J(a.v * b.v, g, h)


def _domain_check(bad: np.ndarray, message: str, node: Node, X: np.ndarray) -> None:
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise ExprDomainError(message, str(node), X[k].copy())


def _reciprocal(u: _J, node: Node, X: np.ndarray) -> _J:
    _domain_check(u.v == 0.0, "division by zero", node, X)
    r = 1.0 / u.v
    return _chain(u, r, -r * r, 2.0 * r * r * r)


def _power(u: _J, k: int, node: Node, X: np.ndarray) -> _J:
    if k == 0:
        return _const(1.0, u.v.shape[0], X.shape[1], u)
    if k < 0:
        _domain_check(u.v == 0.0, "division by zero", node, X)
    a = u.v
    f0 = a**k
    f1 = k * a ** (k - 1)
    f2 = k * (k - 1) * a ** (k - 2) if k not in (0, 1) else np.zeros_like(a)
    return _chain(u, f0, f1, f2)


def _const(c: float, batch: int, n: int, like: _J) -> _J:
    v = np.full(batch, c)
    g = None if like.g is None else np.zeros((batch, n))
    h = None if like.h is None else np.zeros((batch, n, n))
    return _J(v, g, h)


def _ev(node: Node, X: np.ndarray, order: int) -> _J:
    B, n = X.shape
    if isinstance(node, Num):
        v = np.full(B, node.value)
        return _J(v, np.zeros((B, n)) if order >= 1 else None,
                  np.zeros((B, n, n)) if order >= 2 else None)
    if isinstance(node, Var):
        i = node.index - 1
        g = h = None
        if order >= 1:
            g = np.zeros((B, n))
            g[:, i] = 1.0
        if order >= 2:
            h = np.zeros((B, n, n))
        return _J(X[:, i].copy(), g, h)
    if isinstance(node, Neg):
        u = _ev(node.arg, X, order)
        return _J(-u.v, None if u.g is None else -u.g, None if u.h is None else -u.h)
    if isinstance(node, Add):
        return _add(_ev(node.left, X, order), _ev(node.right, X, order))
    if isinstance(node, Sub):
        return _add(_ev(node.left, X, order), _ev(node.right, X, order), -1.0)
    if isinstance(node, Mul):
        return _mul(_ev(node.left, X, order), _ev(node.right, X, order))
    if isinstance(node, Div):
        num = _ev(node.left, X, order)
        den = _ev(node.right, X, order)
        return _mul(num, _reciprocal(den, node, X))
    if isinstance(node, Pow):
        return _power(_ev(node.base, X, order), node.exponent, node, X)
    if isinstance(node, Call):
        u = _ev(node.arg, X, order)
        a = u.v
        if node.name == "sin":
            s, c = np.sin(a), np.cos(a)
            return _chain(u, s, c, -s)
        if node.name == "cos":
            s, c = np.sin(a), np.cos(a)
            return _chain(u, c, -s, -c)
        if node.name == "exp":
            with np.errstate(over="ignore"):
                e = np.exp(a)
            _domain_check(~np.isfinite(e), "exp overflow", node, X)
            return _chain(u, e, e, e)
        if node.name == "log":
            _domain_check(a <= 0.0, "log of nonpositive argument", node, X)
            r = 1.0 / a
            return _chain(u, np.log(a), r, -r * r)
        if node.name == "sqrt":
            # the derivative is unbounded at 0, so 0 is outside the domain too
            _domain_check(a <= 0.0, "sqrt of nonpositive argument", node, X)
            s = np.sqrt(a)
            return _chain(u, s, 0.5 / s, -0.25 / (s * a))
    raise TypeError(f"unknown node {node!r}")


def eval_jet2(e: Expression, x, order: int = 2) -> Jet2:
    """Evaluate ``e`` at ``x`` (shape (n,) or (B, n)).

    ``order`` limits propagation: 0 computes only values, 1 adds gradients.
    The Hessian is symmetrised on output so it equals its transpose exactly.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != e.n:
        raise ValueError(f"expected points of dimension {e.n}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite evaluation point")
    j = _ev(e.root, X, order)
    h = j.h
    if h is not None:
        h = 0.5 * (h + np.swapaxes(h, 1, 2))
    if single:
        return Jet2(
            float(j.v[0]),
            None if j.g is None else j.g[0],
            None if h is None else h[0],
        )
    return Jet2(j.v, j.g, h)


def evaluate_many(exprs, X: np.ndarray, order: int = 2):
    """Stack jets of several expressions: values (B, m), grads (B, m, n), hessians (B, m, n, n)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    jets = [eval_jet2(e, X, order=order) for e in exprs]
    B, n = X.shape
    m = len(jets)
    vals = np.stack([j.value for j in jets], axis=1) if m else np.zeros((B, 0))
    grads = hess = None
    if order >= 1:
        grads = np.stack([j.gradient for j in jets], axis=1) if m else np.zeros((B, 0, n))
    if order >= 2:
        hess = np.stack([j.hessian for j in jets], axis=1) if m else np.zeros((B, 0, n, n))
    return vals, grads, hess


# --------------------------------------------------------------------------
# Finite-difference checking

FD_GUARD = 10.0


def _fd_axis(fun, x: np.ndarray, i: int, h: float):
    """Central difference of ``fun`` along axis ``i``.

    The stencil must clear the domain edge by a guard factor; otherwise the
    step is clipped to a small fraction of the distance to the edge (located
    by bisection). Returns (derivative, clipped).
    """
    e = np.zeros_like(x)
    e[i] = 1.0
    reach = FD_GUARD * h
    dist = reach
    for direction in (1.0, -1.0):
        try:
            fun(x + direction * reach * e)
            continue
        except ExprDomainError:
            pass
        lo, hi = 0.0, reach
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            try:
                fun(x + direction * mid * e)
                lo = mid
            except ExprDomainError:
                hi = mid
        dist = min(dist, lo)
    if dist >= reach:
        return (fun(x + h * e) - fun(x - h * e)) / (2.0 * h), False
    hc = max(min(h, dist * 1e-4), 1e-14)
    return (fun(x + hc * e) - fun(x - hc * e)) / (2.0 * hc), True


def finite_difference_check(e: Expression, x, step: float = 1e-5) -> dict:
    """Compare AD derivatives with central finite differences at ``x``.

    The gradient is checked against differences of the value and the Hessian
    against differences of the AD gradient. Errors are relative with a unit
    floor: |ad - fd|_inf / max(1, |fd|_inf).
    """
    x = np.asarray(x, dtype=float)
    jet = eval_jet2(e, x)

    def value(p):
        return np.array(eval_jet2(e, p, order=0).value)

    def grad(p):
        return eval_jet2(e, p, order=1).gradient

    n = x.size
    fd_g = np.zeros(n)
    fd_h = np.zeros((n, n))
    clipped = False
    for i in range(n):
        d, c1 = _fd_axis(value, x, i, step)
        fd_g[i] = d
        col, c2 = _fd_axis(grad, x, i, step)
        fd_h[:, i] = col
        clipped = clipped or c1 or c2
    fd_h = 0.5 * (fd_h + fd_h.T)

    def rel(a, b):
        return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))

    return {
        "gradient_error": rel(jet.gradient, fd_g),
        "hessian_error": rel(jet.hessian, fd_h),
        "step_clipped": clipped,
    }


def is_symmetric(h: np.ndarray) -> bool:
    return bool(np.array_equal(h, np.swapaxes(h, -1, -2)))


__all__ = [
    "Add", "Call", "Div", "Expression", "ExprDomainError", "ExprError",
    "ExprSyntaxError", "Jet2", "Mul", "Neg", "Num", "Pow", "Sub", "Var",
    "eval_jet2", "evaluate_many", "finite_difference_check", "parse",
    "is_symmetric",
]
