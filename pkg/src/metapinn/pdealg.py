"""Polynomial governing equations over derivative values.

A governing equation is a polynomial of total degree at most ``C`` in the
partial derivatives of ``u`` up to order ``J``. It is stored densely as a
coefficient vector indexed by the canonical monomial enumeration:
monomials sorted by total degree, then by exponent tuple in descending
lexicographic order over the variable order ``[u, u_t, u_x, u_tt, u_tx,
u_xx]``. Index 0 is always the constant driving term.

Expression grammar accepted by :func:`parse_pde` (whitespace ignored)::

    equation := expr [ "=" "0" ]
    expr     := [sign] term { sign term }
    sign     := "+" | "-"
    term     := literal { ["*"] factor } | factor { ["*"] factor }
    factor   := deriv [ "^" posint ]
    deriv    := "u" [ "_" coord { coord } ]       (coord in "t", "x", ...)
    literal  := digits [ "." digits ] [ ("e"|"E") [sign] digits ]
              | "." digits [ exponent ]
              | "inf" | "nan"
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np
import torch

from .errors import ConfigError, ParseError

COORD_NAMES = "txyzw"
MAX_TERMS = 10**6


@dataclass(frozen=True)
class DerivBasis:
    """Ordered derivative variables for points of dimension ``D`` up to order ``J``."""

    D: int = 2
    J: int = 2

    def __post_init__(self):
        if self.D < 1 or self.J < 0:
            raise ConfigError(f"need D >= 1 and J >= 0, got D={self.D}, J={self.J}")
        if self.D > len(COORD_NAMES):
            raise ConfigError(f"at most {len(COORD_NAMES)} coordinates are named")

    @property
    def variables(self) -> tuple[tuple[int, ...], ...]:
        return _variables(self.D, self.J)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(_deriv_name(v) for v in self.variables)

    @property
    def M(self) -> int:
        return len(self.variables)

    def index_of(self, orders: tuple[int, ...]) -> int:
        return self.variables.index(orders)


@lru_cache(maxsize=None)
def _variables(D: int, J: int) -> tuple[tuple[int, ...], ...]:
    out = []
    for order in range(J + 1):
        level = [c for c in _compositions(order, D)]
        # t-order before x-order: u_tt, u_tx, u_xx
        level.sort(reverse=True)
        out.extend(level)
    return tuple(out)


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _deriv_name(orders: tuple[int, ...]) -> str:
    suffix = "".join(COORD_NAMES[i] * k for i, k in enumerate(orders))
    return "u_" + suffix if suffix else "u"


def n_monomials(D: int, C: int, J: int) -> int:
    return math.comb(math.comb(D + J, J) + C, C)


def enumerate_monomials(D: int, C: int, J: int) -> list[tuple[int, ...]]:
    """All exponent tuples of total degree <= C over the derivative basis,
    in canonical (graded, then descending lexicographic) order."""
    if D < 1 or C < 0 or J < 0:
        raise ConfigError(f"need D >= 1, C >= 0, J >= 0, got ({D}, {C}, {J})")
    if n_monomials(D, C, J) > MAX_TERMS:
        raise ConfigError(f"coefficient vector for (D, C, J)=({D}, {C}, {J}) exceeds {MAX_TERMS}")
    return list(_monomials(DerivBasis(D, J).M, C))


@lru_cache(maxsize=None)
def _monomials(M: int, C: int) -> tuple[tuple[int, ...], ...]:
    out = []
    for degree in range(C + 1):
        level = []
        for combo in combinations_with_replacement(range(M), degree):
            exps = [0] * M
            for i in combo:
                exps[i] += 1
            level.append(tuple(exps))
        level.sort(reverse=True)
        out.extend(level)
    return tuple(out)


@lru_cache(maxsize=None)
def _factor_table(M: int, C: int) -> np.ndarray:
    """``(K, C)`` table of 1-based variable indices per monomial, 0 = padding."""
    mons = _monomials(M, C)
    table = np.zeros((len(mons), max(C, 1)), dtype=np.int64)
    for k, exps in enumerate(mons):
        idx = [i + 1 for i, e in enumerate(exps) for _ in range(e)]
        table[k, :len(idx)] = idx
    return table


@dataclass(frozen=True, eq=False)
class CoeffVector:
    alpha: np.ndarray
    C: int = 2
    basis: DerivBasis = DerivBasis()

    def __post_init__(self):
        # + 0.0 turns -0.0 into 0.0 so that bytewise equality is canonical
        a = np.array(self.alpha, dtype=np.float64).reshape(-1) + 0.0
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        if a.size != self.K:
            raise ConfigError(f"coefficient vector needs {self.K} entries, got {a.size}")

    @property
    def K(self) -> int:
        return n_monomials(self.basis.D, self.C, self.basis.J)

    @property
    def monomials(self) -> tuple[tuple[int, ...], ...]:
        return _monomials(self.basis.M, self.C)

    @classmethod
    def zeros(cls, C: int = 2, basis: DerivBasis = DerivBasis()) -> "CoeffVector":
        return cls(np.zeros(n_monomials(basis.D, C, basis.J)), C, basis)

    @classmethod
    def from_terms(cls, terms: dict, C: int = 2, basis: DerivBasis = DerivBasis()) -> "CoeffVector":
        """Build from ``{exponent tuple: coefficient}``."""
        mons = _monomials(basis.M, C)
        index = {m: i for i, m in enumerate(mons)}
        a = np.zeros(len(mons))
        for exps, c in terms.items():
            a[index[tuple(exps)]] += c
        return cls(a, C, basis)

    def nonzero(self) -> dict[tuple[int, ...], float]:
        return {m: float(c) for m, c in zip(self.monomials, self.alpha) if c != 0}

    def __eq__(self, other):
        if not isinstance(other, CoeffVector):
            return NotImplemented
        return (self.C == other.C and self.basis == other.basis
                and self.alpha.tobytes() == other.alpha.tobytes())

    def __hash__(self):
        return hash((self.C, self.basis, self.alpha.tobytes()))

    def __repr__(self):
        return f"CoeffVector({print_pde(self)!r}, C={self.C}, basis={self.basis})"


def monomial_values(v, M: int, C: int):
    """Evaluate every monomial on derivative values ``v`` of shape ``(..., M)``.

    Works on numpy arrays and torch tensors; powers are products of repeated
    factors so that gradients stay exact at zero.
    """
    if v.shape[-1] != M:
        raise ConfigError(f"derivative values have {v.shape[-1]} entries, basis has {M}")
    table = _factor_table(M, C)
    if C == 0:
        return _ones_like(v)[..., :1]
    ext = _concat_one(v)
    out = ext[..., table[:, 0]]
    for j in range(1, table.shape[1]):
        out = out * ext[..., table[:, j]]
    return out


def _ones_like(v):
    if isinstance(v, np.ndarray):
        return np.ones_like(v)
    return v.new_ones(v.shape)


def _concat_one(v):
    if isinstance(v, np.ndarray):
        return np.concatenate([np.ones(v.shape[:-1] + (1,)), v], axis=-1)
    return torch.cat([v.new_ones(*v.shape[:-1], 1), v], dim=-1)


def residual(alpha: CoeffVector, jet):
    """Governing-equation residual sum_c alpha_c prod_i v_i^{c_i}.

    ``jet`` is a :class:`~metapinn.engine.JetValue` or a raw ``(..., M)``
    array/tensor of derivative values. Batched over leading axes.
    """
    v = getattr(jet, "components", jet)
    mono = monomial_values(v, alpha.basis.M, alpha.C)
    a = alpha.alpha
    if not isinstance(mono, np.ndarray):
        a = torch.from_numpy(np.array(a, dtype=np.float64)).to(mono.dtype)
    return (mono * a).sum(-1)


def batched_residual(alpha, v, M: int, C: int):
    """Residual with per-problem coefficients ``alpha`` of shape ``(B, K)``
    against derivative values ``v`` of shape ``(B, N, M)``."""
    mono = monomial_values(v, M, C)
    return (mono * alpha[..., None, :]).sum(-1)


# --------------------------------------------------------------------------
# printing

def _format_coeff(c: float) -> str:
    return repr(float(c))


def print_pde(alpha: CoeffVector) -> str:
    """Canonical text form; ``parse_pde(print_pde(a)) == a`` exactly."""
    names = alpha.basis.names
    parts = []
    for exps, c in zip(alpha.monomials, alpha.alpha):
        if c == 0:
            continue
        factors = []
        for i, e in enumerate(exps):
            if e == 1:
                factors.append(names[i])
            elif e > 1:
                factors.append(f"{names[i]}^{e}")
        mag = abs(float(c))
        neg = math.copysign(1.0, c) < 0
        if not factors:
            body = _format_coeff(mag)
        elif mag == 1.0:
            body = "*".join(factors)
        else:
            body = _format_coeff(mag) + "*" + "*".join(factors)
        if not parts:
            parts.append(("-" if neg else "") + body)
        else:
            parts.append(("- " if neg else "+ ") + body)
    return " ".join(parts) if parts else "0"


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?|inf|nan)
  | (?P<deriv>u(?:_[A-Za-z]+)?)
  | (?P<op>[-+*^=])
""", re.VERBOSE)


def _tokenize(text: str):
    pos = 0
    toks = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", _byte(text, pos), text)
        kind = m.lastgroup
        if kind != "ws":
            toks.append((kind, m.group(), pos))
        pos = m.end()
    toks.append(("end", "", len(text)))
    return toks


def _byte(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str, basis: DerivBasis, C: int):
        self.text = text
        self.basis = basis
        self.C = C
        self.toks = _tokenize(text)
        self.i = 0
        self.index = {m: k for k, m in enumerate(_monomials(basis.M, C))}
        self.alpha = np.zeros(len(self.index))

    def peek(self):
        return self.toks[self.i]

    def take(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def error(self, msg, pos):
        raise ParseError(msg, _byte(self.text, pos), self.text)

    def parse(self) -> CoeffVector:
        kind, val, pos = self.peek()
        sign = 1.0
        if kind == "op" and val in "+-":
            self.take()
            sign = -1.0 if val == "-" else 1.0
        self.term(sign)
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                self.term(-1.0 if val == "-" else 1.0)
            else:
                break
        kind, val, pos = self.peek()
        if kind == "op" and val == "=":
            self.take()
            kind, val, pos = self.take()
            if not (kind == "num" and val == "0"):
                self.error("expected '0' after '='", pos)
            kind, val, pos = self.peek()
        if kind != "end":
            self.error(f"unexpected token {val!r}", pos)
        return CoeffVector(self.alpha, self.C, self.basis)

    def term(self, sign: float):
        kind, val, pos = self.peek()
        start = pos
        coeff = 1.0
        exps = [0] * self.basis.M
        nfactors = 0
        if kind == "num":
            self.take()
            coeff = float(val)
        elif kind != "deriv":
            self.error("expected a number or a derivative", pos)
        else:
            self.factor(exps)
            nfactors += 1
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val == "*":
                self.take()
                kind, val, pos = self.peek()
                if kind != "deriv":
                    self.error("expected a derivative after '*'", pos)
            if kind != "deriv":
                break
            self.factor(exps)
            nfactors += 1
        degree = sum(exps)
        if degree > self.C:
            self.error(f"term degree {degree} exceeds maximum degree C={self.C}", start)
        self.alpha[self.index[tuple(exps)]] += sign * coeff

    def factor(self, exps):
        kind, val, pos = self.take()
        orders = self.deriv_orders(val, pos)
        power = 1
        kind2, val2, pos2 = self.peek()
        if kind2 == "op" and val2 == "^":
            self.take()
            kind3, val3, pos3 = self.take()
            if kind3 != "num" or not val3.isdigit() or int(val3) < 1:
                self.error("expected a positive integer exponent", pos3)
            power = int(val3)
        exps[self.basis.index_of(orders)] += power

    def deriv_orders(self, tok: str, pos: int) -> tuple[int, ...]:
        orders = [0] * self.basis.D
        if tok != "u":
            coords = COORD_NAMES[:self.basis.D]
            for ch in tok[2:]:
                k = coords.find(ch)
                if k < 0:
                    self.error(f"unknown token {tok!r}: no coordinate {ch!r} "
                               f"(coordinates are {', '.join(coords)})", pos)
                orders[k] += 1
        order = sum(orders)
        if order > self.basis.J:
            self.error(f"unknown token {tok!r}: derivative order {order} exceeds "
                       f"maximum order J={self.basis.J}", pos)
        return tuple(orders)


def parse_pde(text: str, basis: DerivBasis = DerivBasis(), C: int = 2) -> CoeffVector:
    """Parse a polynomial PDE such as ``"u_t + u*u_x - 0.1*u_xx = 0"``.

    Repeated monomials are summed; ``u_xt`` is the same variable as ``u_tx``.
    """
    return _Parser(text, basis, C).parse()
