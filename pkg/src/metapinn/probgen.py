"""Random PDE problems on the box [0, 1] x [-1, 1] and collocation sampling.

Every problem is a pure function of its 64-bit seed, so a problem's content
does not depend on which batch it lands in. Sampling functions take an
explicit ``numpy.random.Generator``.

Problem-set files are CSV with the header::

    seed,alpha_0,...,alpha_{K-1},r1,r2,r3

one problem per line, coefficients in canonical monomial order, reals in
shortest round-trip decimal form.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError
from .pdealg import CoeffVector, DerivBasis, n_monomials

ZERO_PROB = 0.75
DEFAULT_NG = (50, 25, 25)
U64 = 2**64


@dataclass(frozen=True)
class DomainBox:
    t_range: tuple[float, float] = (0.0, 1.0)
    x_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if not (self.t_range[0] < self.t_range[1] and self.x_range[0] < self.x_range[1]):
            raise ConfigError(f"empty domain box {self.t_range} x {self.x_range}")


@dataclass(frozen=True)
class IcParams:
    r1: float
    r2: float
    r3: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.r1, self.r2, self.r3)


@dataclass(frozen=True)
class PdeProblem:
    alpha: CoeffVector
    ic: IcParams
    domain: DomainBox = field(default_factory=DomainBox)
    seed: int = 0


@dataclass(frozen=True, eq=False)
class BoundarySet:
    """Boundary points ``(N, 2)`` as ``(t, x)`` rows and their values ``(N,)``."""

    points: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.values)

    def pairs(self) -> np.ndarray:
        """``(N, 3)`` rows ``(t, x, g)`` as fed to the set encoder."""
        return np.concatenate([self.points, self.values[:, None]], axis=1)


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, U64, dtype=np.uint64))


def gen_problem(rng, *, C: int = 2, basis: DerivBasis = DerivBasis(),
                zero_prob: float = ZERO_PROB) -> PdeProblem:
    """Draw one problem. ``rng`` is a Generator (a child seed is drawn from
    it) or an integer seed used directly."""
    seed = child_seed(rng) if isinstance(rng, np.random.Generator) else int(rng)
    if not 0 <= seed < U64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    local = np.random.default_rng(seed)
    K = n_monomials(basis.D, C, basis.J)
    keep = local.random(K) >= zero_prob
    vals = local.uniform(-1.0, 1.0, K)
    alpha = CoeffVector(np.where(keep, vals, 0.0), C, basis)
    r = local.uniform(-1.0, 1.0, 3)
    return PdeProblem(alpha, IcParams(*map(float, r)), DomainBox(), seed)


def make_problem(alpha: CoeffVector, ic, seed: int = 0) -> PdeProblem:
    if not isinstance(ic, IcParams):
        ic = IcParams(*map(float, ic))
    return PdeProblem(alpha, ic, DomainBox(), seed)


def initial_condition(ic: IcParams, x):
    x = np.asarray(x, dtype=np.float64)
    return (x - 1.0) * (x + 1.0) * (ic.r1 * x * x + ic.r2 * x + ic.r3)


def boundary_values(problem: PdeProblem, points) -> np.ndarray:
    """Dirichlet data on the t=t_min edge and the two x edges."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    (t0, _), (x0, x1) = problem.domain.t_range, problem.domain.x_range
    t, x = pts[:, 0], pts[:, 1]
    on_init = t == t0
    on_side = (x == x0) | (x == x1)
    bad = ~(on_init | on_side)
    if bad.any():
        i = int(np.argmax(bad))
        raise DomainError(f"point {tuple(pts[i])} is not on the boundary")
    return np.where(on_init, initial_condition(problem.ic, x), 0.0)


def boundary_value(problem: PdeProblem, p) -> float:
    return float(boundary_values(problem, np.asarray(p, dtype=np.float64)[None])[0])


def sample_boundary(problem: PdeProblem, rng: np.random.Generator, n_init: int = 50,
                    n_left: int = 25, n_right: int = 25) -> BoundarySet:
    """Uniform samples on the initial edge and both side edges.

    Side samples use ``t`` in the half-open ``(t_min, t_max]`` so corners are
    only produced by the initial edge.
    """
    if min(n_init, n_left, n_right) < 0 or n_init + n_left + n_right < 1:
        raise ConfigError(f"invalid boundary counts {(n_init, n_left, n_right)}")
    (t0, t1), (x0, x1) = problem.domain.t_range, problem.domain.x_range
    xi = rng.uniform(x0, x1, n_init)
    tl = t1 - (t1 - t0) * rng.random(n_left)
    tr = t1 - (t1 - t0) * rng.random(n_right)
    pts = np.concatenate([
        np.stack([np.full(n_init, t0), xi], axis=1),
        np.stack([tl, np.full(n_left, x0)], axis=1),
        np.stack([tr, np.full(n_right, x1)], axis=1),
    ])
    return BoundarySet(pts, boundary_values(problem, pts))


def sample_interior(problem: PdeProblem, rng: np.random.Generator, n_f: int) -> np.ndarray:
    """``n_f`` i.i.d. uniform points in the open box, shape ``(n_f, 2)``."""
    if n_f < 1:
        raise ConfigError(f"n_f must be positive, got {n_f}")
    (t0, t1), (x0, x1) = problem.domain.t_range, problem.domain.x_range
    t = rng.uniform(t0, t1, n_f)
    x = rng.uniform(x0, x1, n_f)
    # uniform() is closed at the low end; nudge exact hits inside
    t[t == t0] = np.nextafter(t0, t1)
    x[x == x0] = np.nextafter(x0, x1)
    return np.stack([t, x], axis=1)


# --------------------------------------------------------------------------
# problem-set files

def problem_set_header(K: int = 28) -> list[str]:
    return ["seed"] + [f"alpha_{k}" for k in range(K)] + ["r1", "r2", "r3"]


def dumps_problem_set(problems, K: int = 28) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(problem_set_header(K))
    for p in problems:
        if p.alpha.K != K:
            raise ConfigError(f"problem {p.seed} has {p.alpha.K} coefficients, file expects {K}")
        w.writerow([str(p.seed)] + [repr(float(a)) for a in p.alpha.alpha]
                   + [repr(float(r)) for r in p.ic.as_tuple()])
    return buf.getvalue()


def write_problem_set(path, problems, K: int = 28) -> None:
    Path(path).write_text(dumps_problem_set(problems, K))


def loads_problem_set(text: str, C: int = 2, basis: DerivBasis = DerivBasis()) -> list[PdeProblem]:
    rows = list(csv.reader(io.StringIO(text)))
    K = n_monomials(basis.D, C, basis.J)
    if not rows or rows[0] != problem_set_header(K):
        raise ConfigError(f"problem-set header does not match the {K}-coefficient layout")
    problems = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != K + 4:
            raise ConfigError(f"line {lineno}: expected {K + 4} columns, got {len(row)}")
        try:
            seed = int(row[0])
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        problems.append(PdeProblem(CoeffVector(vals[:K], C, basis), IcParams(*vals[K:]),
                                   DomainBox(), seed))
    return problems


def read_problem_set(path, C: int = 2, basis: DerivBasis = DerivBasis()) -> list[PdeProblem]:
    return loads_problem_set(Path(path).read_text(), C, basis)


def gen_problem_set(n: int, seed: int, **kw) -> list[PdeProblem]:
    rng = np.random.default_rng(seed)
    return [gen_problem(rng, **kw) for _ in range(n)]
