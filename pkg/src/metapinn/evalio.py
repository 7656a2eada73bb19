"""Evaluation over problem suites, solution-grid export and checkpoint I/O.

Grid CSV: header ``t,x,u`` then ``nt * nx`` rows on the uniform grid over
the domain box, ``t`` as the outer loop.

PGM heatmap: binary ``P5`` with width ``nx``, height ``nt`` and maxval 255;
row ``i`` holds ``t_i`` (top row is ``t_min``), column ``j`` holds ``x_j``.
Pixel = ``round(255 * (u - min) / (max - min))``, or 0 everywhere when the
field is constant.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (CheckpointState, dumps_checkpoint, load_checkpoint, loads_checkpoint,
                         save_checkpoint)
from .engine import as_tensor, require_grad
from .errors import MetaPinnError, NumericError
from .losses import residuals
from .model import Model
from .probgen import DEFAULT_NG, PdeProblem, sample_boundary, sample_interior
from .train import Batch, maml_adapt

CHUNK = 2048


@dataclass(frozen=True)
class ProblemResult:
    seed: int
    ge: float = math.nan
    bc: float = math.nan
    total: float = math.nan
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


def _mean_se(xs: list[float]) -> tuple[float, float]:
    if not xs:
        return math.nan, math.nan
    a = np.array(xs)
    if len(a) == 1:
        return float(a[0]), 0.0
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(len(a)))


@dataclass
class EvalReport:
    method: str
    results: list[ProblemResult]
    n_f: int
    n_g: tuple
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> list[ProblemResult]:
        return [r for r in self.results if not r.failed]

    @property
    def n_failed(self) -> int:
        return len(self.results) - len(self.ok)

    @property
    def single(self) -> bool:
        """True when the standard errors are undefined (one successful problem)."""
        return len(self.ok) == 1

    def aggregate(self, key: str) -> tuple[float, float]:
        return _mean_se([getattr(r, key) for r in self.ok])

    def to_dict(self) -> dict:
        agg = {k: dict(zip(("mean", "se"), self.aggregate(k))) for k in ("total", "ge", "bc")}
        return {"method": self.method, "n_problems": len(self.results), "n_failed": self.n_failed,
                "n_f": self.n_f, "n_g": list(self.n_g), "seed": self.seed, "single": self.single,
                "aggregates": agg}

    def to_text(self) -> str:
        lines = [f"method: {self.method}",
                 f"problems: {len(self.results)} (failed: {self.n_failed})",
                 f"N_f: {self.n_f}  N_g: {sum(self.n_g)} {tuple(self.n_g)}  seed: {self.seed}",
                 "",
                 f"{'':<12}{'mean':>14}{'std. error':>14}"]
        for label, key in (("PINN error", "total"), ("GE error", "ge"), ("BC error", "bc")):
            mean, se = self.aggregate(key)
            lines.append(f"{label:<12}{mean:>14.6g}{se:>14.6g}")
        if self.single:
            lines.append("(single problem: standard error undefined, shown as 0)")
        return "\n".join(lines) + "\n"

    def per_problem_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "seed", "total", "ge", "bc", "failed", "error"])
        for i, r in enumerate(self.results):
            w.writerow([i, r.seed, repr(r.total), repr(r.ge), repr(r.bc), int(r.failed), r.error])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.to_text())
        (out / "per_problem.csv").write_text(self.per_problem_csv())

    @classmethod
    def from_csv(cls, text: str, method: str, n_f: int, n_g, seed: int) -> "EvalReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        results = [ProblemResult(int(r["seed"]), float(r["ge"]), float(r["bc"]),
                                 float(r["total"]), r["error"]) for r in rows]
        return cls(method, results, n_f, tuple(n_g), seed)


def _chunked_ge(pred, alpha, pts: torch.Tensor, chunk: int) -> float:
    total = 0.0
    for start in range(0, len(pts), chunk):
        r = residuals(alpha, pred.jet(pts[start:start + chunk]))
        if not bool(torch.isfinite(r).all()):
            i = start + int((~torch.isfinite(r)).nonzero()[0, 0])
            raise NumericError(f"non-finite residual at collocation point {i}", index=i)
        total += float((r * r).sum())
    return total / len(pts)


def evaluate_problem(params, model: Model, problem: PdeProblem, rng: np.random.Generator, *,
                     n_f: int = 10000, n_g=DEFAULT_NG, maml_inner_lr: float = 1e-2,
                     chunk: int = CHUNK, z=None) -> ProblemResult:
    """PINN error of one problem. MAML adapts with one gradient step on the
    evaluation sample itself before scoring."""
    bset = sample_boundary(problem, rng, *n_g)
    pts = as_tensor(sample_interior(problem, rng, n_f))
    if model.method == "maml" and maml_inner_lr > 0:
        batch = Batch([problem.seed], as_tensor(problem.alpha.alpha)[None],
                      as_tensor(bset.pairs())[None], as_tensor(bset.points)[None],
                      as_tensor(bset.values)[None], pts[None])
        adapted = maml_adapt(require_grad(params), model, batch, maml_inner_lr)
        params = {k: v.detach() for k, v in adapted.items()}
    with torch.no_grad():
        if z is None:
            z = model.represent(params, problem.alpha, bset)
        pred = model.bind(params, z)
        ge = _chunked_ge(pred, problem.alpha, pts, chunk)
        diff = as_tensor(bset.values) - pred.value(as_tensor(bset.points))
        if not bool(torch.isfinite(diff).all()):
            raise NumericError("non-finite prediction on the boundary")
        bc = float((diff * diff).mean())
    return ProblemResult(problem.seed, ge, bc, ge + bc)


def evaluate(params, model: Model, problems: list[PdeProblem], n_f: int = 10000,
             n_g=DEFAULT_NG, seed: int = 0, *, maml_inner_lr: float = 1e-2,
             chunk: int = CHUNK) -> EvalReport:
    """Mean and standard error of the PINN, GE and BC errors over ``problems``.

    Problem ``i`` draws its points from ``default_rng([seed, i])``; numeric
    failures are recorded per problem and excluded from the aggregates.
    """
    if not problems:
        raise MetaPinnError("evaluate needs at least one problem")
    results = []
    for i, problem in enumerate(problems):
        rng = np.random.default_rng([seed, i])
        try:
            results.append(evaluate_problem(params, model, problem, rng, n_f=n_f, n_g=n_g,
                                            maml_inner_lr=maml_inner_lr, chunk=chunk))
        except NumericError as exc:
            results.append(ProblemResult(problem.seed, error=str(exc) or "numeric failure"))
    return EvalReport(model.method, results, n_f, tuple(n_g), seed)


# --------------------------------------------------------------------------
# grids

def grid_points(problem: PdeProblem, nt: int, nx: int) -> np.ndarray:
    if nt < 2 or nx < 2:
        raise MetaPinnError("grid needs at least 2 points per axis")
    (t0, t1), (x0, x1) = problem.domain.t_range, problem.domain.x_range
    t = np.linspace(t0, t1, nt)
    x = np.linspace(x0, x1, nx)
    tt, xx = np.meshgrid(t, x, indexing="ij")
    return np.stack([tt.ravel(), xx.ravel()], axis=1)


def solution_grid(params, model: Model, problem: PdeProblem, nt: int, nx: int, *, z=None,
                  seed: int = 0, n_g=DEFAULT_NG) -> tuple[np.ndarray, np.ndarray]:
    """Grid points ``(nt*nx, 2)`` and predicted values ``(nt*nx,)``."""
    pts = grid_points(problem, nt, nx)
    with torch.no_grad():
        if z is None and model.uses_boundary:
            bset = sample_boundary(problem, np.random.default_rng(seed), *n_g)
            z = model.represent(params, problem.alpha, bset)
        u = model.predict_value(params, z, as_tensor(pts)).numpy()
    return pts, u


def pgm_bytes(u: np.ndarray) -> bytes:
    u = np.asarray(u, dtype=np.float64)
    lo, hi = float(u.min()), float(u.max())
    if hi > lo:
        pix = np.rint(255.0 * (u - lo) / (hi - lo)).astype(np.uint8)
    else:
        pix = np.zeros(u.shape, dtype=np.uint8)
    nt, nx = u.shape
    return f"P5\n{nx} {nt}\n255\n".encode() + pix.tobytes()


def export_grid(params, model: Model, problem: PdeProblem, nt: int = 100, nx: int = 100,
                path="grid.csv", *, pgm_path=None, z=None, seed: int = 0) -> np.ndarray:
    """Write the predicted solution on a uniform grid; returns ``(nt, nx)`` values."""
    pts, u = solution_grid(params, model, problem, nt, nx, z=z, seed=seed)
    buf = io.StringIO()
    buf.write("t,x,u\n")
    for (t, x), v in zip(pts, u):
        buf.write(f"{float(t)!r},{float(x)!r},{float(v)!r}\n")
    path = Path(path)
    try:
        path.write_text(buf.getvalue())
        if pgm_path is not None:
            Path(pgm_path).write_bytes(pgm_bytes(u.reshape(nt, nx)))
    except OSError as exc:
        raise OSError(f"cannot write grid to {exc.filename or path}: {exc.strerror}") from exc
    return u.reshape(nt, nx)


__all__ = [
    "CheckpointState", "EvalReport", "ProblemResult", "dumps_checkpoint", "evaluate",
    "evaluate_problem", "export_grid", "grid_points", "load_checkpoint", "loads_checkpoint",
    "pgm_bytes", "save_checkpoint", "solution_grid",
]
