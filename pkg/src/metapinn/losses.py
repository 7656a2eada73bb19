"""PINN error: mean squared equation residual plus mean squared boundary
mismatch, with unit weights."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .engine import as_tensor
from .errors import ConfigError, NumericError
from .pdealg import CoeffVector, DerivBasis, batched_residual, residual


@dataclass(frozen=True)
class PinnError:
    ge: torch.Tensor
    bc: torch.Tensor
    total: torch.Tensor

    @classmethod
    def of(cls, ge, bc) -> "PinnError":
        return cls(ge, bc, ge + bc)

    def item(self) -> "PinnError":
        """Detached python-float copy."""
        return PinnError(float(self.ge), float(self.bc), float(self.total))


def _first_bad(t: torch.Tensor) -> int:
    bad = ~torch.isfinite(t.detach()).reshape(-1)
    return int(bad.nonzero()[0, 0])


def residuals(alpha, jet, *, C: int | None = None,
              basis: DerivBasis = DerivBasis()) -> torch.Tensor:
    """Equation residuals at every jet point.

    ``alpha`` is a :class:`CoeffVector` (shared by all points) or a tensor
    of shape ``(..., K)`` with one coefficient row per problem; in the latter
    case ``C`` must be given (with the derivative ``basis`` when J < 2) and
    ``jet`` has shape ``(..., N, 6)``.
    """
    v = getattr(jet, "components", jet)
    if isinstance(alpha, CoeffVector):
        return residual(alpha, v[..., :alpha.basis.M])
    if C is None:
        raise ConfigError("C is required with a raw coefficient tensor")
    a = as_tensor(alpha)
    M = basis.M
    return batched_residual(a, v[..., :M], M, C)


def ge_error(predictor, alpha, pts, *, C: int | None = None,
             basis: DerivBasis = DerivBasis()) -> torch.Tensor:
    """Mean squared residual over the collocation points (last point axis)."""
    pts = as_tensor(pts)
    if pts.shape[-2] < 1:
        raise ConfigError("need at least one collocation point")
    r = residuals(alpha, predictor.jet(pts), C=C, basis=basis)
    if not bool(torch.isfinite(r).all()):
        i = _first_bad(r)
        raise NumericError(f"non-finite residual at collocation point {i}", index=i)
    return (r * r).mean(dim=-1)


def bc_error(predictor, bset, values=None) -> torch.Tensor:
    """Mean squared mismatch between boundary data and prediction.

    Pass a :class:`~metapinn.probgen.BoundarySet`, or point and value
    tensors of shape ``(..., N, 2)`` and ``(..., N)``.
    """
    if values is None:
        points, values = bset.points, bset.values
    else:
        points = bset
    points = as_tensor(points)
    values = as_tensor(values)
    if points.shape[-2] < 1:
        raise ConfigError("need at least one boundary point")
    diff = values - predictor.value(points)
    if not bool(torch.isfinite(diff).all()):
        i = _first_bad(diff)
        raise NumericError(f"non-finite prediction at boundary point {i}", index=i)
    return (diff * diff).mean(dim=-1)


def pinn_error(predictor, problem, pts_f, bset) -> PinnError:
    return PinnError.of(ge_error(predictor, problem.alpha, pts_f), bc_error(predictor, bset))

