"""Set encoder, problem encoder and the conditioned solution network.

Parameters live in a flat ordered dict (``ModelParams``) so that subsets can
be differentiated, adapted (MAML) or frozen (finetuning) without module
surgery. Networks per method:

========  ======================================  ===========================
method    representation z                        solution network input
========  ======================================  ===========================
ours      merge([NN_z-branch(alpha), beta])       [embed(x), z]
np        beta (boundary encoder output)          [embed(x), z]
mt/maml   none                                    embed(x)
pinn      none                                    embed(x)
========  ======================================  ===========================
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .engine import (DTYPE, JetValue, Layer, Net, as_tensor, forward_with_jet, mlp,
                     net_forward, uniform_)
from .errors import ConfigError, DomainError
from .pdealg import DerivBasis, n_monomials

METHODS = ("ours", "np", "mt", "maml", "pinn")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 256
    layers_b: int = 4
    layers_u: int = 5
    siren_omega: float = 1.0
    act_encoder: str = "relu"
    act_solution: str = "sin"
    C: int = 2
    J: int = 2

    def __post_init__(self):
        if self.width < 1 or self.layers_b < 1 or self.layers_u < 2:
            raise ConfigError(f"invalid network sizes in {self}")
        if not 0 <= self.J <= 2:
            raise ConfigError("the jet engine provides derivatives up to order 2")
        if self.C < 0:
            raise ConfigError("C must be nonnegative")
        for act in (self.act_encoder, self.act_solution):
            if act not in ("relu", "sin", "tanh"):
                raise ConfigError(f"unknown activation {act!r}")

    @property
    def basis(self) -> DerivBasis:
        return DerivBasis(2, self.J)

    @property
    def K(self) -> int:
        return n_monomials(2, self.C, self.J)

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    """Network layout for one method; holds no parameters itself."""

    def __init__(self, config: ModelConfig = ModelConfig(), method: str = "ours"):
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        self.config = config
        self.method = method
        w = config.width
        lb = config.layers_b
        self.b1 = self.b2 = self.z_alpha = self.z_merge = None
        if self.uses_boundary:
            self.b1 = mlp("b1", [3] + [w] * lb, config.act_encoder)
            self.b2 = mlp("b2", [w] * (lb + 1), config.act_encoder)
        if self.uses_alpha:
            self.z_alpha = mlp("z.alpha", [config.K] + [w] * lb, config.act_encoder)
            self.z_merge = Net((Layer("z.merge", 2 * w, w),))
        self.u_embed = Net((Layer("u.embed", 2, w),))
        trunk_in = 2 * w if self.uses_boundary else w
        self.u_trunk = mlp("u.trunk", [trunk_in] + [w] * (config.layers_u - 1) + [1],
                           config.act_solution, omega=config.siren_omega)

    @property
    def uses_boundary(self) -> bool:
        return self.method in ("ours", "np")

    @property
    def uses_alpha(self) -> bool:
        return self.method == "ours"

    def nets(self) -> dict[str, Net]:
        out = {"b1": self.b1, "b2": self.b2, "z.alpha": self.z_alpha, "z.merge": self.z_merge,
               "u.embed": self.u_embed, "u.trunk": self.u_trunk}
        return {k: v for k, v in out.items() if v is not None}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for net in self.nets().values():
            shapes.update(net.param_shapes())
        return shapes

    def solution_param_names(self) -> list[str]:
        return [k for k in self.param_shapes() if k.startswith("u.")]

    def encoder_param_names(self) -> list[str]:
        return [k for k in self.param_shapes() if not k.startswith("u.")]

    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def init_params(self, rng) -> dict[str, torch.Tensor]:
        """Fan-in scaled uniform initialization.

        ReLU layers use the He bound sqrt(6/fan_in), sine layers
        sqrt(6/fan_in)/omega, linear layers and all biases 1/sqrt(fan_in).
        """
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        params = {}
        for net in self.nets().values():
            for layer in net.layers:
                n = layer.fan_in
                if layer.activation == "relu":
                    bound = math.sqrt(6.0 / n)
                elif layer.activation == "sin":
                    bound = math.sqrt(6.0 / n) / net.omega
                else:
                    bound = 1.0 / math.sqrt(n)
                params[f"{layer.name}.weight"] = uniform_(rng, (layer.fan_out, n), bound)
                params[f"{layer.name}.bias"] = uniform_(rng, (layer.fan_out,), 1.0 / math.sqrt(n))
        return params

    def check_params(self, params) -> None:
        shapes = self.param_shapes()
        missing = set(shapes) - set(params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")
        for k, s in shapes.items():
            if tuple(params[k].shape) != s:
                raise ConfigError(f"parameter {k} has shape {tuple(params[k].shape)}, expected {s}")

    # ------------------------------------------------------------------
    # encoders

    def encode_boundary(self, params, pairs) -> torch.Tensor:
        """Mean-pooled set encoding of ``(..., N, 3)`` rows ``(t, x, g)``."""
        if not self.uses_boundary:
            raise ConfigError(f"method {self.method!r} has no boundary encoder")
        pairs = _pairs_tensor(pairs)
        if pairs.shape[-1] != 3:
            raise ConfigError(f"boundary rows need (t, x, g), got width {pairs.shape[-1]}")
        if pairs.shape[-2] < 1:
            raise DomainError("boundary set is empty")
        h = net_forward(params, self.b1, pairs)
        return net_forward(params, self.b2, h.mean(dim=-2))

    def encode_problem(self, params, alpha, beta) -> torch.Tensor:
        if not self.uses_alpha:
            raise ConfigError(f"method {self.method!r} has no equation encoder")
        alpha = as_tensor(getattr(alpha, "alpha", alpha))
        if alpha.shape[-1] != self.config.K:
            raise ConfigError(f"alpha needs {self.config.K} entries, got {alpha.shape[-1]}")
        a = net_forward(params, self.z_alpha, alpha)
        beta = as_tensor(beta)
        return net_forward(params, self.z_merge, torch.cat([a, beta.expand_as(a)], dim=-1))

    def represent(self, params, alpha, pairs) -> torch.Tensor | None:
        """Problem representation z for this method (``None`` for mt/maml/pinn)."""
        if not self.uses_boundary:
            return None
        beta = self.encode_boundary(params, pairs)
        if not self.uses_alpha:
            return beta
        return self.encode_problem(params, alpha, beta)

    # ------------------------------------------------------------------
    # solution network

    def _cond(self, z, ndim: int):
        if not self.uses_boundary:
            if z is not None:
                raise ConfigError(f"method {self.method!r} takes no problem representation")
            return None
        if z is None:
            raise ConfigError(f"method {self.method!r} needs a problem representation")
        z = as_tensor(z)
        if z.shape[-1] != self.config.width:
            raise ConfigError(f"z needs width {self.config.width}, got {z.shape[-1]}")
        while z.dim() < ndim:
            z = z.unsqueeze(-2)
        return z

    def predict(self, params, z, x) -> JetValue:
        """Value and input derivatives of the solution at points ``(..., N, 2)``."""
        x = as_tensor(x)
        cond = self._cond(z, x.dim())
        return forward_with_jet(params, self.u_trunk, x, cond, embed=self.u_embed)

    def predict_value(self, params, z, x) -> torch.Tensor:
        x = as_tensor(x)
        if x.shape[-1] != 2:
            raise ConfigError(f"points must have 2 coordinates, got shape {tuple(x.shape)}")
        cond = self._cond(z, x.dim())
        h = net_forward(params, self.u_embed, x)
        return net_forward(params, self.u_trunk, h, cond=cond)[..., 0]

    def bind(self, params, z=None) -> "Predictor":
        return Predictor(self, params, z)


class Predictor:
    """The solution network with parameters and representation fixed."""

    def __init__(self, model: Model, params, z=None):
        self.model = model
        self.params = params
        self.z = z

    def jet(self, x) -> JetValue:
        return self.model.predict(self.params, self.z, x)

    def value(self, x) -> torch.Tensor:
        return self.model.predict_value(self.params, self.z, x)


def _pairs_tensor(pairs) -> torch.Tensor:
    if hasattr(pairs, "pairs"):
        pairs = pairs.pairs()
    return as_tensor(pairs)


__all__ = ["METHODS", "Model", "ModelConfig", "Predictor", "DTYPE"]
