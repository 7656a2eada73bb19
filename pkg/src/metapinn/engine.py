"""Differentiable kernel: layers with second-order input jets, parameter
gradients, finite-difference oracles and Adam.

Input derivatives are propagated forward as truncated Taylor jets over the
two point coordinates (t, x). A :class:`Jet` holds six tensors
``(u, t, x, tt, tx, xx)`` for the value and its first and second partials;
slots only need to broadcast against each other, so point-independent or
zero slots stay small. All jet arithmetic is ordinary torch arithmetic, so
reverse-mode autograd differentiates through it with respect to parameters
(including the third-order mixed terms that appear when a loss uses jet
components).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple

import numpy as np
import torch

from .errors import ConfigError, NumericError

DTYPE = torch.float64

ModelParams = dict  # name -> float64 tensor, insertion ordered


def as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == DTYPE else a.to(DTYPE)
    return torch.from_numpy(np.array(a, dtype=np.float64))


@dataclass(frozen=True)
class JetValue:
    """A scalar field value with its input derivatives, batched over points.

    ``data`` has shape ``(..., 6)`` in basis order
    ``[u, u_t, u_x, u_tt, u_tx, u_xx]``; the mixed partial is stored once.
    """

    data: torch.Tensor

    @property
    def value(self) -> torch.Tensor:
        return self.data[..., 0]

    @property
    def d1(self) -> torch.Tensor:
        return self.data[..., 1:3]

    @property
    def d2(self) -> torch.Tensor:
        return self.data[..., 3:6]

    @property
    def components(self) -> torch.Tensor:
        return self.data

    @classmethod
    def from_parts(cls, value, d1, d2) -> "JetValue":
        value = as_tensor(value)
        return cls(torch.cat([value[..., None], as_tensor(d1), as_tensor(d2)], dim=-1))


# --------------------------------------------------------------------------
# jet primitives

class Jet(NamedTuple):
    u: torch.Tensor
    t: torch.Tensor
    x: torch.Tensor
    tt: torch.Tensor
    tx: torch.Tensor
    xx: torch.Tensor

    @property
    def width(self) -> int:
        return self.u.shape[-1]

    def __add__(self, other: "Jet") -> "Jet":  # type: ignore[override]
        return Jet(*(a + b for a, b in zip(self, other)))

    def scalar(self) -> JetValue:
        """Stack the slots of a width-1 jet into a :class:`JetValue`."""
        slots = torch.broadcast_tensors(*(s[..., 0] for s in self))
        return JetValue(torch.stack(slots, dim=-1))


def point_jet(x: torch.Tensor) -> Jet:
    """Seed jet for the identity map on points ``x`` of shape ``(..., 2)``."""
    x = as_tensor(x)
    if x.shape[-1] != 2:
        raise ConfigError(f"points must have 2 coordinates, got shape {tuple(x.shape)}")
    e_t = x.new_tensor([1.0, 0.0])
    e_x = x.new_tensor([0.0, 1.0])
    zero = x.new_zeros(2)
    return Jet(x, e_t, e_x, zero, zero, zero)


def constant_jet(v: torch.Tensor) -> Jet:
    """Jet of an input that does not depend on the point."""
    zero = v.new_zeros(v.shape[-1])
    return Jet(v, zero, zero, zero, zero, zero)


def linear(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """``x @ weight.T`` over arbitrary leading axes (flattened for speed)."""
    if x.dim() == 1:
        return weight @ x
    out = x.reshape(-1, x.shape[-1]) @ weight.T
    return out.reshape(*x.shape[:-1], weight.shape[0])


def jet_affine(jet: Jet, weight: torch.Tensor, bias: torch.Tensor | None) -> Jet:
    u = linear(jet.u, weight)
    if bias is not None:
        # bias only shifts the value slot
        u = u + bias
    return Jet(u, *(linear(s, weight) for s in jet[1:]))


def _act_derivs(kind: str, a: torch.Tensor, omega: float):
    if kind == "sin":
        s = torch.sin(omega * a)
        c = torch.cos(omega * a)
        return s, omega * c, -(omega * omega) * s
    if kind == "relu":
        step = (a > 0).to(a.dtype)
        return a * step, step, torch.zeros_like(a)
    if kind == "tanh":
        y = torch.tanh(a)
        dy = 1.0 - y * y
        return y, dy, -2.0 * y * dy
    raise ConfigError(f"unknown activation {kind!r}")


def activate(kind: str | None, a: torch.Tensor, omega: float = 1.0) -> torch.Tensor:
    if kind is None:
        return a
    if kind == "sin":
        return torch.sin(omega * a)
    if kind == "relu":
        return torch.relu(a)
    if kind == "tanh":
        return torch.tanh(a)
    raise ConfigError(f"unknown activation {kind!r}")


def jet_activate(kind: str | None, jet: Jet, omega: float = 1.0) -> Jet:
    """Chain rule through an elementwise activation, up to second order."""
    if kind is None:
        return jet
    f0, f1, f2 = _act_derivs(kind, jet.u, omega)
    return Jet(
        f0,
        f1 * jet.t,
        f1 * jet.x,
        f1 * jet.tt + f2 * (jet.t * jet.t),
        f1 * jet.tx + f2 * (jet.t * jet.x),
        f1 * jet.xx + f2 * (jet.x * jet.x),
    )


# --------------------------------------------------------------------------
# dense networks

@dataclass(frozen=True)
class Layer:
    name: str
    fan_in: int
    fan_out: int
    activation: str | None = None
    residual: bool = False

    def __post_init__(self):
        if self.residual and self.fan_in != self.fan_out:
            raise ConfigError(f"residual layer {self.name} needs equal widths")


@dataclass(frozen=True)
class Net:
    """A stack of affine layers with optional activation and skip connection."""

    layers: tuple[Layer, ...]
    omega: float = 1.0

    @property
    def fan_in(self) -> int:
        return self.layers[0].fan_in

    @property
    def fan_out(self) -> int:
        return self.layers[-1].fan_out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            shapes[f"{layer.name}.weight"] = (layer.fan_out, layer.fan_in)
            shapes[f"{layer.name}.bias"] = (layer.fan_out,)
        return shapes


def mlp(name: str, sizes: list[int], activation: str | None, *, omega: float = 1.0,
        final_activation: bool = False) -> Net:
    """Build a ``Net`` whose first layer is plain, equal-width hidden layers
    carry residual connections and whose last layer is linear unless
    ``final_activation``."""
    layers = []
    n = len(sizes) - 1
    for i in range(n):
        last = i == n - 1
        act = activation if (not last or final_activation) else None
        residual = 0 < i and not last and sizes[i] == sizes[i + 1]
        layers.append(Layer(f"{name}.{i}", sizes[i], sizes[i + 1], act, residual))
    return Net(tuple(layers), omega)


def _check_finite(t: torch.Tensor, layer: int, name: str):
    # NaN/Inf anywhere make the sum non-finite
    if not bool(torch.isfinite(t.detach().sum())):
        raise NumericError(f"non-finite activation in layer {layer} ({name})", layer=layer)


def _lookup(params: Mapping[str, torch.Tensor], layer: Layer):
    try:
        w = params[f"{layer.name}.weight"]
        b = params[f"{layer.name}.bias"]
    except KeyError as exc:
        raise ConfigError(f"missing parameter {exc.args[0]}") from None
    if tuple(w.shape) != (layer.fan_out, layer.fan_in) or tuple(b.shape) != (layer.fan_out,):
        raise ConfigError(
            f"{layer.name}: expected weight {(layer.fan_out, layer.fan_in)}, got {tuple(w.shape)}")
    return w, b


def _first_layer_shift(w: torch.Tensor, width: int, cond: torch.Tensor | None, layer: Layer):
    # a point-independent input concatenated after h only shifts the pre-activation
    if cond is None:
        if width != layer.fan_in:
            raise ConfigError(f"{layer.name}: input width {width} != {layer.fan_in}")
        return w, None
    if width + cond.shape[-1] != layer.fan_in:
        raise ConfigError(
            f"{layer.name}: input width {width}+{cond.shape[-1]} != {layer.fan_in}")
    return w[:, :width], linear(cond, w[:, width:])


def net_forward(params: Mapping[str, torch.Tensor], net: Net, h: torch.Tensor,
                *, cond: torch.Tensor | None = None, check: bool = True) -> torch.Tensor:
    """Plain forward pass of ``net`` on ``h``.

    ``cond`` is concatenated to the input of the first layer; it must
    broadcast against ``h`` once its feature axis is stripped.
    """
    for i, layer in enumerate(net.layers):
        w, b = _lookup(params, layer)
        shift = None
        if i == 0:
            w, shift = _first_layer_shift(w, h.shape[-1], cond, layer)
        elif h.shape[-1] != layer.fan_in:
            raise ConfigError(f"{layer.name}: input width {h.shape[-1]} != {layer.fan_in}")
        pre = linear(h, w) + b
        if shift is not None:
            pre = pre + shift
        out = activate(layer.activation, pre, net.omega)
        h = h + out if layer.residual else out
        if check:
            _check_finite(h, i, layer.name)
    return h


def net_jet(params: Mapping[str, torch.Tensor], net: Net, jet: Jet,
            *, cond: torch.Tensor | None = None, check: bool = True) -> Jet:
    """Jet counterpart of :func:`net_forward`; ``cond`` is constant in the
    point and has shape ``(..., cond_width)``."""
    for i, layer in enumerate(net.layers):
        w, b = _lookup(params, layer)
        if i == 0:
            w, shift = _first_layer_shift(w, jet.width, cond, layer)
            if shift is not None:
                b = b + shift
        elif jet.width != layer.fan_in:
            raise ConfigError(f"{layer.name}: input width {jet.width} != {layer.fan_in}")
        out = jet_activate(layer.activation, jet_affine(jet, w, b), net.omega)
        jet = jet + out if layer.residual else out
        if check:
            for slot in jet:
                _check_finite(slot, i, layer.name)
    return jet


def forward_with_jet(params: Mapping[str, torch.Tensor], net: Net, x, z=None,
                     embed: Net | None = None) -> JetValue:
    """Evaluate a scalar network at points ``x`` (shape ``(..., 2)``) together
    with its six jet components, holding ``z`` and the parameters fixed.

    With ``embed`` the points pass through that net first; ``z`` is then
    concatenated to the embedding before ``net``.
    """
    x = as_tensor(x)
    jet = point_jet(x)
    if embed is not None:
        jet = net_jet(params, embed, jet)
    cond = None
    if z is not None:
        cond = as_tensor(z)
        while cond.dim() < x.dim():
            cond = cond.unsqueeze(-2)
    out = net_jet(params, net, jet, cond=cond)
    if out.width != 1:
        raise ConfigError("forward_with_jet needs a scalar-output network")
    value = out.scalar()
    if value.data.shape[:-1] != x.shape[:-1]:
        value = JetValue(value.data.expand(*x.shape[:-1], 6))
    return value


# --------------------------------------------------------------------------
# parameter gradients

def param_grad(loss: torch.Tensor, params: Mapping[str, torch.Tensor], *,
               create_graph: bool = False) -> dict[str, torch.Tensor]:
    """Exact gradient of a scalar ``loss`` w.r.t. every tensor in ``params``.

    Parameters the loss does not reach get zero gradients.
    """
    if loss.dim() != 0:
        raise ConfigError("loss must be a scalar")
    if not bool(torch.isfinite(loss)):
        raise NumericError(f"non-finite loss {loss.item()!r}")
    names = list(params)
    tensors = [params[k] for k in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True, create_graph=create_graph)
    return {k: (torch.zeros_like(t) if g is None else g) for k, t, g in zip(names, tensors, grads)}


def require_grad(params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}


# --------------------------------------------------------------------------
# finite-difference oracles

def fd_jet(f: Callable[[np.ndarray], float], x, h: float = 1e-3, *,
           extrapolate: bool = False) -> np.ndarray:
    """Central-difference estimate of ``[f, f_t, f_x, f_tt, f_tx, f_xx]`` at ``x``.

    With ``extrapolate`` the steps ``h`` and ``h/2`` are combined by
    Richardson extrapolation, cancelling the O(h^2) error term.
    """
    if extrapolate:
        return (4.0 * fd_jet(f, x, h / 2) - fd_jet(f, x, h)) / 3.0
    x = np.asarray(x, dtype=np.float64)
    et = np.array([h, 0.0])
    ex = np.array([0.0, h])
    f0 = f(x)
    ftp, ftm = f(x + et), f(x - et)
    fxp, fxm = f(x + ex), f(x - ex)
    fpp, fpm = f(x + et + ex), f(x + et - ex)
    fmp, fmm = f(x - et + ex), f(x - et - ex)
    return np.array([
        f0,
        (ftp - ftm) / (2 * h),
        (fxp - fxm) / (2 * h),
        (ftp - 2 * f0 + ftm) / (h * h),
        (fpp - fpm - fmp + fmm) / (4 * h * h),
        (fxp - 2 * f0 + fxm) / (h * h),
    ])


def fd_param_grad(loss_fn: Callable[[Mapping[str, torch.Tensor]], float],
                  params: Mapping[str, torch.Tensor], h: float = 1e-5) -> dict[str, torch.Tensor]:
    """Per-parameter central differences of ``loss_fn``; slow, for testing."""
    base = {k: v.detach().clone() for k, v in params.items()}
    grads = {}
    for name, tensor in base.items():
        flat = tensor.view(-1)
        g = torch.zeros_like(flat)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = float(loss_fn(base))
            flat[i] = old - h
            down = float(loss_fn(base))
            flat[i] = old
            g[i] = (up - down) / (2 * h)
        grads[name] = g.view_as(tensor)
    return grads


# --------------------------------------------------------------------------
# optimizer

def lr_schedule(epoch: int, lr0: float, half_every: int) -> float:
    """Step decay: halve the rate every ``half_every`` epochs."""
    if epoch < 0 or half_every < 1:
        raise ConfigError("lr_schedule needs epoch >= 0 and half_every >= 1")
    return lr0 * 0.5 ** (epoch // half_every)


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, torch.Tensor], lr0: float = 1e-3, **kw) -> "AdamState":
        m = {k: torch.zeros_like(v, dtype=DTYPE).detach() for k, v in params.items()}
        v = {k: torch.zeros_like(t, dtype=DTYPE).detach() for k, t in params.items()}
        return cls(m, v, 0, lr0, **kw)


def adam_step(params: dict[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for k, p in params.items():
        if k not in grads or k not in state.m:
            raise ConfigError(f"no gradient/optimizer slot for parameter {k}")
        if grads[k].shape != p.shape or state.m[k].shape != p.shape:
            raise ConfigError(f"shape mismatch for parameter {k}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k].detach()
            m = state.m[k]
            v = state.v[k]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.sub_(lr * (m / c1) / denom)
    return params, state


def relative_error(a, b, floor: float = 0.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, np.abs(a - b) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(r.max()) if r.size else 0.0


def uniform_(rng: np.random.Generator, shape, bound: float) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape).astype(np.float64))


__all__ = [
    "AdamState", "Jet", "JetValue", "Layer", "ModelParams", "Net", "activate", "adam_step",
    "as_tensor", "constant_jet", "fd_jet", "fd_param_grad", "forward_with_jet",
    "jet_activate", "jet_affine", "lr_schedule", "mlp", "net_forward", "net_jet",
    "param_grad", "point_jet", "relative_error", "require_grad", "uniform_",
]

