import math

import numpy as np
import pytest
import torch

from metapinn.engine import (AdamState, Layer, Net, adam_step, fd_jet, fd_param_grad,
                             forward_with_jet, lr_schedule, mlp, net_forward, param_grad,
                             relative_error, require_grad, uniform_)
from metapinn.errors import ConfigError, NumericError


def init(net, rng, scale=1.0):
    params = {}
    for layer in net.layers:
        b = scale / math.sqrt(layer.fan_in)
        params[f"{layer.name}.weight"] = uniform_(rng, (layer.fan_out, layer.fan_in), b)
        params[f"{layer.name}.bias"] = uniform_(rng, (layer.fan_out,), b)
    return params


def scalar_fn(params, net):
    return lambda x: float(net_forward(params, net, torch.from_numpy(x))[0])


class TestJets:
    def test_constant_network(self):
        net = mlp("n", [2, 4, 1], "tanh")
        params = {k: torch.zeros(s, dtype=torch.float64) for k, s in net.param_shapes().items()}
        params["n.1.bias"] = torch.tensor([0.7], dtype=torch.float64)
        jv = forward_with_jet(params, net, torch.tensor([[0.3, -0.4]], dtype=torch.float64))
        assert jv.value.item() == 0.7
        assert torch.all(jv.d1 == 0) and torch.all(jv.d2 == 0)

    def test_linear_layer(self):
        net = Net((Layer("a", 2, 1),))
        params = {"a.weight": torch.tensor([[2.0, 3.0]], dtype=torch.float64),
                  "a.bias": torch.zeros(1, dtype=torch.float64)}
        jv = forward_with_jet(params, net, torch.tensor([[0.5, 0.25]], dtype=torch.float64))
        assert jv.d1.tolist() == [[2.0, 3.0]]
        assert jv.d2.tolist() == [[0.0, 0.0, 0.0]]
        assert jv.value.item() == 1.75

    @pytest.mark.parametrize("act", ["sin", "tanh", "relu"])
    def test_matches_finite_differences(self, act):
        rng = np.random.default_rng(11)
        net = mlp("n", [2, 6, 6, 1], act, omega=2.0)
        params = init(net, rng)
        x = rng.uniform(-1, 1, (5, 2))
        jv = forward_with_jet(params, net, torch.from_numpy(x)).data.numpy()
        f = scalar_fn(params, net)
        for i in range(5):
            want = fd_jet(f, x[i], h=1e-3)
            comps = slice(0, 3) if act == "relu" else slice(0, 6)
            assert relative_error(jv[i, comps], want[comps], floor=1e-3) < 1e-4

    def test_relu_second_derivative_zero(self):
        rng = np.random.default_rng(12)
        net = mlp("n", [2, 5, 1], "relu")
        jv = forward_with_jet(init(net, rng), net, torch.from_numpy(rng.uniform(-1, 1, (4, 2))))
        assert torch.all(jv.d2 == 0)

    def test_value_matches_plain_forward(self):
        rng = np.random.default_rng(13)
        net = mlp("n", [2, 8, 8, 1], "sin")
        params = init(net, rng)
        x = torch.from_numpy(rng.uniform(-1, 1, (2, 3, 2)))
        jv = forward_with_jet(params, net, x)
        assert jv.value.shape == (2, 3)
        torch.testing.assert_close(jv.value, net_forward(params, net, x)[..., 0],
                                   rtol=1e-12, atol=1e-12)

    def test_conditioning_vector(self):
        rng = np.random.default_rng(14)
        net = mlp("n", [5, 4, 1], "tanh")
        params = init(net, rng)
        z = torch.from_numpy(rng.normal(size=3))
        x = torch.from_numpy(rng.uniform(-1, 1, (6, 2)))
        jv = forward_with_jet(params, net, x, z)
        full = torch.cat([x, z.expand(6, 3)], dim=-1)
        torch.testing.assert_close(jv.value, net_forward(params, net, full)[..., 0])

    def test_nan_reports_layer(self):
        net = mlp("n", [2, 3, 1], "tanh")
        params = init(net, np.random.default_rng(0))
        params["n.1.weight"][0, 0] = float("nan")
        with pytest.raises(NumericError) as e:
            forward_with_jet(params, net, torch.zeros(1, 2, dtype=torch.float64))
        assert e.value.layer == 1


class TestParamGrad:
    def test_sum_of_squares(self):
        rng = np.random.default_rng(0)
        params = require_grad({"a": uniform_(rng, (3, 2), 1), "b": uniform_(rng, (4,), 1)})
        loss = sum((p * p).sum() for p in params.values())
        g = param_grad(loss, params)
        for k in params:
            torch.testing.assert_close(g[k], 2 * params[k].detach())

    def test_value_loss_matches_fd(self):
        rng = np.random.default_rng(1)
        net = mlp("n", [2, 4, 1], "tanh")
        params = init(net, rng)
        x = torch.tensor([[0.2, -0.3]], dtype=torch.float64)

        def loss(p):
            return (net_forward(p, net, x) ** 2).sum()

        live = require_grad(params)
        g = param_grad(loss(live), live)
        fd = fd_param_grad(lambda p: loss(p).item(), params)
        for k in params:
            assert relative_error(g[k], fd[k], floor=1e-6) < 1e-5

    def test_through_jet_matches_fd(self):
        rng = np.random.default_rng(2)
        net = mlp("n", [2, 4, 4, 1], "sin")
        params = init(net, rng)
        x = torch.from_numpy(rng.uniform(-1, 1, (3, 2)))

        def loss(p):
            return (forward_with_jet(p, net, x).data[..., 2] ** 2).sum()

        live = require_grad(params)
        g = param_grad(loss(live), live)
        fd = fd_param_grad(lambda p: loss(p).item(), params)
        for k in params:
            assert relative_error(g[k], fd[k], floor=1e-5) < 1e-4

    def test_unused_parameter_gets_zero(self):
        params = require_grad({"a": torch.ones(2, dtype=torch.float64),
                               "b": torch.ones(3, dtype=torch.float64)})
        g = param_grad(params["a"].sum(), params)
        assert torch.all(g["b"] == 0)

    def test_nonfinite_loss(self):
        p = require_grad({"a": torch.ones(1, dtype=torch.float64)})
        with pytest.raises(NumericError):
            param_grad((p["a"] * float("inf")).sum(), p)


def reference_adam(w, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1 ** t)
    vh = v / (1 - b2 ** t)
    return w - lr * mh / (math.sqrt(vh) + eps), m, v


class TestAdam:
    def test_zero_gradient(self):
        params = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
        st = AdamState.zeros_like(params)
        adam_step(params, {"w": torch.zeros(2, dtype=torch.float64)}, st, 1e-3)
        assert params["w"].tolist() == [1.0, -2.0]
        assert st.step == 1

    def test_first_step_is_sign(self):
        params = {"w": torch.zeros(3, dtype=torch.float64)}
        st = AdamState.zeros_like(params)
        g = torch.tensor([5.0, -0.01, 300.0], dtype=torch.float64)
        adam_step(params, {"w": g}, st, 1e-2)
        np.testing.assert_allclose(params["w"].numpy(), -1e-2 * np.sign(g.numpy()), rtol=1e-5)

    def test_matches_scalar_reference(self):
        w = {"w": torch.tensor([1.0], dtype=torch.float64)}
        st = AdamState.zeros_like(w)
        rw, m, v = 1.0, 0.0, 0.0
        for t in range(1, 201):
            g = 2 * w["w"]
            adam_step(w, {"w": g.clone()}, st, 1e-1)
            rw, m, v = reference_adam(rw, 2 * rw, m, v, t, 1e-1)
            assert w["w"].item() == pytest.approx(rw, rel=1e-12, abs=1e-15)
        assert abs(w["w"].item()) < 1e-2

    def test_rejects_bad_inputs(self):
        params = {"w": torch.zeros(2, dtype=torch.float64)}
        st = AdamState.zeros_like(params)
        with pytest.raises(ConfigError):
            adam_step(params, {"w": torch.zeros(2, dtype=torch.float64)}, st, 0.0)
        with pytest.raises(ConfigError):
            adam_step(params, {"w": torch.zeros(3, dtype=torch.float64)}, st, 1e-3)


class TestSchedule:
    @pytest.mark.parametrize("epoch,want", [(0, 1e-3), (4999, 1e-3), (5000, 5e-4),
                                            (12500, 2.5e-4)])
    def test_values(self, epoch, want):
        assert lr_schedule(epoch, 1e-3, 5000) == pytest.approx(want, rel=1e-15)

    def test_rejects(self):
        with pytest.raises(ConfigError):
            lr_schedule(-1, 1e-3, 10)
