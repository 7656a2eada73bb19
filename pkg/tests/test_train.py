import numpy as np
import pytest
import torch

from metapinn.engine import param_grad, require_grad
from metapinn.errors import ConfigError, NumericError
from metapinn.evalio import evaluate_problem
from metapinn.model import Model, ModelConfig
from metapinn.pdealg import parse_pde
from metapinn.probgen import gen_problem, gen_problem_set, make_problem, write_problem_set
from metapinn.train import (FinetuneConfig, MetaTrainer, TrainConfig, TrainLog, batch_losses,
                            finetune, make_batch, maml_adapt, maml_losses, meta_train,
                            train_reference_pinn)

SMALL = ModelConfig(width=16, layers_b=2, layers_u=3)


def tcfg(**kw):
    base = dict(epochs=4, problems_per_epoch=4, batch_size=4, n_f=10, n_g=(6, 3, 3), seed=3,
                record_wall_time=False)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_iterations(self):
        cfg = TrainConfig()
        assert cfg.iters_per_epoch == 19 and cfg.total_iterations == 30000 * 19

    @pytest.mark.parametrize("kw", [{"method": "pinn"}, {"n_g": (1, 2)}, {"lr0": 0.0},
                                    {"batch_size": 10, "problems_per_epoch": 5}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            tcfg(**kw)


class TestMetaTrain:
    def test_zero_epochs_returns_init(self):
        params, log = meta_train(tcfg(epochs=0), SMALL)
        init = Model(SMALL).init_params(
            np.random.Generator(np.random.PCG64(np.random.SeedSequence(3).spawn(2)[0])))
        assert len(log) == 0
        assert all(torch.equal(params[k], init[k]) for k in init)

    def test_log_keys_and_lr(self):
        cfg = tcfg(epochs=6, problems_per_epoch=8, lr_half_every=2)
        _, log = meta_train(cfg, SMALL)
        assert [(r.epoch, r.iter) for r in log][:3] == [(0, 0), (0, 1), (1, 0)]
        assert [r.lr for r in log if r.iter == 0] == [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4]
        assert all(abs(r.loss_total - r.loss_ge - r.loss_bc) < 1e-12 for r in log)

    def test_log_text_round_trip(self):
        _, log = meta_train(tcfg(), SMALL)
        again = TrainLog.loads(log.dumps())
        assert again.dumps() == log.dumps()

    def test_same_seed_identical(self):
        a, la = meta_train(tcfg(), SMALL)
        b, lb = meta_train(tcfg(), SMALL)
        assert la.dumps() == lb.dumps()
        assert all(torch.equal(a[k], b[k]) for k in a)

    @pytest.mark.parametrize("method", ["np", "mt", "maml"])
    def test_baselines_run(self, method):
        params, log = meta_train(tcfg(method=method, maml_first_order=method == "maml"), SMALL)
        assert len(log) == 4 and np.all(np.isfinite(log.losses()))

    def test_fixed_problem_set_cycles(self, tmp_path):
        probs = gen_problem_set(6, 1)
        path = tmp_path / "set.csv"
        write_problem_set(path, probs)
        trainer = MetaTrainer(tcfg(fixed_problem_set=str(path)), SMALL)
        seen = []
        trainer.run(3, on_step=lambda t, r: seen.extend(t.last_seeds))
        assert seen == [p.seed for p in probs] * 2

    def test_fresh_problems_differ(self):
        trainer = MetaTrainer(tcfg(), SMALL)
        seen = []
        trainer.run(2, on_step=lambda t, r: seen.extend(t.last_seeds))
        assert len(set(seen)) == 8

    def test_resume_equals_straight_run(self, tmp_path):
        straight = MetaTrainer(tcfg(epochs=6), SMALL)
        straight.run()
        first = MetaTrainer(tcfg(epochs=6), SMALL, out_dir=tmp_path)
        first.run(3)
        first.save(tmp_path / "mid.ckpt")
        resumed = MetaTrainer.resume(tmp_path / "mid.ckpt", log=first.log)
        resumed.run()
        assert resumed.log.dumps() == straight.log.dumps()
        assert all(torch.equal(resumed.params[k], straight.params[k]) for k in straight.params)

    def test_periodic_checkpoints(self, tmp_path):
        trainer = MetaTrainer(tcfg(checkpoint_every=2), SMALL, out_dir=tmp_path)
        trainer.run()
        names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
        assert names == ["ckpt_00000002.ckpt", "ckpt_00000004.ckpt"]
        assert len(TrainLog.read(tmp_path / "trainlog.jsonl")) == 4

    def test_divergence_rolls_back_and_halves_lr(self, monkeypatch):
        trainer = MetaTrainer(tcfg(), SMALL)
        real = MetaTrainer.loss
        calls = {"n": 0}

        def flaky(self, problems):
            calls["n"] += 1
            if calls["n"] == 2:
                raise NumericError("injected")
            return real(self, problems)

        monkeypatch.setattr(MetaTrainer, "loss", flaky)
        trainer.run()
        assert trainer.restarts == 1 and trainer.lr_scale == 0.5
        assert len(trainer.log) == 4 and trainer.log.records[0].lr == 5e-4

    def test_divergence_gives_up(self, monkeypatch):
        trainer = MetaTrainer(tcfg(max_restarts=2), SMALL)

        def broken(self, problems):
            raise NumericError("always")

        monkeypatch.setattr(MetaTrainer, "loss", broken)
        with pytest.raises(NumericError, match="after 2 restarts"):
            trainer.run()

    def test_smoke_loss_decreases(self):
        cfg = TrainConfig(epochs=200, problems_per_epoch=32, batch_size=32, seed=0,
                          record_wall_time=False)
        _, log = meta_train(cfg, ModelConfig(width=32))
        losses = log.losses()
        assert losses[-20:].mean() < losses[:20].mean()


class TestMaml:
    def setup_method(self):
        self.model = Model(SMALL, "maml")
        self.params = self.model.init_params(np.random.default_rng(0))

    def test_zero_inner_lr_is_identity(self):
        batch = make_batch([gen_problem(1)], np.random.default_rng(0), 10)
        adapted = maml_adapt(self.params, self.model, batch, 0.0)
        assert all(adapted[k] is self.params[k] for k in self.params)

    def test_descent_on_average(self):
        rng = np.random.default_rng(1)
        before, after = [], []
        for i in range(20):
            batch = make_batch([gen_problem(100 + i)], rng, 20)
            live = require_grad(self.params)
            ge, bc = batch_losses(self.model, live, batch)
            adapted = maml_adapt(live, self.model, batch, 1e-3)
            ge2, bc2 = batch_losses(self.model, adapted, batch)
            before.append(float((ge + bc).detach()))
            after.append(float((ge2 + bc2).detach()))
        assert np.mean(after) <= np.mean(before)

    def test_first_and_second_order_differ(self):
        rng = np.random.default_rng(2)
        probs = [gen_problem(5), gen_problem(6)]
        support = make_batch(probs, rng, 10)
        query = make_batch(probs, rng, 10)
        grads = []
        for first in (True, False):
            live = require_grad(self.params)
            ge, bc = maml_losses(self.model, live, support, query, 0.1, first)
            grads.append(param_grad((ge + bc).mean(), live))
        diff = max(float((grads[0][k] - grads[1][k]).abs().max()) for k in grads[0])
        assert diff > 1e-8


def heat():
    return make_problem(parse_pde("u_t - 0.1*u_xx"), (0.0, 0.0, 1.0), seed=0)


class TestFinetune:
    def setup_method(self):
        self.model = Model(SMALL, "ours")
        self.params = self.model.init_params(np.random.default_rng(0))
        self.problem = gen_problem(77)

    def test_zero_epochs(self):
        from metapinn.probgen import sample_boundary
        theta, z, log = finetune(self.params, self.model, self.problem, FinetuneConfig(epochs=0))
        bset = sample_boundary(self.problem, np.random.default_rng(0))
        assert torch.equal(z, self.model.represent(self.params, self.problem.alpha, bset))
        assert all(torch.equal(theta[k], self.params[k]) for k in theta)
        assert set(theta) == set(self.model.solution_param_names()) and len(log) == 0

    def test_encoders_untouched(self):
        before = {k: self.params[k].clone() for k in self.model.encoder_param_names()}
        finetune(self.params, self.model, self.problem, FinetuneConfig(epochs=5))
        assert all(torch.equal(before[k], self.params[k]) for k in before)

    def test_improves_error(self):
        cfg = FinetuneConfig(epochs=100, record_wall_time=False)
        rng = lambda: np.random.default_rng(5)
        zero = evaluate_problem(self.params, self.model, self.problem, rng(), n_f=2000)
        theta, z, _ = finetune(self.params, self.model, self.problem, cfg)
        tuned = evaluate_problem({**self.params, **theta}, self.model, self.problem, rng(),
                                 n_f=2000, z=z)
        assert tuned.total < zero.total

    def test_callback_schedule(self):
        seen = []
        finetune(self.params, self.model, self.problem, FinetuneConfig(epochs=3),
                 callback=lambda e, th, z: seen.append(e))
        assert seen == [0, 1, 2, 3]

    def test_mt_has_no_z(self):
        model = Model(SMALL, "mt")
        params = model.init_params(np.random.default_rng(0))
        theta, z, _ = finetune(params, model, self.problem, FinetuneConfig(epochs=2))
        assert z is None


class TestReferencePinn:
    def test_zero_steps_is_init(self):
        params, log = train_reference_pinn(heat(), FinetuneConfig(epochs=0), SMALL)
        init = Model(SMALL, "pinn").init_params(
            np.random.Generator(np.random.PCG64(np.random.SeedSequence(0).spawn(2)[0])))
        assert len(log) == 0 and all(torch.equal(params[k], init[k]) for k in init)

    def test_moving_average_non_increasing(self):
        cfg = FinetuneConfig(epochs=400, n_f=64, record_wall_time=False)
        _, log = train_reference_pinn(heat(), cfg, ModelConfig(width=32))
        windows = log.losses().reshape(4, 100).mean(axis=1)
        assert np.all(np.diff(windows) <= 0)
