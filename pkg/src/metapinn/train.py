"""Meta-training, finetuning, MAML adaptation and the single-problem PINN.

One meta-training iteration draws a mini-batch of problems (fresh from the
generator, or cycling through a fixed problem set), samples boundary and
interior points for each, and takes one Adam step on the batch mean of the
per-problem PINN errors. An epoch is ``problems_per_epoch // batch_size``
iterations; the learning rate halves every ``lr_half_every`` epochs.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .engine import AdamState, adam_step, as_tensor, lr_schedule, param_grad, require_grad
from .errors import ConfigError, NumericError
from .losses import bc_error, ge_error
from .model import METHODS, Model, ModelConfig
from .probgen import (DEFAULT_NG, PdeProblem, child_seed, gen_problem, read_problem_set,
                      sample_boundary, sample_interior)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30000
    problems_per_epoch: int = 9800
    batch_size: int = 512
    n_f: int = 50
    n_g: tuple = DEFAULT_NG
    lr0: float = 1e-3
    lr_half_every: int = 5000
    seed: int = 0
    method: str = "ours"
    fixed_problem_set: str | None = None
    maml_inner_lr: float = 1e-2
    maml_first_order: bool = False
    checkpoint_every: int = 0
    max_restarts: int = 3
    record_wall_time: bool = True

    def __post_init__(self):
        self.n_g = tuple(int(n) for n in self.n_g)
        if self.method not in METHODS or self.method == "pinn":
            raise ConfigError(f"meta-training method must be one of ours, np, mt, maml; "
                              f"got {self.method!r}")
        if len(self.n_g) != 3 or min(self.n_g) < 0 or sum(self.n_g) < 1:
            raise ConfigError(f"n_g must be three nonnegative counts, got {self.n_g}")
        if self.epochs < 0 or self.problems_per_epoch < 1 or self.batch_size < 1 or self.n_f < 1:
            raise ConfigError("epochs, problems_per_epoch, batch_size and n_f must be positive")
        if self.batch_size > self.problems_per_epoch:
            raise ConfigError("batch_size cannot exceed problems_per_epoch")
        if self.lr0 <= 0 or self.lr_half_every < 1:
            raise ConfigError("lr0 must be positive and lr_half_every >= 1")
        if self.maml_inner_lr < 0:
            raise ConfigError("maml_inner_lr must be nonnegative")

    @property
    def iters_per_epoch(self) -> int:
        return max(1, self.problems_per_epoch // self.batch_size)

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iters_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_g"] = list(self.n_g)
        return d


@dataclass
class FinetuneConfig:
    """Settings for per-problem optimization (finetuning and the plain PINN)."""

    epochs: int = 100
    n_f: int = 50
    n_g: tuple = DEFAULT_NG
    lr: float = 1e-3
    lr_half_every: int = 0
    seed: int = 0
    resample_each_epoch: bool = True
    record_wall_time: bool = True

    def __post_init__(self):
        self.n_g = tuple(int(n) for n in self.n_g)
        if self.epochs < 0 or self.n_f < 1 or self.lr <= 0 or self.lr_half_every < 0:
            raise ConfigError(f"invalid finetuning settings {self}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_half_every == 0:
            return self.lr
        return lr_schedule(epoch, self.lr, self.lr_half_every)


# --------------------------------------------------------------------------
# logs

LOG_FIELDS = ("epoch", "iter", "loss_total", "loss_ge", "loss_bc", "lr", "wall_ms")


@dataclass(frozen=True)
class LogRecord:
    epoch: int
    iter: int
    loss_total: float
    loss_ge: float
    loss_bc: float
    lr: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in LOG_FIELDS})


@dataclass
class TrainLog:
    """Per-iteration records; serialized as JSON lines with keys in
    ``LOG_FIELDS`` order."""

    records: list = field(default_factory=list)

    def append(self, rec: LogRecord):
        if self.records and (rec.epoch, rec.iter) <= (self.records[-1].epoch, self.records[-1].iter):
            raise ValueError("log keys must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def losses(self) -> np.ndarray:
        return np.array([r.loss_total for r in self.records])

    def dumps(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "TrainLog":
        out = cls()
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                out.append(LogRecord(*(d[k] for k in LOG_FIELDS)))
        return out

    @classmethod
    def read(cls, path) -> "TrainLog":
        return cls.loads(Path(path).read_text())


# --------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    seeds: list
    alpha: torch.Tensor      # (B, K)
    pairs: torch.Tensor      # (B, Ng, 3)
    bpts: torch.Tensor       # (B, Ng, 2)
    bvals: torch.Tensor      # (B, Ng)
    fpts: torch.Tensor       # (B, Nf, 2)

    def select(self, i: int) -> "Batch":
        sl = slice(i, i + 1)
        return Batch(self.seeds[sl], self.alpha[sl], self.pairs[sl], self.bpts[sl],
                     self.bvals[sl], self.fpts[sl])


def make_batch(problems: list[PdeProblem], rng: np.random.Generator, n_f: int,
               n_g=DEFAULT_NG) -> Batch:
    alphas, pairs, fpts = [], [], []
    for p in problems:
        bset = sample_boundary(p, rng, *n_g)
        pairs.append(bset.pairs())
        fpts.append(sample_interior(p, rng, n_f))
        alphas.append(p.alpha.alpha)
    pairs_t = as_tensor(np.stack(pairs))
    return Batch([p.seed for p in problems], as_tensor(np.stack(alphas)), pairs_t,
                 pairs_t[..., :2], pairs_t[..., 2], as_tensor(np.stack(fpts)))


def batch_losses(model: Model, params, batch: Batch):
    """Per-problem (ge, bc), each of shape ``(B,)``."""
    z = model.represent(params, batch.alpha, batch.pairs)
    pred = model.bind(params, z)
    cfg = model.config
    ge = ge_error(pred, batch.alpha, batch.fpts, C=cfg.C, basis=cfg.basis)
    bc = bc_error(pred, batch.bpts, batch.bvals)
    return ge, bc


def maml_adapt(params, model: Model, batch: Batch, inner_lr: float, *,
               create_graph: bool = False) -> dict:
    """One gradient-descent step on the batch's (single problem's) PINN loss."""
    if inner_lr == 0:
        return dict(params)
    ge, bc = batch_losses(model, params, batch)
    grads = param_grad((ge + bc).mean(), params, create_graph=create_graph)
    return {k: p - inner_lr * grads[k] for k, p in params.items()}


def maml_losses(model: Model, params, support: Batch, query: Batch, inner_lr: float,
                first_order: bool):
    """Outer (post-adaptation) losses for every problem of the batch."""
    ges, bcs = [], []
    for i in range(len(support.seeds)):
        if first_order:
            inner_params = require_grad(params)
            adapted = maml_adapt(inner_params, model, support.select(i), inner_lr)
            # first-order: treat adapted weights as params + constant offset
            adapted = {k: params[k] + (adapted[k] - inner_params[k]).detach() for k in params}
        else:
            adapted = maml_adapt(params, model, support.select(i), inner_lr, create_graph=True)
        ge, bc = batch_losses(model, adapted, query.select(i))
        ges.append(ge)
        bcs.append(bc)
    return torch.cat(ges), torch.cat(bcs)


# --------------------------------------------------------------------------
# meta-training

class MetaTrainer:
    """Stateful, resumable meta-training driver."""

    def __init__(self, config: TrainConfig, model_config: ModelConfig = ModelConfig(), *,
                 out_dir=None, problems: list[PdeProblem] | None = None):
        self.config = config
        self.model = Model(model_config, config.method)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if problems is None and config.fixed_problem_set:
            problems = read_problem_set(config.fixed_problem_set, model_config.C,
                                        model_config.basis)
        if problems is not None and not problems:
            raise ConfigError("fixed problem set is empty")
        self.problems = problems
        seq = np.random.SeedSequence(config.seed)
        init_seq, data_seq = seq.spawn(2)
        self.params = self.model.init_params(np.random.Generator(np.random.PCG64(init_seq)))
        self.rng = np.random.Generator(np.random.PCG64(data_seq))
        self.adam = AdamState.zeros_like(self.params, config.lr0)
        self.iteration = 0
        self.cursor = 0
        self.lr_scale = 1.0
        self.restarts = 0
        self.log = TrainLog()
        self.last_checkpoint: Path | None = None
        self._snapshot = self._take_snapshot()

    # state ------------------------------------------------------------
    def state(self) -> CheckpointState:
        return CheckpointState(
            method=self.config.method, model_config=self.model.config,
            config=self.config.to_dict(), adam=self.adam,
            rng_state=self.rng.bit_generator.state,
            counters={"iteration": self.iteration, "cursor": self.cursor,
                      "lr_scale": self.lr_scale, "restarts": self.restarts},
        )

    def save(self, path) -> Path:
        return save_checkpoint(path, self.params, self.state())

    @classmethod
    def resume(cls, path, *, out_dir=None, problems=None, log: TrainLog | None = None,
               **overrides) -> "MetaTrainer":
        params, st = load_checkpoint(path)
        cfg = dict(st.config)
        cfg.update(overrides)
        trainer = cls(TrainConfig(**cfg), st.model_config, out_dir=out_dir, problems=problems)
        trainer.params = params
        if st.adam is not None:
            trainer.adam = st.adam
        if st.rng_state is not None:
            trainer.rng.bit_generator.state = st.rng_state
        c = st.counters
        trainer.iteration = int(c.get("iteration", 0))
        trainer.cursor = int(c.get("cursor", 0))
        trainer.lr_scale = float(c.get("lr_scale", 1.0))
        trainer.restarts = int(c.get("restarts", 0))
        if log is not None:
            trainer.log = TrainLog(list(log.records[:trainer.iteration]))
        trainer.last_checkpoint = Path(path)
        trainer._snapshot = trainer._take_snapshot()
        return trainer

    def _take_snapshot(self):
        return (copy.deepcopy(self.params), copy.deepcopy(self.adam),
                copy.deepcopy(self.rng.bit_generator.state), self.iteration, self.cursor,
                len(self.log))

    def _restore_snapshot(self):
        params, adam, rng_state, it, cursor, n_log = copy.deepcopy(self._snapshot)
        self.params, self.adam = params, adam
        self.rng.bit_generator.state = rng_state
        self.iteration, self.cursor = it, cursor
        del self.log.records[n_log:]

    # loop -------------------------------------------------------------
    def current_lr(self) -> float:
        epoch = self.iteration // self.config.iters_per_epoch
        return lr_schedule(epoch, self.config.lr0, self.config.lr_half_every) * self.lr_scale

    def draw_problems(self) -> list[PdeProblem]:
        B = self.config.batch_size
        if self.problems is None:
            return [gen_problem(child_seed(self.rng), C=self.model.config.C,
                                basis=self.model.config.basis) for _ in range(B)]
        out = []
        for _ in range(B):
            out.append(self.problems[self.cursor])
            self.cursor = (self.cursor + 1) % len(self.problems)
        return out

    def loss(self, problems: list[PdeProblem]):
        cfg = self.config
        batch = make_batch(problems, self.rng, cfg.n_f, cfg.n_g)
        params = require_grad(self.params)
        if cfg.method == "maml":
            query = make_batch(problems, self.rng, cfg.n_f, cfg.n_g)
            ge, bc = maml_losses(self.model, params, batch, query, cfg.maml_inner_lr,
                                 cfg.maml_first_order)
        else:
            ge, bc = batch_losses(self.model, params, batch)
        return params, ge, bc

    def step(self) -> LogRecord:
        t0 = time.perf_counter()
        lr = self.current_lr()
        problems = self.draw_problems()
        params, ge, bc = self.loss(problems)
        total = (ge + bc).mean()
        grads = param_grad(total, params)
        for k, g in grads.items():
            if not bool(torch.isfinite(g).all()):
                raise NumericError(f"non-finite gradient for {k}")
        adam_step(self.params, grads, self.adam, lr)
        self.last_seeds = [p.seed for p in problems]
        epoch, it = divmod(self.iteration, self.config.iters_per_epoch)
        wall = (time.perf_counter() - t0) * 1e3 if self.config.record_wall_time else 0.0
        rec = LogRecord(epoch, it, float(total.detach()), float(ge.detach().mean()), float(bc.detach().mean()), lr, wall)
        self.log.append(rec)
        self.iteration += 1
        return rec

    def run(self, n_iters: int | None = None,
            on_step: Callable[["MetaTrainer", LogRecord], None] | None = None) -> TrainLog:
        """Run until ``n_iters`` more iterations are done (default: to the end
        of the configured epochs), handling divergence by rollback."""
        stop = self.config.total_iterations if n_iters is None else self.iteration + n_iters
        every = self.config.checkpoint_every
        log_path = self.out_dir / "trainlog.jsonl" if self.out_dir else None
        while self.iteration < stop:
            try:
                rec = self.step()
            except NumericError as exc:
                self._diverged(exc)
                continue
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(rec.to_json() + "\n")
            if on_step is not None:
                on_step(self, rec)
            if every and self.iteration % every == 0:
                self._snapshot = self._take_snapshot()
                if self.out_dir is not None:
                    self.last_checkpoint = self.save(self.out_dir / f"ckpt_{self.iteration:08d}.ckpt")
        return self.log

    def _diverged(self, exc: NumericError):
        self.restarts += 1
        if self.restarts > self.config.max_restarts:
            where = f"; last good checkpoint: {self.last_checkpoint}" if self.last_checkpoint else ""
            raise NumericError(f"training diverged at iteration {self.iteration} "
                               f"after {self.config.max_restarts} restarts: {exc}{where}",
                               checkpoint=self.last_checkpoint) from exc
        log.warning("non-finite loss at iteration %d (%s); halving lr and rolling back",
                    self.iteration, exc)
        self._restore_snapshot()
        self.lr_scale *= 0.5
        if self.log_path_exists():
            self._rewrite_log()

    def log_path_exists(self) -> bool:
        return self.out_dir is not None and (self.out_dir / "trainlog.jsonl").exists()

    def _rewrite_log(self):
        self.log.write(self.out_dir / "trainlog.jsonl")


def meta_train(config: TrainConfig, model_config: ModelConfig = ModelConfig(), *,
               out_dir=None, problems=None):
    """Train from scratch; returns ``(params, log)``."""
    if config.method == "maml" and not config.maml_first_order:
        log.warning("second-order MAML keeps the inner-step graph in memory")
    trainer = MetaTrainer(config, model_config, out_dir=out_dir, problems=problems)
    trainer.run()
    return trainer.params, trainer.log


# --------------------------------------------------------------------------
# per-problem optimization

def _problem_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def finetune(params, model: Model, problem: PdeProblem, config: FinetuneConfig = FinetuneConfig(),
             callback: Callable | None = None):
    """Optimize the solution network and the representation z on one problem,
    keeping every encoder parameter fixed.

    Returns ``(theta_u, z, log)``; ``z`` is ``None`` for methods without a
    representation. ``callback(epoch, theta_u, z)`` runs before the first
    update (epoch 0) and after every update.
    """
    rng = _problem_rng(config.seed)
    bset = sample_boundary(problem, rng, *config.n_g)
    pts = sample_interior(problem, rng, config.n_f)
    frozen = {k: params[k].detach() for k in model.encoder_param_names()}
    with torch.no_grad():
        z = model.represent(frozen, problem.alpha, bset)
    theta = {k: params[k].detach().clone() for k in model.solution_param_names()}
    trainable = dict(theta)
    if z is not None:
        trainable["z"] = z.detach().clone()
    adam = AdamState.zeros_like(trainable, config.lr)
    out_log = TrainLog()
    if callback is not None:
        callback(0, _split(trainable)[0], _split(trainable)[1])
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if config.resample_each_epoch and epoch > 0:
            bset = sample_boundary(problem, rng, *config.n_g)
            pts = sample_interior(problem, rng, config.n_f)
        live = require_grad(trainable)
        theta_u, z_live = _split(live)
        pred = model.bind(theta_u, z_live)
        ge = ge_error(pred, problem.alpha, pts)
        bc = bc_error(pred, bset)
        total = ge + bc
        grads = param_grad(total, live)
        lr = config.lr_at(epoch)
        adam_step(trainable, grads, adam, lr)
        wall = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else 0.0
        out_log.append(LogRecord(epoch, 0, float(total.detach()), float(ge.detach()), float(bc.detach()), lr, wall))
        if callback is not None:
            theta_u, z_now = _split(trainable)
            callback(epoch + 1, theta_u, z_now)
    theta_u, z_final = _split(trainable)
    return theta_u, z_final, out_log


def _split(trainable: dict):
    theta = {k: v for k, v in trainable.items() if k != "z"}
    return theta, trainable.get("z")


def train_reference_pinn(problem: PdeProblem, config: FinetuneConfig = FinetuneConfig(),
                         model_config: ModelConfig = ModelConfig(), *,
                         callback: Callable | None = None):
    """Plain PINN: the shared-only architecture trained from a random
    initialization on one problem. Returns ``(params, log)``."""
    model = Model(model_config, "pinn")
    seq = np.random.SeedSequence(config.seed)
    init_seq, data_seq = seq.spawn(2)
    params = model.init_params(np.random.Generator(np.random.PCG64(init_seq)))
    rng = np.random.Generator(np.random.PCG64(data_seq))
    adam = AdamState.zeros_like(params, config.lr)
    out_log = TrainLog()
    bset = sample_boundary(problem, rng, *config.n_g)
    pts = sample_interior(problem, rng, config.n_f)
    if callback is not None:
        callback(0, params)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if config.resample_each_epoch and epoch > 0:
            bset = sample_boundary(problem, rng, *config.n_g)
            pts = sample_interior(problem, rng, config.n_f)
        live = require_grad(params)
        pred = model.bind(live)
        ge = ge_error(pred, problem.alpha, pts)
        bc = bc_error(pred, bset)
        total = ge + bc
        grads = param_grad(total, live)
        lr = config.lr_at(epoch)
        adam_step(params, grads, adam, lr)
        wall = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else 0.0
        out_log.append(LogRecord(epoch, 0, float(total.detach()), float(ge.detach()), float(bc.detach()), lr, wall))
        if callback is not None:
            callback(epoch + 1, params)
    return params, out_log


__all__ = [
    "Batch", "FinetuneConfig", "LogRecord", "MetaTrainer", "TrainConfig", "TrainLog",
    "batch_losses", "finetune", "make_batch", "maml_adapt", "maml_losses", "meta_train",
    "train_reference_pinn",
]

