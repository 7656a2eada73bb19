"""Command-line front end.

Commands::

    metapinn metatrain   --config cfg.json --method ours --out runs/a
    metapinn metatrain   --resume runs/a/ckpt_00001000.ckpt --out runs/b
    metapinn gen-problems --n 100 --seed 7 --out test.csv
    metapinn eval        --ckpt runs/a/final.ckpt --problems test.csv --out runs/a/eval
    metapinn predict     --ckpt runs/a/final.ckpt --pde "u_t + u*u_x - 0.1*u_xx" --ic 0.3,-0.2,0.5 --out p
    metapinn finetune    --ckpt runs/a/final.ckpt --pde ... --ic ... --epochs 200 --out f

Config files are flat JSON objects. Settings resolve as command-line flag,
then config file, then built-in default; unknown keys are rejected and the
merged settings are written to ``<out>/config.json``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigError, DomainError, NumericError, ParseError
from .evalio import evaluate, evaluate_problem, export_grid, load_checkpoint, save_checkpoint
from .model import Model, ModelConfig
from .pdealg import parse_pde
from .probgen import (DEFAULT_NG, IcParams, make_problem, read_problem_set, gen_problem_set,
                      write_problem_set)
from .train import FinetuneConfig, MetaTrainer, TrainConfig, TrainLog, finetune

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
THREADS_ENV = "METAPINN_THREADS"

log = logging.getLogger("metapinn")

TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]
MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig)]
FINETUNE_KEYS = [f.name for f in dataclasses.fields(FinetuneConfig)] + ["eval_n_f"]


# --------------------------------------------------------------------------
# settings

def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def merge_settings(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """defaults < config file < flags (``None`` flags are unset)."""
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(defaults)
    out.update(file_cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _defaults(cls, **extra) -> dict:
    d = {f.name: f.default for f in dataclasses.fields(cls)}
    d.update(extra)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _pick(settings: dict, keys) -> dict:
    return {k: settings[k] for k in keys if k in settings}


def _echo(out: Path, settings: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(settings, indent=2, sort_keys=True) + "\n")


def _parse_ng(text: str | None):
    if text is None:
        return None
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError(f"--ng expects three integers like 50,25,25, got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"--ng expects three integers like 50,25,25, got {text!r}")
    return parts


def _parse_ic(text: str) -> IcParams:
    try:
        vals = [float(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError(f"--ic expects three numbers like 0.3,-0.2,0.5, got {text!r}") from None
    if len(vals) != 3:
        raise ConfigError(f"--ic expects three numbers like 0.3,-0.2,0.5, got {text!r}")
    if any(not -1.0 <= v <= 1.0 for v in vals):
        raise DomainError(f"initial-condition coefficients must lie in [-1, 1], got {vals}")
    return IcParams(*vals)


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        nt, nx = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--grid expects NTxNX like 100x100, got {text!r}") from None
    return nt, nx


def _problem_from_flags(args, mcfg: ModelConfig):
    alpha = parse_pde(args.pde, mcfg.basis, mcfg.C)
    return make_problem(alpha, _parse_ic(args.ic), seed=0)


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    torch.set_num_threads(n)


# --------------------------------------------------------------------------
# commands

def _resume(args) -> int:
    """Continue a run from a checkpoint; only ``--epochs`` may be overridden."""
    ckpt = Path(args.resume)
    out = Path(args.out)
    prior = ckpt.parent / "trainlog.jsonl"
    log = TrainLog.read(prior) if prior.exists() else None
    overrides = {} if args.epochs is None else {"epochs": args.epochs}
    trainer = MetaTrainer.resume(ckpt, out_dir=out, log=log, **overrides)
    _echo(out, {**trainer.config.to_dict(), **trainer.model.config.to_dict(),
                "resumed_from": str(ckpt)})
    trainer.log.write(out / "trainlog.jsonl")
    return _finish(trainer, out)


def _finish(trainer: MetaTrainer, out: Path) -> int:
    trainer.run()
    final = trainer.save(out / "final.ckpt")
    tail = trainer.log.records[-1].loss_total if len(trainer.log) else float("nan")
    print(f"trained {trainer.iteration} iterations; last loss {tail:.6g}; checkpoint {final}")
    return 0


def cmd_metatrain(args) -> int:
    if args.resume:
        return _resume(args)
    defaults = {**_defaults(TrainConfig), **_defaults(ModelConfig)}
    flags = {"method": args.method, "epochs": args.epochs, "seed": args.seed,
             "fixed_problem_set": args.fixed_problems, "batch_size": args.batch_size,
             "problems_per_epoch": args.problems_per_epoch, "checkpoint_every": args.checkpoint_every,
             "width": args.width, "n_f": args.nf, "n_g": _parse_ng(args.ng)}
    settings = merge_settings(defaults, _read_config(args.config), flags)
    tcfg = TrainConfig(**_pick(settings, TRAIN_KEYS))
    mcfg = ModelConfig(**_pick(settings, MODEL_KEYS))
    out = Path(args.out)
    _echo(out, settings)
    (out / "trainlog.jsonl").write_text("")
    return _finish(MetaTrainer(tcfg, mcfg, out_dir=out), out)


def cmd_gen_problems(args) -> int:
    if args.n < 0:
        raise ConfigError("--n must be nonnegative")
    problems = gen_problem_set(args.n, args.seed)
    write_problem_set(args.out, problems)
    print(f"wrote {len(problems)} problems to {args.out}")
    return 0


def _load_model(path):
    params, st = load_checkpoint(path)
    return params, Model(st.model_config, st.method), st


def cmd_eval(args) -> int:
    defaults = {"n_f": 10000, "n_g": list(DEFAULT_NG), "seed": 0, "maml_inner_lr": None}
    flags = {"n_f": args.nf, "n_g": _parse_ng(args.ng), "seed": args.seed,
             "maml_inner_lr": args.maml_inner_lr}
    settings = merge_settings(defaults, _read_config(args.config), flags)
    params, model, st = _load_model(args.ckpt)
    if settings["maml_inner_lr"] is None:
        settings["maml_inner_lr"] = st.config.get("maml_inner_lr", 1e-2)
    problems = read_problem_set(args.problems, model.config.C, model.config.basis)
    out = Path(args.out)
    _echo(out, {**settings, "ckpt": str(args.ckpt), "problems": str(args.problems)})
    report = evaluate(params, model, problems, settings["n_f"], tuple(settings["n_g"]),
                      settings["seed"], maml_inner_lr=settings["maml_inner_lr"])
    report.write(out)
    print(report.to_text(), end="")
    return 0


def cmd_predict(args) -> int:
    nt, nx = _parse_grid(args.grid)
    params, model, _ = _load_model(args.ckpt)
    problem = _problem_from_flags(args, model.config)
    out = Path(args.out)
    _echo(out, {"ckpt": str(args.ckpt), "pde": args.pde, "ic": args.ic, "grid": [nt, nx],
                "seed": args.seed})
    t0 = time.perf_counter()
    export_grid(params, model, problem, nt, nx, out / "grid.csv", pgm_path=out / "heatmap.pgm",
                seed=args.seed)
    wall = time.perf_counter() - t0
    print(f"prediction wall time: {wall:.3f} s")
    return 0


def cmd_finetune(args) -> int:
    defaults = _defaults(FinetuneConfig, eval_n_f=1000)
    flags = {"epochs": args.epochs, "seed": args.seed, "lr": args.lr, "n_f": args.nf,
             "n_g": _parse_ng(args.ng), "eval_n_f": args.eval_nf}
    settings = merge_settings(defaults, _read_config(args.config), flags)
    fcfg = FinetuneConfig(**_pick(settings, FINETUNE_KEYS[:-1]))
    params, model, st = _load_model(args.ckpt)
    problem = _problem_from_flags(args, model.config)
    out = Path(args.out)
    _echo(out, {**settings, "ckpt": str(args.ckpt), "pde": args.pde, "ic": args.ic})

    # the curve is scored on one fixed sample so epochs are comparable
    rows = []

    def score(epoch, theta_u, z):
        merged = {**params, **{k: v.detach() for k, v in theta_u.items()}}
        rng = np.random.default_rng([fcfg.seed, 1])
        r = evaluate_problem(merged, model, problem, rng, n_f=settings["eval_n_f"],
                             n_g=fcfg.n_g, maml_inner_lr=0.0,
                             z=None if z is None else z.detach())
        rows.append((epoch, r.total, r.ge, r.bc))

    theta_u, z, flog = finetune(params, model, problem, fcfg, callback=score)
    with open(out / "curve.csv", "w") as fh:
        fh.write("epoch,total,ge,bc\n")
        for e, total, ge, bc in rows:
            fh.write(f"{e},{total!r},{ge!r},{bc!r}\n")
    flog.write(out / "finetune_log.jsonl")
    tuned = {**params, **{k: v.detach() for k, v in theta_u.items()}}
    st.extra = {"finetuned": True, "z": None if z is None else z.detach().tolist()}
    save_checkpoint(out / "finetuned.ckpt", tuned, st)
    print(f"zero-shot PINN error {rows[0][1]:.6g}; after {fcfg.epochs} epochs {rows[-1][1]:.6g}")
    return 0


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metapinn", description="Meta-learned PINN solver.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"torch intra-op threads (default: ${THREADS_ENV} or torch's choice)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("metatrain", help="meta-train a model")
    s.add_argument("--config")
    s.add_argument("--method", choices=["ours", "np", "mt", "maml"])
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--fixed-problems")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--problems-per-epoch", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--nf", type=int)
    s.add_argument("--ng")
    s.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    s.set_defaults(func=cmd_metatrain)

    s = sub.add_parser("gen-problems", help="write a random problem set")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_problems)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a problem set")
    s.add_argument("--config")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--problems", required=True)
    s.add_argument("--nf", type=int)
    s.add_argument("--ng")
    s.add_argument("--seed", type=int)
    s.add_argument("--maml-inner-lr", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    for name, func, text in (("predict", cmd_predict, "zero-shot prediction on a grid"),
                             ("finetune", cmd_finetune, "finetune on one problem")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--pde", required=True)
        s.add_argument("--ic", required=True)
        s.add_argument("--out", required=True)
        if name == "predict":
            s.add_argument("--grid", default="100x100")
            s.add_argument("--seed", type=int, default=0)
        else:
            s.add_argument("--config")
            s.add_argument("--epochs", type=int)
            s.add_argument("--seed", type=int)
            s.add_argument("--lr", type=float)
            s.add_argument("--nf", type=int)
            s.add_argument("--ng")
            s.add_argument("--eval-nf", type=int)
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc.pretty()}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DomainError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
