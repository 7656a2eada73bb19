"""Meta-learned physics-informed solver for parametric 2-D PDEs.

A boundary-set encoder and an equation encoder map a problem (PDE
coefficient vector plus boundary data) to a representation that conditions
a shared solution network, so new problems are solved by one forward pass
and can optionally be finetuned.
"""

from .errors import (CheckpointCorruptError, CheckpointError, CheckpointShapeError,
                     CheckpointTruncatedError, CheckpointVersionError, ConfigError, DomainError,
                     MetaPinnError, NumericError, ParseError)
from .evalio import (EvalReport, evaluate, evaluate_problem, export_grid, load_checkpoint,
                     save_checkpoint)
from .losses import PinnError, bc_error, ge_error, pinn_error
from .model import METHODS, Model, ModelConfig
from .pdealg import (CoeffVector, DerivBasis, enumerate_monomials, n_monomials, parse_pde,
                     print_pde)
from .probgen import (BoundarySet, DomainBox, IcParams, PdeProblem, gen_problem, gen_problem_set,
                      make_problem, sample_boundary, sample_interior)
from .train import (FinetuneConfig, MetaTrainer, TrainConfig, TrainLog, finetune, meta_train,
                    train_reference_pinn)

__version__ = "0.1.0"

__all__ = [
    "BoundarySet", "CheckpointCorruptError", "CheckpointError", "CheckpointShapeError",
    "CheckpointTruncatedError", "CheckpointVersionError", "CoeffVector", "ConfigError",
    "DerivBasis", "DomainBox", "DomainError", "EvalReport", "FinetuneConfig", "IcParams",
    "METHODS", "MetaPinnError", "MetaTrainer", "Model", "ModelConfig", "NumericError",
    "ParseError", "PdeProblem", "PinnError", "TrainConfig", "TrainLog", "bc_error",
    "enumerate_monomials", "evaluate", "evaluate_problem", "export_grid", "finetune", "ge_error", "gen_problem",
    "gen_problem_set", "load_checkpoint", "make_problem", "meta_train", "n_monomials",
    "parse_pde", "pinn_error", "print_pde", "sample_boundary", "sample_interior",
    "save_checkpoint", "train_reference_pinn",
]
