"""Symbolic cognitive diagnosis: interpretable interaction functions found
by genetic programming, with gradient-learned student/exercise parameters."""

from .dataset import (
    QMatrix,
    ResponseDataset,
    SyntheticGroundTruth,
    generate_synthetic,
    load_logs,
    load_qmatrix,
    split,
)
from .exprtree import (
    Bindings,
    ExprTree,
    Op,
    OperatorNode,
    TerminalKind,
    TerminalNode,
    ValueKind,
    evaluate,
    evaluate_batch,
    kind_check,
    parse,
    random_tree,
    serialize,
    to_infix,
    validate,
)
from .autodiff import (
    AdamState,
    ModelParams,
    PoConfig,
    adam_step,
    fit_params,
    init_params,
    loss_and_grads,
    monotonicity_audit,
    predict,
)
from .gp import GpConfig, Individual, crossover, evaluate_fitness, evolve, mutate, tournament_select
from .metrics import EvalReport, accuracy, auc, doa, evaluate_model, f1
from .trainer import (
    EsConfig,
    TrainConfig,
    TrainedModel,
    make_initial_tree,
    run_full,
    run_training,
    run_wo_adam,
    run_wo_gp,
)

__version__ = "0.1.0"
