"""Fairness-regularized training with worst-group equalized-odds margins.

The toolkit spans a tape-based autodiff engine, a multi-label MLP, the
hinge log-sum-exp margin losses, subgroup fairness metrics with Youden
operating-point selection, a synthetic biased-cohort generator, and a
multi-seed experiment harness (library API plus the ``fairmargin`` CLI).
"""

from .autodiff import (
    EmptyPoolError,
    ShapeMismatchError,
    Tape,
    Tensor,
    add,
    bce_with_logits,
    hinge,
    lse_max,
    lse_min,
    matmul,
    mean,
    mul,
    relu,
    scale,
    sigmoid,
    sigmoid_values,
    sub,
)
from .data import (
    AttributeSpec,
    Cohort,
    CohortConfig,
    CohortFormatError,
    batches,
    default_cohort_config,
    generate,
    load_csv,
    oracle_scores,
    save_csv,
    split,
)
from .fairloss import (
    BatchView,
    FairLossConfig,
    SubgroupCatalog,
    group_means,
    loss_parts,
    margin_eo_minus,
    margin_eo_plus,
    select_worst_groups,
    total_loss,
)
from .metrics import (
    DegenerateLabelsError,
    EvalReport,
    InsufficientGroupsError,
    OperatingPoint,
    PredictionSet,
    auc,
    build_report,
    eodds,
    eom,
    eom_from_rates,
    group_rates,
    select_operating_point,
    youden_threshold,
)
from .model import MlpConfig, MlpParams, forward, init_mlp, load_params, save_params
from .train import (
    Adam,
    RunResult,
    TrainConfig,
    TrainingDivergedError,
    run_ablation,
    run_experiment,
    train_model,
)

__version__ = "0.1.0"
