"""Multi-branch adversarial self-distillation on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, detach, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, augment, load_cifar_binary, load_dataset, load_idx, synth_blobs
from .errors import BranchDistillError, ConfigError, ContractError, DataError, NumericFault, ShapeError
from .losses import (
    LossWeights,
    loss_ce,
    loss_discriminator_wgangp,
    loss_generator_w,
    loss_kd_total,
    loss_kl_pairwise,
    loss_l2_simmaps,
    loss_sd_total,
    real_mix,
    similarity_map,
)
from .nn import (
    build_branched_classifier,
    build_discriminator,
    count_params_flops,
    discriminator_forward,
    discriminator_input_grad,
    extract_single,
    forward_all,
    resolve_arch,
)
from .train import (
    SGD,
    RunReport,
    TrainConfig,
    cosine_lr,
    evaluate,
    sgd_step,
    train_run,
    train_step,
    train_teacher_student,
)
