"""Randomised-step-size PGD (WITCHcraft) and baseline l-infinity attacks on a
small numpy network core."""

from .attacks import (
    AttackConfig,
    AttackResult,
    PerturbationBudget,
    fgsm,
    multi_targeted,
    pgd,
    pgd_restarts,
    project,
    run_attack,
    sample_init,
    sample_step_field,
    targeted_step,
    witchcraft,
)
from .data import LabeledDataset, load_idx_images, load_idx_labels, load_mnist, normalize, synthetic_blobs
from .models import (
    AdversarialConfig,
    TrainConfig,
    adversarial_train,
    build_model,
    load_weights,
    save_weights,
    train_sgd,
)
from .network import Model, forward, grad_input, predict
from .tensor import Tape, Tensor, hadamard, sign

__version__ = "0.1.0"
