"""Saliency-guided contrastive machine unlearning for CIFAR-style image classifiers."""
from .data import (AugmentationPolicy, ForgetSplit, LabeledDataset, augment_positive_pair, batch_iter,
                   load_cifar10, load_cifar100, make_forget_split, toy_subset)
from .errors import (ConfigError, DataFormatError, EmptyIteratorError, InputError, NumericError, UnlearnError,
                     UsageError)
from .losses import contrastive_forget_loss, kl_uniform_loss, retain_ce_loss
from .metrics import (MetricsReport, accuracy_pct, avg_gap, evaluate_all, mean_abs_gap, mia_efficacy, ua)
from .model import (SGD, ArchitectureSpec, Classifier, build_classifier, compute_grads, forward_features,
                    forward_logits, load_checkpoint, save_checkpoint, sgd_step)
from .saliency import SaliencyMask, apply_mask, soft_saliency
from .unlearn import (PhaseReport, TrainConfig, UnlearnConfig, adversarial_finetune_phase, compute_saliency,
                      forgetting_phase, ft_baseline, ga_baseline, retrain_gold, rl_baseline, run_method,
                      train_classifier, wss_cl_unlearn)

__version__ = "0.1.0"
