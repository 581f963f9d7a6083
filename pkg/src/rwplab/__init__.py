"""Adversarial training with loss-gated robust weight perturbation."""

from .attacks import AdvBatch, AttackConfig, evaluate_robustness, fgsm, natural_accuracy, pgd, project_ball
from .autodiff import Graph, Tensor, evaluate, finite_diff_check, gradient
from .data import Dataset, gen_synthetic, load_idx_subset, load_mnist
from .losses import LossSpec, cross_entropy, kl_div, rst_loss, trades_loss
from .models import ArchSpec, Model, PerturbedView, init_weights, load_checkpoint, save_checkpoint
from .records import emit_curves_svg, read_metrics_csv, write_metrics_csv
from .perturb import LSCRange, PerturbConfig, PerturbState, lsc_group, rwp_generate, rwp_mask, rwp_step
from .train import RunRecord, TrainConfig, run_ablation, train, train_step

__version__ = "0.1.0"
