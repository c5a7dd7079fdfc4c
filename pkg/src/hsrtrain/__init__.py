"""Sublinear fired-neuron identification for training shifted-ReLU networks."""

from .core import (Distribution, EvenPolynomial, Rng, estimate_r_bound, eval_polynomial,
                   quadratic_form_polynomial, sample_cube, sample_even_polynomial, sample_sphere)
from .hsr import BallTreeIndex, BruteForceIndex, HalfSpace, hsr_delete, hsr_init, hsr_insert, hsr_query
from .network import (TwoLayerNet, forward_dense, forward_sparse, init_net, l2_loss, load_checkpoint,
                      per_sample_residuals, save_checkpoint, shifted_relu, shifted_relu_deriv,
                      sparse_gradient)
from .trainer import (DivergenceError, TrainConfig, TrainMetrics, fire_sets_dense, flip_statistics,
                      scaling_experiment, sparsity_experiment, train)

__all__ = [
    "Distribution", "EvenPolynomial", "Rng", "estimate_r_bound", "eval_polynomial",
    "quadratic_form_polynomial", "sample_cube", "sample_even_polynomial", "sample_sphere",
    "BallTreeIndex", "BruteForceIndex", "HalfSpace", "hsr_delete", "hsr_init", "hsr_insert", "hsr_query",
    "TwoLayerNet", "forward_dense", "forward_sparse", "init_net", "l2_loss", "load_checkpoint",
    "per_sample_residuals", "save_checkpoint", "shifted_relu", "shifted_relu_deriv", "sparse_gradient",
    "DivergenceError", "TrainConfig", "TrainMetrics", "fire_sets_dense", "flip_statistics",
    "scaling_experiment", "sparsity_experiment", "train",
]
