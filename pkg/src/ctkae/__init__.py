"""Continuous-time Koopman autoencoders with linear latent dynamics dz/dt = K(phi) z."""
from .autodiff import Graph, Tensor, evaluate, finite_difference_check, gradient
from .dynamics import (KoopmanOperator, LatentState, LatentTrajectory, koopman_matrix, rollout, rollout_exp,
                       step_euler, step_implicit_midpoint, step_rk4)
from .linalg import fft2, matrix_exp, matrix_exp_action, solve_linear, spectral_abscissa
from .model import KoopmanAutoencoder, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "Graph", "Tensor", "evaluate", "finite_difference_check", "gradient",
    "KoopmanOperator", "LatentState", "LatentTrajectory", "koopman_matrix", "rollout", "rollout_exp",
    "step_euler", "step_implicit_midpoint", "step_rk4",
    "fft2", "matrix_exp", "matrix_exp_action", "solve_linear", "spectral_abscissa",
    "KoopmanAutoencoder", "ModelConfig",
]
