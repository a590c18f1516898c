"""Deep Markov random field image models: zigzag coupled-pass inference,
GMM pixel emissions, texture synthesis and super-resolution."""

__version__ = "0.1.0"

from .lattice import GridSpec, ZigzagDecomposition, build_zigzag_order, decompose, neighbors4, zigzag
from .model import (EmissionParams, HiddenField, ModelParams, backward, cap_infer, emission_project,
                    gmm_logpdf, gmm_sample, map_update, nll_loss, shifted_means)
from .numerics import ActivationKind, RngStream, eta, logsumexp, sigma
from .training import Checkpoint, TrainConfig, load_checkpoint, rmsprop_step, save_checkpoint, train

__all__ = [
    "ActivationKind", "Checkpoint", "EmissionParams", "GridSpec", "HiddenField", "ModelParams",
    "RngStream", "TrainConfig", "ZigzagDecomposition", "backward", "build_zigzag_order", "cap_infer",
    "decompose", "emission_project", "eta", "gmm_logpdf", "gmm_sample", "load_checkpoint",
    "logsumexp", "map_update", "neighbors4", "nll_loss", "rmsprop_step", "save_checkpoint",
    "shifted_means", "sigma", "train", "zigzag",
]
