"""Unsupervised deformable 2D image registration with a meta-learned
initialization that adapts to unseen domains in few fine-tuning steps.
"""
from .backend import active_name as active_backend
from .data import DomainSpec, LandmarkSet, PairSample, make_pair
from .loss import LossConfig, local_cc, smoothness, total_loss
from .model import ArchSpec, ParamVector, backward, forward, init_params, param_axpy
from .optim import AdamState, adam_init, adam_step, reptile_outer
from .train import TaskSpec, TrainConfig, fine_tune, meta_train, pretrain, register_pair

__all__ = [
    "ArchSpec", "ParamVector", "forward", "backward", "init_params", "param_axpy",
    "LossConfig", "local_cc", "smoothness", "total_loss",
    "AdamState", "adam_init", "adam_step", "reptile_outer",
    "DomainSpec", "PairSample", "LandmarkSet", "make_pair",
    "TaskSpec", "TrainConfig", "pretrain", "meta_train", "fine_tune", "register_pair",
    "active_backend",
]

__version__ = "0.1.0"
