"""Multimodal recurrent state-space model with product-of-experts fusion."""

from .distributions import DiagGaussian, kl, log_prob, poe_fuse, rsample
from .evaluation import EvalConfig, ErrorStats, ablation_eval, control_baseline, final_pose_error, integrate_pose
from .model import MRSSM, MissingModalityError, ModalitySpec, ModelConfig, ObservationSet, load_checkpoint, \
    save_checkpoint
from .simulator import SimConfig, gen_dataset, read_dataset, write_dataset
from .training import TrainingConfig, elbo_mvae, elbo_new, sample_subsets, train_run

__version__ = "0.1.0"
