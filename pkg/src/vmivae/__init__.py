"""Variational autoencoders with a mutual-information regulariser, on a small numpy autodiff core."""

from .data_io import Dataset, binarize, idx_load, idx_save, load_mnist, make_toy_joint
from .em_gmm import GmmParams, em_fit, gmm_loglik
from .mi_eval import DiscreteJoint, MiReport, brute_force_mi, kl_upper_bound, lemma1_check, mi_lower_bound
from .models import AuxModel, Categorical, GaussianSubvector, LatentLayout, VaeModel, load_checkpoint, save_checkpoint
from .objectives import ObjectiveConfig, objective_terms, total_objective
from .tensor import Tensor
from .training import TauSchedule, TrainConfig, train, train_step

__version__ = "0.1.0"
