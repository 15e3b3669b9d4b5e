"""Multi-level (ladder) Siamese self-supervised learning on a numpy autodiff engine."""
from .augment import AugPolicy, make_view_pair
from .dataio import Checkpoint, Dataset, load_checkpoint, load_cifar10, save_checkpoint, synth_dataset
from .losses import LadderConfig, weight_schedule
from .nn import ArchConfig, ParamStore, encode, init_params
from .train import TrainConfig, TrainState, pretrain_run, train_step

__version__ = "0.1.0"
