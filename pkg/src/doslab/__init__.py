"""Observable-point softmap self-distillation on synthetic long-tail point clouds."""
from .config import RunConfig
from .probe import linear_probe
from .scenegen import generate_dataset, generate_scene
from .trainer import init_state, pretrain
from .transport import zipf_prior, zipf_sinkhorn

__all__ = ["RunConfig", "generate_dataset", "generate_scene", "init_state", "linear_probe",
           "pretrain", "zipf_prior", "zipf_sinkhorn"]
__version__ = "0.1.0"
