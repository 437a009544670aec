"""In-context operator regression with stacked kernel-attention layers."""
from .model import ModelConfig, init_params, param_count, predict
from .pde import MetaConfig, MetaDataset, OperatorDataset, adr_solve, generate_meta_dataset
from .spectral import SpectralCodec
from .training import TrainConfig, train

__all__ = [
    "MetaConfig", "MetaDataset", "ModelConfig", "OperatorDataset", "SpectralCodec", "TrainConfig",
    "adr_solve", "generate_meta_dataset", "init_params", "param_count", "predict", "train",
]
