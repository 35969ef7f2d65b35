from .checkpoint import load_checkpoint, save_checkpoint
from .layers import conv_out_size, softmax
from .model import ModelSpec, Network, ParameterStore, build_model, build_ms_dvs, build_voxnet

__all__ = [
    "ModelSpec", "Network", "ParameterStore", "build_model", "build_ms_dvs", "build_voxnet",
    "conv_out_size", "softmax", "save_checkpoint", "load_checkpoint",
]
