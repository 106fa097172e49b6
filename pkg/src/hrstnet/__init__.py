"""Parallel multi-resolution 3D window-attention segmentation engine."""

from .topology import ModelConfig, forward, init_params, param_count, shape_trace
from .volume import LabelVolume, SyntheticSpec, VolumeTensor, generate_synthetic, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "forward",
    "init_params",
    "param_count",
    "shape_trace",
    "VolumeTensor",
    "LabelVolume",
    "SyntheticSpec",
    "generate_synthetic",
    "read_volume",
    "write_volume",
    "__version__",
]
