"""Framework-free MDSVM-UNet: snake convolutions, visual Mamba layers, two-stage segmentation."""

from .formats import Volume, read_checkpoint, read_volume, write_checkpoint, write_volume
from .network import Network, NetworkConfig, build, parameter_count, toy_config
from .tensor import ContractError, Tensor, no_grad

__all__ = [
    "ContractError", "Network", "NetworkConfig", "Tensor", "Volume", "build", "no_grad",
    "parameter_count", "read_checkpoint", "read_volume", "toy_config", "write_checkpoint", "write_volume",
]
__version__ = "0.1.0"
