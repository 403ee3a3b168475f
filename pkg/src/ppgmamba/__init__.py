"""PPG denoising with a bidirectional selective state-space network.

Subpackages are plain modules:

* ``autodiff``  reverse-mode tensors on numpy
* ``ssm``       selective scan and Mamba blocks
* ``models``    DPNet denoiser and HRP heart-rate predictor
* ``data``, ``pipeline``, ``store``  windows, quality gate, contamination, segment stores
* ``hr``        peak detection and beat statistics
* ``metrics``   MSE, CoS, SNR, SI-SDR, HR-MAE and the staged loss
* ``training``  Adam, checkpoints and the two training loops
* ``cli``       the ``ppgmamba`` command
"""

from .autodiff import Tensor
from .models import DPNetConfig, HRPConfig, dpnet_forward, hrp_forward, init_params
from .training import TrainConfig, denoise_batch, load_checkpoint, train_dpnet, train_hrp

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "DPNetConfig",
    "HRPConfig",
    "init_params",
    "dpnet_forward",
    "hrp_forward",
    "TrainConfig",
    "train_hrp",
    "train_dpnet",
    "load_checkpoint",
    "denoise_batch",
]
