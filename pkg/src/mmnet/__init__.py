"""Multi-scale semantic matching network on a small numpy autodiff engine."""

from mmnet.autodiff import Tensor, backward, no_grad
from mmnet.config import Config, EvalConfig, ModelConfig, TrainConfig, load_config
from mmnet.model import MMNet

__all__ = ["Config", "EvalConfig", "MMNet", "ModelConfig", "Tensor", "TrainConfig", "backward", "load_config", "no_grad"]
__version__ = "0.1.0"
