"""TRUNet: a numpy 3-D hybrid CNN/transformer segmenter with a residual U-Net baseline."""
from .errors import (ConfigurationError, DataError, FormatError, TrainingError, TrunetError,
                     UsageError)
from .models import (ModelConfig, build_localizer, build_model, build_res_unet, build_trunet,
                     load_checkpoint, full_trunet_config, save_checkpoint, toy_res_unet_config,
                     toy_trunet_config)
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DataError", "FormatError", "TrainingError", "TrunetError", "UsageError",
    "ModelConfig", "Tensor", "backward", "build_localizer", "build_model", "build_res_unet",
    "build_trunet", "load_checkpoint", "no_grad", "full_trunet_config", "save_checkpoint",
    "toy_res_unet_config", "toy_trunet_config", "__version__",
]
