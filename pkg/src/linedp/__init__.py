"""Line-level defect prediction with a Bi-GRU context encoder and bilinear attention fusion."""
from .model import LineDefectModel, ModelConfig, load_checkpoint, save_checkpoint, train

__all__ = ["LineDefectModel", "ModelConfig", "load_checkpoint", "save_checkpoint", "train"]
__version__ = "0.1.0"
