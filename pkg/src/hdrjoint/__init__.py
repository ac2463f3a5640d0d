"""Joint multi-scale tone mapping and DCT-domain denoising for HDR patches."""

from .models import DFTL, TFDL, ModelBundle, ModelConfig, init_weights, load_checkpoint, save_checkpoint
from .pipeline import EnhanceConfig, enhance_image, enhance_patch

__all__ = [
    "DFTL", "TFDL", "ModelBundle", "ModelConfig", "init_weights", "load_checkpoint",
    "save_checkpoint", "EnhanceConfig", "enhance_image", "enhance_patch",
]
