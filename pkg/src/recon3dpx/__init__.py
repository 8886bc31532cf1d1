"""Progressive hybrid MLP-CNN pyramid network for reconstructing a flattened
3D oral volume from a single panoramic X-ray, with a phantom data pipeline,
quality metrics and a training/ablation harness."""

from .loss import GuidanceSchedule, progressive_loss, scale_labels, sse_loss
from .metrics import MetricReport, dsc_bone, psnr, ssim3d
from .network import Net3DPX, NetworkConfig, PyramidOutput, load_checkpoint, parameter_count, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "GuidanceSchedule",
    "MetricReport",
    "Net3DPX",
    "NetworkConfig",
    "PyramidOutput",
    "dsc_bone",
    "load_checkpoint",
    "parameter_count",
    "progressive_loss",
    "psnr",
    "save_checkpoint",
    "scale_labels",
    "sse_loss",
    "ssim3d",
]
