"""Single RGB image to 3D point cloud generation, training and evaluation."""

from .metrics import MetricReport, aggregate_report, chamfer_distance, emd, fscore, improvement_percent
from .model import GeneratorModel, ModelConfig
from .pointcloud import PointCloud, load_cloud, normalize, save_cloud
from .training import TrainConfig, chamfer_loss, fit

__version__ = "0.1.0"

__all__ = [
    "GeneratorModel",
    "MetricReport",
    "ModelConfig",
    "PointCloud",
    "TrainConfig",
    "aggregate_report",
    "chamfer_distance",
    "chamfer_loss",
    "emd",
    "fit",
    "fscore",
    "improvement_percent",
    "load_cloud",
    "normalize",
    "save_cloud",
]
