"""MSCG-Net segmentation head: self-constructing graphs, multi-view fusion and the ACW loss."""
from .acw_loss import ClassFrequencyState, acw_total, update_frequency
from .config import TrainConfig
from .data_io import SegmentationBatch, synth_dataset
from .model import MSCGNet
from .trainer import Trainer, evaluate

__version__ = "0.1.0"

__all__ = ["ClassFrequencyState", "MSCGNet", "SegmentationBatch", "TrainConfig", "Trainer", "acw_total",
           "evaluate", "synth_dataset", "update_frequency"]
