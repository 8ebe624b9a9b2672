"""Converting-autoencoder training pipeline on a small numpy autodiff engine."""

from .config import PipelineConfig, load_config
from .datasets import DataSplit, LabeledImageSet, load_cifar10_bin, load_idx, make_synthetic
from .estimators import ConvertingAutoencoder, ConvNetClassifier, EncodeNetClassifier
from .model_ir import ModelSpec, count_parameters, parse_model_spec, split_model, synthesize_decoder
from .network import Network
from .pipeline import EncodeNetModel, Pipeline, assemble_encodenet, run_ablation
from .trainer import RunRecord, TrainConfig, train_autoencoder, train_classifier

__version__ = "0.1.0"

__all__ = [
    "ConvNetClassifier",
    "ConvertingAutoencoder",
    "EncodeNetClassifier",
    "DataSplit",
    "EncodeNetModel",
    "LabeledImageSet",
    "ModelSpec",
    "Network",
    "Pipeline",
    "PipelineConfig",
    "RunRecord",
    "TrainConfig",
    "assemble_encodenet",
    "count_parameters",
    "load_cifar10_bin",
    "load_config",
    "load_idx",
    "make_synthetic",
    "parse_model_spec",
    "run_ablation",
    "split_model",
    "synthesize_decoder",
    "train_autoencoder",
    "train_classifier",
]
