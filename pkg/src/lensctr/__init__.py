"""Latent-query CTR models with target-conditioned position priors (LENS).

Modules:
    numcore      float64 tensors, reverse-mode tape, parameter store
    embeddings   item/action/field embeddings and typed sequence tokens
    posbias      right-aligned static position priors
    lens         target-conditioned query gate and position bias
    backbone     HyFormer-style latent-query model
    din          DIN target-attention baseline
    synthdata    synthetic datasets with planted click mechanisms
    trainer      loss, Adam, AUC, training loop, ablation grid
    experiments  named synthetic setups and paired direction runs
    cli          command-line entry point
"""

from .backbone import LatentQueryModel
from .config import DinConfig, FeatureSchema, LensConfig, ModelConfig, Switches, TrainConfig
from .din import DinModel
from .synthdata import DatasetSpec, PlantedSignal, generate

__all__ = [
    "DatasetSpec",
    "DinConfig",
    "DinModel",
    "FeatureSchema",
    "LatentQueryModel",
    "LensConfig",
    "ModelConfig",
    "PlantedSignal",
    "Switches",
    "TrainConfig",
    "generate",
]
