"""Learned surrogates for nonlinear FE soft-tissue deformation.

Pipeline: synthetic phantoms (``geometry``) -> neo-Hookean FE ground truth
(``fesolver``) -> per-node feature vectors (``features``) -> a point network
(``network`` on top of ``tensorcore``) trained with bootstrap point sampling
(``training``) -> bagged prediction (``inference``) -> metrics (``evaluation``).
"""
from .geometry import PhantomSpec, Region, TetMesh, generate_phantom
from .fesolver import MaterialField, MaterialRanges, generate_dataset, solve_static
from .network import NetworkConfig, init_network, load_checkpoint, save_checkpoint
from .training import TrainConfig, train
from .inference import predict
from .evaluation import evaluate_holdout

__version__ = "0.1.0"

__all__ = [
    "PhantomSpec", "Region", "TetMesh", "generate_phantom",
    "MaterialField", "MaterialRanges", "generate_dataset", "solve_static",
    "NetworkConfig", "init_network", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "train", "predict", "evaluate_holdout",
]
