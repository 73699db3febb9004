"""Attention over multi-hop interatomic distance graphs for 3D molecular regression."""
from .dggr import DGConfig, DGEdge, DGGraph, build_dg_graph, encode_distance, expand_neighbors
from .model import Checkpoint, NetworkConfig, forward_network, init_params
from .molio import Dataset, Molecule, parse_jsonl, parse_sdf_v2000
from .train import (
    RunConfig,
    RunReport,
    SyntheticSpec,
    evaluate,
    gen_synthetic,
    run_ablation,
    synthetic_run_config,
    train_model,
)

__all__ = [
    "Checkpoint",
    "DGConfig",
    "DGEdge",
    "DGGraph",
    "Dataset",
    "Molecule",
    "NetworkConfig",
    "RunConfig",
    "RunReport",
    "SyntheticSpec",
    "build_dg_graph",
    "encode_distance",
    "evaluate",
    "expand_neighbors",
    "forward_network",
    "gen_synthetic",
    "init_params",
    "parse_jsonl",
    "parse_sdf_v2000",
    "run_ablation",
    "synthetic_run_config",
    "train_model",
]

__version__ = "0.1.0"
