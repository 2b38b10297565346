"""Pedestrian trajectory prediction with a virtual-node high-order expert, a one-hop
expert and a Top-P mixture-of-experts router, on a small numpy autodiff engine."""

from .data import Scene, SyntheticSpec, build_input_features, generate_synthetic, load_trajectory_file, normalize_scene
from .graph import InteractionGraph, augment_with_virtual, effective_resistance, knn_graph, laplacian, resistance_report
from .model import ModelConfig, ViTE
from .tensor import GradientTape, Parameter, Tensor, apply_primitive, backward, finite_difference_check

__version__ = "0.1.0"
