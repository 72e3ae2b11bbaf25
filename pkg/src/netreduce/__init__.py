"""Compress a trained sequential network: keep the first layers, project their
output onto a low-dimensional subspace (POD or active subspaces), replace the
remaining layers by a polynomial chaos expansion or a small feed-forward head,
and retrain by knowledge distillation."""
from .data import Dataset, gen_synthetic, load_split, write_synthetic
from .distill import DistillConfig, ReducedNet, train_reduced
from .errors import (ConfigError, DataError, FormatError, NetReduceError, NumericError, ParameterError,
                     ShapeError, TrainingDivergedError, ValidationError)
from .heads import FnnHead, PceModel, fit_fnn, pce_fit
from .nn import Network, load_model, save_model, small_cnn
from .pipeline import PipelineConfig, evaluate, run_pipeline, sweep_heads, train_teacher
from .reducers import ProjectionMap, as_basis, as_basis_streaming, pod_basis
from .splitter import collect_features, split_network

__version__ = "0.1.0"
