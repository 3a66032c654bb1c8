"""Surface reconstruction from unoriented point clouds with a learned occupancy field."""

from .errors import (
    BadArgument,
    EmptyInput,
    EmptySurface,
    NotWatertight,
    NumericError,
    OccurfError,
    ShapeError,
    TooSparse,
)
from .geom import PointCloud, TriangleMesh, make_primitive, occupancy_oracle, sample_surface, synth_fixture, synth_scan
from .metrics import chamfer, evaluate, f1_volumetric, iou_mc, normal_error
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .reconstruct import build_evaluator, reconstruct, region_growing_mc
from .spatial import KnnIndex, covering_subsets, extract_patches, random_subset
from .trainer import TrainConfig, build_dataset, train

__version__ = "0.1.0"
