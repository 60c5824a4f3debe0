"""Point cloud semantic segmentation with gated context fusion and dual
attention, on a from-scratch reverse-mode autodiff engine.

The pipeline: per-point contextual enrichment (k-NN feature concatenation
with mutual gated fusion), a sample-and-group encoder whose local groups
run through stacked graph attention units, inverse-distance decoding back
to full resolution, and spatial plus channel attention ahead of the
per-point classifier. Training is bit-reproducible under a fixed seed.
"""

from .backbone import (NetworkConfig, build_plan, forward, init_model_params,
                       load_checkpoint, save_checkpoint)
from .cloud import (PointCloud, generate_synthetic_scene, load_cloud,
                    partition_blocks, perturb_rotate_z, perturb_scale,
                    save_cloud)
from .errors import PointsegError
from .tensor import Graph, Tensor, gradcheck
from .training import (MetricsReport, TrainConfig, cross_entropy_loss,
                       evaluate, evaluate_params, predict_cloud, run_ablation,
                       run_robustness, train, training_blocks)

__version__ = "0.1.0"

__all__ = [
    "Graph", "MetricsReport", "NetworkConfig", "PointCloud", "PointsegError",
    "Tensor", "TrainConfig", "build_plan", "cross_entropy_loss", "evaluate",
    "evaluate_params", "forward", "generate_synthetic_scene", "gradcheck",
    "init_model_params", "load_checkpoint", "load_cloud", "partition_blocks",
    "perturb_rotate_z", "perturb_scale", "predict_cloud", "run_ablation",
    "run_robustness", "save_checkpoint", "save_cloud", "train",
    "training_blocks", "__version__",
]
