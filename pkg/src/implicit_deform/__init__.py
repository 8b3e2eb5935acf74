"""Joint velocity / time-varying SDF fitting between two point clouds.

Importing the package switches JAX to 64-bit mode; derivative checks and
mesh extraction rely on double precision.
"""

import jax

jax.config.update("jax_enable_x64", True)

from .diffnet import MlpParams, positional_encode  # noqa: E402
from .estimator import ImplicitDeformation  # noqa: E402
from .fields import ImplicitField, VelocityField  # noqa: E402
from .losses import LossWeights  # noqa: E402
from .sampler import NormalizationTransform, normalize_pair  # noqa: E402
from .surface import TriMesh, chamfer, extract_mesh, hausdorff, mesh_volume  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402

__all__ = [
    "ImplicitDeformation",
    "ImplicitField",
    "LossWeights",
    "MlpParams",
    "NormalizationTransform",
    "TrainConfig",
    "TriMesh",
    "VelocityField",
    "chamfer",
    "extract_mesh",
    "hausdorff",
    "mesh_volume",
    "normalize_pair",
    "positional_encode",
    "train",
]

__version__ = "0.1.0"
