"""Pose-graph SLAM toolkit with mixture-density front-end abstractions.

Submodules: ``geometry``, ``mdn``, ``learning``, ``loop_detection``,
``outlier_rejection``, ``pose_graph``, ``simulator``, ``metrics``, ``io``,
``config``, ``pipeline`` and ``cli``.
"""
from .geometry import Pose6
from .errors import SlamError

__version__ = "0.1.0"

__all__ = ["Pose6", "SlamError", "__version__"]
