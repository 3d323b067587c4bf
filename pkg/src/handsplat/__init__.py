"""Animatable Gaussian-splat hand avatars with structure-aware deformation."""

from .config import RunConfig
from .model import AvatarModel
from .skeleton import Pose, SkeletonModel, default_skeleton

__all__ = ["AvatarModel", "Pose", "RunConfig", "SkeletonModel", "default_skeleton"]
__version__ = "0.1.0"
