"""Camera-pose-encoded attention and a toy multi-view diffusion pipeline."""

from .cape import CapeConfig, Mode, Role, apply_cape, cape_pair_logit
from .pose import Pose4, Pose6, RadiusBounds

__all__ = ["CapeConfig", "Mode", "Role", "apply_cape", "cape_pair_logit", "Pose4", "Pose6", "RadiusBounds"]
