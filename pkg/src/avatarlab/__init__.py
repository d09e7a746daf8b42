"""Few-shot avatar personalization and score distillation at desk scale.

Two stages: a pose-conditioned toy denoiser is personalized on a handful of
subject images (with a condition prior preservation term), then a hash-grid
radiance field is distilled from it by score distillation with skeleton
conditioning and a local geometry margin loss.
"""

from .errors import ConfigError, ContractError, DomainError, NumericAbort, NumericError, SamplingError
from .field import FieldConfig, RadianceField
from .guidance import AnalyticGaussianDenoiser, NoiseSchedule, ToyConditionalDenoiser, Vocabulary
from .render import CameraPose, render_image

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "ConfigError", "ContractError", "DomainError", "FieldConfig", "NoiseSchedule", "NumericAbort",
    "NumericError", "RadianceField", "SamplingError", "ToyConditionalDenoiser", "AnalyticGaussianDenoiser",
    "Vocabulary", "render_image",
]
