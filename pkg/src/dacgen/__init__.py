"""Source-free adversarial CAPTCHA generation via guided diffusion."""

__version__ = "0.1.0"

from .schedules import NoiseSchedule, make_schedule, subsample_schedule  # noqa: F401
from .images import ImageBatch  # noqa: F401
from .edict import LatentPair, EdictCoeffs  # noqa: F401
from .guidance import GuidanceConfig  # noqa: F401
from .dac import AttackResult, DivergedRunError, run_dac  # noqa: F401
from .bpdac import EnsembleSpec, run_bpdac  # noqa: F401
from .prompts import PromptSpec  # noqa: F401
from .evaluation import MetricsReport  # noqa: F401
