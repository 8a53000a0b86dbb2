from .base import ExperimentBase  # noqa F401
from .dao import ExperimentConfig, SolveReport  # noqa F401
from .exceptions import LssError, UserException  # noqa F401
from .interface import CommonInterface  # noqa F401
