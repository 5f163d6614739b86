"""Mean spectral normalization and friends on a small numpy autodiff engine."""

from .errors import (ArgumentError, ConfigError, DegenerateMatrixError, FormatError, MsnlabError,
                     NonFiniteGradientError, ShapeError, StateError)
from .models import ModelSpec, build
from .norm import NormLayer
from .optim import Adam
from .spectral import jacobi_svd, power_iteration, sn_weight
from .tensor import Tensor, backward
from .train import ExperimentConfig, GanConfig, evaluate, train, train_gan

__version__ = "0.1.0"
