"""Convolutional sparse coding by local block coordinate descent.

The global code is split into needles (one small coefficient vector per image
position). Needles whose patches do not overlap form a layer and are updated
together; dictionary learning, inpainting and fusion are built on top.
"""

from importlib import resources

from .core import (
    LayerSchedule, LocalDictionary, NeedleField, ObjectiveReport, WorkImage, build_layers,
    crop_result, extract_patch, objective, pad_image, place_add_patch, reconstruct,
)
from .errors import (
    ConfigError, DegenerateAtomError, DegenerateAtomWarning, LobcodError, MonotonicityError,
    NumericError, PositionError, SolverError,
)
from .lasso import LassoConfig, init_needles, solve_local, solve_local_masked
from .learn import (
    OptimizerState, Phase, TrainConfig, dict_gradient, dict_gradient_masked, init_dictionary,
    project_columns, train_batch, train_stochastic,
)
from .pursuit import PursuitConfig, pursue_layered, pursue_masked, pursue_sequential

__version__ = "0.1.0"

PRETRAINED = "natural_8x8_m81.lbcd"


def pretrained_dictionary() -> LocalDictionary:
    """The bundled 8x8, 81-atom dictionary trained on natural images."""
    from .io import dictionary_from_bytes
    return dictionary_from_bytes(resources.files(__package__).joinpath("data", PRETRAINED).read_bytes())
