"""edgewin: edge-enhanced windowed-attention denoiser on a numpy autodiff core."""

from .autodiff import (
    CheckerboardError,
    ConfigError,
    ContractError,
    DimensionError,
    NumericsError,
    Tape,
    Tensor,
    backward,
    set_debug_checks,
)
from .gradcheck import grad_check

__version__ = "0.1.0"
