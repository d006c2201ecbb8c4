"""MS-DCANet: encoder-decoder segmentation with a self-contained autodiff core.

Subpackage map: tensor/ops/gradcheck (autodiff core), blocks (DC block,
attention gate, tokenized MLP block, Res-ASPP), network (model assembly,
checkpoints, params/FLOPs), metrics, data, trainer, analysis, cli.
"""

from . import _threads  # noqa: F401  (must run before NumPy loads its BLAS)

from .tensor import (  # noqa: E402
    NumericError,
    Tape,
    TapeError,
    Tensor,
    backward,
    create,
    kaiming,
    ones,
    uniform,
    zeros,
)

__version__ = "0.1.0"

__all__ = [
    "NumericError",
    "Tape",
    "TapeError",
    "Tensor",
    "backward",
    "create",
    "kaiming",
    "ones",
    "uniform",
    "zeros",
    "__version__",
]
