"""cdnz: a multi-scale residual image denoiser that can be trained jointly
with a frozen high-level vision head, so task semantics guide restoration."""

__version__ = "0.1.0"

from .tensor import Parameter, Tape, Tensor, backward  # noqa: F401
