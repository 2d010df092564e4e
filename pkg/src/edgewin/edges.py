"""Learnable Sobel-Feldman edge block.

Four 3x3 orientation kernels (vertical, horizontal, two diagonals) whose
classic weight-2 entries are replaced by a learnable scalar alpha, so
alpha = 2 recovers the textbook operator. A single-channel image goes
through all four kernels (stride 1, pad 1) and a GeLU, yielding a 4-channel
edge map that the rest of the network concatenates at every resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    conv2d,
    gelu,
    mul,
    replicate_pad2d,
    reshape,
)

__all__ = ["SobelKernelSet", "build_kernels", "edge_forward", "EDGE_CHANNELS"]

EDGE_CHANNELS = 4

# fixed +/-1 entries per orientation; alpha fills the masked positions
_BASE = np.array(
    [
        [[-1, 0, 1], [0, 0, 0], [-1, 0, 1]],     # vertical edges
        [[1, 0, 1], [0, 0, 0], [-1, 0, -1]],     # horizontal (90deg rotation)
        [[0, 1, 0], [-1, 0, 1], [0, -1, 0]],     # diagonal
        [[0, -1, 0], [1, 0, -1], [0, 1, 0]],     # anti-diagonal (transpose)
    ],
    dtype=np.float64,
)[:, None, :, :]

_ALPHA_MASK = np.array(
    [
        [[0, 0, 0], [-1, 0, 1], [0, 0, 0]],
        [[0, 1, 0], [0, 0, 0], [0, -1, 0]],
        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
        [[0, 0, -1], [0, 0, 0], [1, 0, 0]],
    ],
    dtype=np.float64,
)[:, None, :, :]


def _default_alpha() -> Tensor:
    # classic Sobel weights as the starting point
    return Tensor(2.0, requires_grad=True)


@dataclass
class SobelKernelSet:
    """Learnable edge-kernel parameters.

    `alpha` is a scalar by default; with `per_kernel=True` it is a length-4
    vector giving each orientation its own weight.
    """

    alpha: Tensor = field(default_factory=_default_alpha)
    per_kernel: bool = False

    def __post_init__(self):
        want = (EDGE_CHANNELS,) if self.per_kernel else ()
        if self.alpha.data.shape != want:
            raise DimensionError(
                f"alpha must have shape {want}, got {self.alpha.data.shape}"
            )

    @staticmethod
    def create(per_kernel: bool = False, alpha: float = 2.0) -> "SobelKernelSet":
        if per_kernel:
            a = Tensor(np.full(EDGE_CHANNELS, alpha), requires_grad=True)
        else:
            a = Tensor(alpha, requires_grad=True)
        return SobelKernelSet(alpha=a, per_kernel=per_kernel)


def build_kernels(kset: SobelKernelSet) -> Tensor:
    """Materialize the four 3x3 kernels as a 4x1x3x3 tensor.

    Linear in alpha, so the kernels stay differentiable and each sums to
    zero for any alpha (edge filters reject constant regions).
    """
    base = Tensor(_BASE)
    mask = Tensor(_ALPHA_MASK)
    if kset.per_kernel:
        a = reshape(kset.alpha, (EDGE_CHANNELS, 1, 1, 1))
    else:
        a = kset.alpha
    return add(base, mul(mask, a))


def edge_forward(image: Tensor, kset: SobelKernelSet) -> Tensor:
    """Edge map of a Bx1xHxW image: conv with the four kernels, then GeLU.

    The border is replicate-padded, not zero-padded, so the zero-sum
    kernels respond with exactly 0 on constant images everywhere (zero
    padding would fabricate an edge along the image frame). Spatial size
    is preserved; the result is Bx4xHxW.
    """
    if image.data.ndim != 4 or image.data.shape[1] != 1:
        raise DimensionError(
            f"edge_forward expects a Bx1xHxW single-channel image, got "
            f"{image.data.shape}"
        )
    kernels = build_kernels(kset)
    padded = replicate_pad2d(image, 1)
    return gelu(conv2d(padded, kernels, bias=None, stride=1, padding=0))


if __name__ == "__main__":
    kset = SobelKernelSet.create()
    k = build_kernels(kset).data
    print("vertical kernel at alpha=2:\n", k[0, 0])
    print("per-kernel sums:", k.sum(axis=(1, 2, 3)))
