"""Locally-enhanced window transformer blocks.

A feature map is cut into non-overlapping MxM windows; multi-head
self-attention runs inside each window independently, and the feed-forward
half re-assembles each window's tokens into their MxM grid for a depthwise
3x3 convolution between the two linear projections. Both halves sit behind
pre-norm residual connections:

    X' = WMSA(LN(X)) + X
    X_out = LeFF(LN(X')) + X'
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ConfigError,
    DimensionError,
    Tensor,
    add,
    concat,
    depthwise_conv2d,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    transpose,
)

__all__ = [
    "WindowSpec",
    "LeWinBlockParams",
    "window_partition",
    "window_reverse",
    "wmsa",
    "leff",
    "lewin_forward",
    "lewin_pair_tokens",
    "init_block_params",
]

LEFF_EXPANSION = 4  # hidden width of the feed-forward half, in units of C


@dataclass(frozen=True)
class WindowSpec:
    """Window geometry and head split for one attention stage."""

    window: int    # M, window side length in pixels
    heads: int     # j
    channels: int  # C

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def window_count(self, h: int, w: int) -> int:
        if h % self.window or w % self.window:
            raise DimensionError(
                f"{h}x{w} feature map does not tile into {self.window}x"
                f"{self.window} windows"
            )
        return (h * w) // (self.window * self.window)


@dataclass
class LeWinBlockParams:
    """One WMSA + LeFF pair: per-head projections, output projection,
    feed-forward weights, and the two layer-norm affine pairs."""

    wq: list  # heads x Tensor(C, d)
    wk: list
    wv: list
    wo: Tensor          # (C, C)
    bo: Tensor          # (C,)
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    w_in: Tensor        # (C, hidden)
    b_in: Tensor
    w_dw: Tensor        # (hidden, 1, 3, 3)
    w_out: Tensor       # (hidden, C)
    b_out: Tensor


def init_block_params(spec: WindowSpec, rng: np.random.Generator) -> LeWinBlockParams:
    """Projections ~ N(0, 0.02), norm gains 1 / shifts 0, biases 0."""
    c, d = spec.channels, spec.head_dim
    hidden = LEFF_EXPANSION * c

    def proj(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    return LeWinBlockParams(
        wq=[proj(c, d) for _ in range(spec.heads)],
        wk=[proj(c, d) for _ in range(spec.heads)],
        wv=[proj(c, d) for _ in range(spec.heads)],
        wo=proj(c, c),
        bo=Tensor(np.zeros(c), requires_grad=True),
        norm1_gamma=Tensor(np.ones(c), requires_grad=True),
        norm1_beta=Tensor(np.zeros(c), requires_grad=True),
        norm2_gamma=Tensor(np.ones(c), requires_grad=True),
        norm2_beta=Tensor(np.zeros(c), requires_grad=True),
        w_in=proj(c, hidden),
        b_in=Tensor(np.zeros(hidden), requires_grad=True),
        w_dw=proj(hidden, 1, 3, 3),
        w_out=proj(hidden, c),
        b_out=Tensor(np.zeros(c), requires_grad=True),
    )


def window_partition(x: Tensor, window: int) -> Tensor:
    """BxCxHxW -> (B*N) x M^2 x C token windows, N = HW / M^2.

    Tiles are taken row-major over the image, tokens row-major within each
    tile, so the layout is deterministic and exactly invertible.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"window_partition expects BCHW, got {x.data.shape}")
    b, c, h, w = x.data.shape
    if h % window or w % window:
        raise DimensionError(
            f"spatial dims {h}x{w} not divisible by window {window}"
        )
    nh, nw = h // window, w // window
    t = reshape(x, (b, c, nh, window, nw, window))
    t = transpose(t, (0, 2, 4, 3, 5, 1))  # b, nh, nw, M, M, c
    return reshape(t, (b * nh * nw, window * window, c))


def window_reverse(tokens: Tensor, window: int, h: int, w: int) -> Tensor:
    """Exact inverse of window_partition back to BxCxHxW."""
    if tokens.data.ndim != 3:
        raise DimensionError(f"window_reverse expects tokens, got {tokens.data.shape}")
    if h % window or w % window:
        raise DimensionError(f"target {h}x{w} not divisible by window {window}")
    nh, nw = h // window, w // window
    total, m2, c = tokens.data.shape
    if m2 != window * window or total % (nh * nw) != 0:
        raise DimensionError(
            f"token block {tokens.data.shape} inconsistent with window "
            f"{window} and target {h}x{w}"
        )
    b = total // (nh * nw)
    t = reshape(tokens, (b, nh, nw, window, window, c))
    t = transpose(t, (0, 5, 1, 3, 2, 4))  # b, c, nh, M, nw, M
    return reshape(t, (b, c, h, w))


def wmsa(tokens: Tensor, params: LeWinBlockParams, spec: WindowSpec) -> Tensor:
    """Window multi-head self-attention over (windows, M^2, C) tokens.

    Per window i and head j: softmax(Q K^T / sqrt(d)) V with Q = X^i Wq_j
    etc.; heads are concatenated in fixed order (head 0 first) and passed
    through the output projection. Attention never crosses windows because
    each window is its own batch element. The per-head projections are
    stacked along the output axis so Q/K/V each take one matmul; the
    stacking preserves head order, head j owns columns [j*d, (j+1)*d).
    """
    if len(params.wq) != spec.heads:
        raise ConfigError(
            f"params carry {len(params.wq)} heads, spec expects {spec.heads}"
        )
    if tokens.data.shape[-1] != spec.channels:
        raise DimensionError(
            f"token width {tokens.data.shape[-1]} != channels {spec.channels}"
        )
    wn, m2, c = tokens.data.shape
    j, d = spec.heads, spec.head_dim
    inv_sqrt_d = 1.0 / math.sqrt(d)

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (wn, m2, j, d)), (0, 2, 1, 3))

    wq = params.wq[0] if j == 1 else concat(params.wq, axis=1)
    wk = params.wk[0] if j == 1 else concat(params.wk, axis=1)
    wv = params.wv[0] if j == 1 else concat(params.wv, axis=1)
    q = split_heads(matmul(tokens, wq))  # (wn, j, m2, d)
    k = split_heads(matmul(tokens, wk))
    v = split_heads(matmul(tokens, wv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), inv_sqrt_d)
    attn = softmax(scores)
    heads = matmul(attn, v)  # (wn, j, m2, d)
    merged = reshape(transpose(heads, (0, 2, 1, 3)), (wn, m2, c))
    return add(matmul(merged, params.wo), params.bo)


def leff(tokens: Tensor, params: LeWinBlockParams) -> Tensor:
    """Locally-enhanced feed-forward on (windows, M^2, C) tokens.

    linear-in -> GeLU -> fold tokens back to the MxM grid -> depthwise 3x3
    (pad 1) -> GeLU -> flatten -> linear-out back to width C.
    """
    wn, m2, c = tokens.data.shape
    m = math.isqrt(m2)
    if m * m != m2:
        raise DimensionError(f"token count {m2} is not a square window")
    hidden = params.w_in.data.shape[1]
    h1 = gelu(add(matmul(tokens, params.w_in), params.b_in))
    grid = transpose(reshape(h1, (wn, m, m, hidden)), (0, 3, 1, 2))
    grid = gelu(depthwise_conv2d(grid, params.w_dw, stride=1, padding=1))
    flat = reshape(transpose(grid, (0, 2, 3, 1)), (wn, m2, hidden))
    return add(matmul(flat, params.w_out), params.b_out)


def lewin_pair_tokens(tokens: Tensor, params: LeWinBlockParams,
                      spec: WindowSpec) -> Tensor:
    """One pre-norm residual WMSA + LeFF pair, staying in token space."""
    attn = wmsa(layer_norm(tokens, params.norm1_gamma, params.norm1_beta), params, spec)
    tokens = add(attn, tokens)
    ff = leff(layer_norm(tokens, params.norm2_gamma, params.norm2_beta), params)
    return add(ff, tokens)


def lewin_forward(x: Tensor, params: LeWinBlockParams, spec: WindowSpec) -> Tensor:
    """One pre-norm residual WMSA + LeFF pair on a BxCxHxW map."""
    b, c, h, w = x.data.shape
    if c != spec.channels:
        raise DimensionError(f"input has {c} channels, spec expects {spec.channels}")
    tokens = window_partition(x, spec.window)
    tokens = lewin_pair_tokens(tokens, params, spec)
    return window_reverse(tokens, spec.window, h, w)
