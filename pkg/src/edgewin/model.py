"""E-shaped encoder/decoder assembly with shared edge maps.

Pipeline: the single-channel input produces a 4-channel edge map S once,
up front. An input projection lifts the image to C channels; each encoder
stage runs LeWin pairs, concatenates S at the current resolution, applies
two 3x3 convs, and downsamples (3x3 / stride 2, channels doubled). S is
itself downsampled alongside by a fixed 3x3 average. After a LeWin
bottleneck, decoder stages mirror the encoders with 4x4 / stride 2
transpose convolutions, re-concatenating the matching-resolution edge map.
A final 3x3 projection returns a 1-channel map: the predicted noise
residual in "residual" mode (so the clean estimate is x minus that map),
or the clean estimate directly in "deterministic" mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import blocks
from .autodiff import (
    ConfigError,
    DimensionError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    conv_transpose2d,
    depthwise_conv2d,
    gelu,
    sub,
)
from .blocks import (
    LeWinBlockParams,
    WindowSpec,
    lewin_pair_tokens,
    window_partition,
    window_reverse,
)
from .edges import EDGE_CHANNELS, SobelKernelSet, edge_forward

__all__ = ["ModelConfig", "ParamStore", "init_params", "parameter_layout",
           "parameter_count", "forward", "denoise"]

MODES = ("residual", "deterministic")


@dataclass
class ModelConfig:
    stages: int = 2
    base_channels: int = 32
    window: int = 4
    heads: int = 2
    lewin_depth: int = 2
    mode: str = "residual"
    per_kernel_alpha: bool = False
    unet_skips: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("stages", "base_channels", "window", "heads", "lewin_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for s in range(self.stages + 1):
            if (self.base_channels * 2 ** s) % self.heads:
                raise ConfigError(
                    f"stage width {self.base_channels * 2 ** s} not divisible "
                    f"by {self.heads} heads"
                )

    @property
    def size_divisor(self) -> int:
        return self.window * 2 ** self.stages

    def stage_channels(self, s: int) -> int:
        return self.base_channels * 2 ** s

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


class ParamStore:
    """Named parameter registry with a collision-free dotted key space."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self) -> list:
        return list(self._params.values())


def _block_layout(prefix: str, channels: int, heads: int):
    d = channels // heads
    hidden = blocks.LEFF_EXPANSION * channels
    for h in range(heads):
        yield f"{prefix}.wq{h}", (channels, d), "proj"
        yield f"{prefix}.wk{h}", (channels, d), "proj"
        yield f"{prefix}.wv{h}", (channels, d), "proj"
    yield f"{prefix}.wo", (channels, channels), "proj"
    yield f"{prefix}.bo", (channels,), "zero"
    yield f"{prefix}.norm1.gamma", (channels,), "one"
    yield f"{prefix}.norm1.beta", (channels,), "zero"
    yield f"{prefix}.norm2.gamma", (channels,), "one"
    yield f"{prefix}.norm2.beta", (channels,), "zero"
    yield f"{prefix}.w_in", (channels, hidden), "proj"
    yield f"{prefix}.b_in", (hidden,), "zero"
    yield f"{prefix}.w_dw", (hidden, 1, 3, 3), "proj"
    yield f"{prefix}.w_out", (hidden, channels), "proj"
    yield f"{prefix}.b_out", (channels,), "zero"


def _lewin_layout(prefix: str, channels: int, cfg: ModelConfig):
    for k in range(cfg.lewin_depth):
        yield from _block_layout(f"{prefix}.d{k}", channels, cfg.heads)


def parameter_layout(cfg: ModelConfig):
    """Yield (name, shape, init_tag) for every learnable parameter, in a
    fixed order. Checkpoint layout and RNG draw order both follow this."""
    c0 = cfg.base_channels
    alpha_shape = (EDGE_CHANNELS,) if cfg.per_kernel_alpha else ()
    yield "sobel.alpha", alpha_shape, "alpha"
    yield "input_proj.w", (c0, 1, 3, 3), "conv"
    yield "input_proj.b", (c0,), "zero"
    for s in range(cfg.stages):
        c = cfg.stage_channels(s)
        yield from _lewin_layout(f"enc{s}.lewin", c, cfg)
        yield f"enc{s}.conv1.w", (c, c + EDGE_CHANNELS, 3, 3), "conv"
        yield f"enc{s}.conv1.b", (c,), "zero"
        yield f"enc{s}.conv2.w", (c, c, 3, 3), "conv"
        yield f"enc{s}.conv2.b", (c,), "zero"
        yield f"enc{s}.down.w", (2 * c, c, 3, 3), "conv"
        yield f"enc{s}.down.b", (2 * c,), "zero"
    cb = cfg.stage_channels(cfg.stages)
    yield from _lewin_layout("bottleneck.lewin", cb, cfg)
    for s in range(cfg.stages):
        cin = cfg.stage_channels(cfg.stages - s)
        c = cin // 2
        yield f"dec{s}.up.w", (cin, c, 4, 4), "tconv"
        yield f"dec{s}.up.b", (c,), "zero"
        extra = c if cfg.unet_skips else 0
        yield f"dec{s}.conv1.w", (c, c + EDGE_CHANNELS + extra, 3, 3), "conv"
        yield f"dec{s}.conv1.b", (c,), "zero"
        yield f"dec{s}.conv2.w", (c, c, 3, 3), "conv"
        yield f"dec{s}.conv2.b", (c,), "zero"
        yield from _lewin_layout(f"dec{s}.lewin", c, cfg)
    yield "output_proj.w", (1, c0, 3, 3), "conv_out"
    yield "output_proj.b", (1,), "zero"


def parameter_count(cfg: ModelConfig) -> int:
    """Total learnable scalars; a pure function of the config."""
    return sum(int(np.prod(shape, dtype=np.int64)) if shape else 1
               for _, shape, _ in parameter_layout(cfg))


def _init_array(shape, tag: str, rng: np.random.Generator) -> np.ndarray:
    if tag == "alpha":
        return np.full(shape, 2.0) if shape else np.asarray(2.0)
    if tag == "zero":
        return np.zeros(shape)
    if tag == "one":
        return np.ones(shape)
    if tag == "proj":
        return rng.normal(0.0, 0.02, size=shape)
    if tag == "conv":
        fan_in = shape[1] * shape[2] * shape[3]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if tag == "tconv":
        # each output pixel collects k^2 / s^2 taps
        fan_in = shape[0] * shape[2] * shape[3] // 4
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if tag == "conv_out":
        # small but nonzero: keeps the residual near zero at the start
        # without starving upstream layers of gradient
        return rng.normal(0.0, 0.02, size=shape)
    raise ValueError(f"unknown init tag {tag!r}")


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, tag in parameter_layout(cfg):
        store.add(name, Tensor(_init_array(shape, tag, rng), requires_grad=True))
    return store


def _block_params(store: ParamStore, prefix: str, heads: int) -> LeWinBlockParams:
    return LeWinBlockParams(
        wq=[store[f"{prefix}.wq{h}"] for h in range(heads)],
        wk=[store[f"{prefix}.wk{h}"] for h in range(heads)],
        wv=[store[f"{prefix}.wv{h}"] for h in range(heads)],
        wo=store[f"{prefix}.wo"],
        bo=store[f"{prefix}.bo"],
        norm1_gamma=store[f"{prefix}.norm1.gamma"],
        norm1_beta=store[f"{prefix}.norm1.beta"],
        norm2_gamma=store[f"{prefix}.norm2.gamma"],
        norm2_beta=store[f"{prefix}.norm2.beta"],
        w_in=store[f"{prefix}.w_in"],
        b_in=store[f"{prefix}.b_in"],
        w_dw=store[f"{prefix}.w_dw"],
        w_out=store[f"{prefix}.w_out"],
        b_out=store[f"{prefix}.b_out"],
    )


def _run_lewin(x: Tensor, store: ParamStore, prefix: str, cfg: ModelConfig,
               channels: int) -> Tensor:
    # all depth pairs share one partition/reverse round trip
    spec = WindowSpec(window=cfg.window, heads=cfg.heads, channels=channels)
    h, w = x.data.shape[2], x.data.shape[3]
    tokens = window_partition(x, cfg.window)
    for k in range(cfg.lewin_depth):
        tokens = lewin_pair_tokens(
            tokens, _block_params(store, f"{prefix}.d{k}", cfg.heads), spec)
    return window_reverse(tokens, cfg.window, h, w)


# fixed 3x3 average used to carry the edge map down the resolution pyramid
_AVG_DOWN = Tensor(np.full((EDGE_CHANNELS, 1, 3, 3), 1.0 / 9.0))


def _downsample_edges(s: Tensor) -> Tensor:
    return depthwise_conv2d(s, _AVG_DOWN, stride=2, padding=1)


def sobel_set(store: ParamStore, cfg: ModelConfig) -> SobelKernelSet:
    return SobelKernelSet(alpha=store["sobel.alpha"], per_kernel=cfg.per_kernel_alpha)


def _validate_input(x: Tensor, cfg: ModelConfig) -> None:
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise DimensionError(f"expected Bx1xHxW input, got {x.data.shape}")
    h, w = x.data.shape[2], x.data.shape[3]
    d = cfg.size_divisor
    if h % d or w % d:
        valid = ", ".join(str(d * m) for m in range(1, 5))
        raise ConfigError(
            f"input {h}x{w} does not window cleanly: H and W must be "
            f"multiples of {d} (e.g. {valid}, ...) for window {cfg.window} "
            f"and {cfg.stages} stages"
        )


def forward(x: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Network output map: residual R(x) in residual mode, the denoised
    estimate F(x) in deterministic mode. Shape Bx1xHxW either way."""
    _validate_input(x, cfg)
    if x.data.size and (x.data.min() < 0.0 or x.data.max() > 1.0):
        import warnings

        warnings.warn("input pixels outside [0, 1]", RuntimeWarning, stacklevel=2)

    edge_pyramid = [edge_forward(x, sobel_set(store, cfg))]
    for _ in range(cfg.stages - 1):
        edge_pyramid.append(_downsample_edges(edge_pyramid[-1]))

    f = gelu(conv2d(x, store["input_proj.w"], store["input_proj.b"], 1, 1))
    skips = []
    for s in range(cfg.stages):
        c = cfg.stage_channels(s)
        t = _run_lewin(f, store, f"enc{s}.lewin", cfg, c)
        u = concat_channels(t, edge_pyramid[s])
        u = gelu(conv2d(u, store[f"enc{s}.conv1.w"], store[f"enc{s}.conv1.b"], 1, 1))
        u = gelu(conv2d(u, store[f"enc{s}.conv2.w"], store[f"enc{s}.conv2.b"], 1, 1))
        skips.append(u)
        f = conv2d(u, store[f"enc{s}.down.w"], store[f"enc{s}.down.b"], 2, 1)

    f = _run_lewin(f, store, "bottleneck.lewin", cfg, cfg.stage_channels(cfg.stages))

    for s in range(cfg.stages):
        level = cfg.stages - 1 - s
        c = cfg.stage_channels(level)
        f = conv_transpose2d(f, store[f"dec{s}.up.w"], store[f"dec{s}.up.b"], 2, 1)
        g = concat_channels(f, edge_pyramid[level])
        if cfg.unet_skips:
            g = concat_channels(g, skips[level])
        g = gelu(conv2d(g, store[f"dec{s}.conv1.w"], store[f"dec{s}.conv1.b"], 1, 1))
        g = gelu(conv2d(g, store[f"dec{s}.conv2.w"], store[f"dec{s}.conv2.b"], 1, 1))
        f = _run_lewin(g, store, f"dec{s}.lewin", cfg, c)

    return conv2d(f, store["output_proj.w"], store["output_proj.b"], 1, 1)


def predict(x: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Denoised estimate as a graph node (pre-clamp): x - R(x) in residual
    mode, F(x) in deterministic mode. This is the quantity the loss sees."""
    out = forward(x, store, cfg)
    if cfg.mode == "residual":
        return sub(x, out)
    return out


def denoise(x: Tensor, store: ParamStore, cfg: ModelConfig,
            clamp: bool = True) -> Tensor:
    """Denoised image for export; clamped to [0, 1] unless clamp=False."""
    y = predict(x, store, cfg)
    if clamp:
        return Tensor(np.clip(y.data, 0.0, 1.0))
    return y
