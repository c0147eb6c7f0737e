"""Functional U-Net whose parameters come from a flat weight vector.

The network holds no state. Every parameter is described by a
:class:`ParamLayout` entry, so a flat vector (for instance the output of a
hypernetwork) can be sliced into the shaped tensors each layer expects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import torch
import torch.nn.functional as F

ROLES = ("conv-weight", "conv-bias", "norm-scale", "norm-shift")
NORM_EPS = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    dim: int = 3
    levels: int = 4
    blocks_per_level: int = 3
    base_channels: int = 8
    num_classes: int = 4
    kernel_size: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.blocks_per_level < 1:
            raise ValueError("blocks_per_level must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")

    @property
    def divisor(self) -> int:
        """Spatial sizes must be multiples of this value."""
        return 2 ** (self.levels - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    role: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ParamLayout:
    entries: tuple[LayoutEntry, ...]
    total: int
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {e.name: e for e in self.entries})

    def __iter__(self) -> Iterator[LayoutEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> LayoutEntry:
        return self._index[name]


def _conv_blocks(config: UNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) of every normalized conv block,
    in forward execution order."""
    k = config.kernel_size
    blocks = []
    in_ch = config.in_channels
    for level in range(config.levels):
        out_ch = config.channels(level)
        stage = "bottleneck" if level == config.levels - 1 else f"enc{level}"
        for b in range(config.blocks_per_level):
            blocks.append((f"{stage}.conv{b}", in_ch, out_ch, k))
            in_ch = out_ch
    for level in range(config.levels - 2, -1, -1):
        out_ch = config.channels(level)
        blocks.append((f"dec{level}.up", config.channels(level + 1), out_ch, k))
        in_ch = 2 * out_ch
        for b in range(config.blocks_per_level):
            blocks.append((f"dec{level}.conv{b}", in_ch, out_ch, k))
            in_ch = out_ch
    return blocks


def param_layout(config: UNetConfig) -> ParamLayout:
    """Ordered manifest of every U-Net parameter.

    Order: encoder shallow to deep, bottleneck, decoder deep to shallow, head.
    Each conv block contributes weight, bias, norm scale and norm shift.
    """
    entries = []
    offset = 0

    def add(name, role, shape):
        nonlocal offset
        entry = LayoutEntry(name, role, tuple(shape), offset)
        entries.append(entry)
        offset = entry.stop

    spatial = (config.kernel_size,) * config.dim
    for name, cin, cout, _ in _conv_blocks(config):
        add(f"{name}.weight", "conv-weight", (cout, cin, *spatial))
        add(f"{name}.bias", "conv-bias", (cout,))
        add(f"{name}.norm.scale", "norm-scale", (cout,))
        add(f"{name}.norm.shift", "norm-shift", (cout,))
    c0 = config.channels(0)
    add("head.weight", "conv-weight", (config.num_classes, c0, *(1,) * config.dim))
    add("head.bias", "conv-bias", (config.num_classes,))
    return ParamLayout(tuple(entries), offset)


def param_count(config: UNetConfig) -> int:
    return param_layout(config).total


def dispatch(weights: torch.Tensor, layout: ParamLayout) -> dict[str, torch.Tensor]:
    """Slice a flat weight vector into shaped per-layer tensors (views)."""
    if weights.ndim != 1 or weights.shape[0] != layout.total:
        raise ValueError(
            f"weight vector length mismatch: expected {layout.total}, got "
            f"{tuple(weights.shape)}"
        )
    return {
        e.name: weights[e.offset : e.stop].view(e.shape) for e in layout.entries
    }


def flatten(params: dict[str, torch.Tensor], layout: ParamLayout) -> torch.Tensor:
    """Inverse of :func:`dispatch`."""
    parts = []
    for e in layout.entries:
        t = params[e.name]
        if tuple(t.shape) != e.shape:
            raise ValueError(f"{e.name}: expected shape {e.shape}, got {tuple(t.shape)}")
        parts.append(t.reshape(-1))
    return torch.cat(parts)


class _Conv3dSame(torch.autograd.Function):
    """Stride-1 'same' 3-D convolution on oneDNN with a matmul weight gradient.

    The stock CPU path for 3-D convolutions in float32 falls back to a slow
    unfolded kernel, mostly in the backward pass; this is ~4x faster.
    """

    @staticmethod
    def forward(ctx, x, weight, bias):
        k = weight.shape[-1]
        ctx.save_for_backward(x, weight)
        return torch.ops.aten.mkldnn_convolution(
            x.contiguous(), weight.contiguous(), bias.contiguous(),
            [k // 2] * 3, [1] * 3, [1] * 3, 1,
        )

    @staticmethod
    def backward(ctx, grad_out):
        x, weight = ctx.saved_tensors
        k = weight.shape[-1]
        grad_out = grad_out.contiguous()
        grad_x = grad_w = grad_b = None
        if ctx.needs_input_grad[0]:
            flipped = weight.flip((2, 3, 4)).transpose(0, 1).contiguous()
            grad_x = torch.ops.aten.mkldnn_convolution(
                grad_out, flipped, None, [k // 2] * 3, [1] * 3, [1] * 3, 1
            )
        if ctx.needs_input_grad[1]:
            grad_w = _conv3d_weight_grad(x, grad_out, k)
        if ctx.needs_input_grad[2]:
            grad_b = grad_out.sum((0, 2, 3, 4))
        return grad_x, grad_w, grad_b


def _conv3d_weight_grad(x, grad_out, k):
    p = k // 2
    n, cin, d, h, w = x.shape
    cout = grad_out.shape[1]
    xp = F.pad(x, (p,) * 6)
    # (cout, n*d*h*w) against each shifted copy of the input
    g = grad_out.transpose(0, 1).reshape(cout, -1)
    out = x.new_empty(cout, cin, k, k, k)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                shifted = xp[:, :, a : a + d, b : b + h, c : c + w]
                out[:, :, a, b, c] = g @ shifted.transpose(0, 1).reshape(cin, -1).T
    return out


def _conv3d(x, weight, bias, padding="same"):
    if (
        x.dtype == torch.float32
        and x.device.type == "cpu"
        and weight.shape[-1] > 1
        and torch.backends.mkldnn.is_available()
    ):
        return _Conv3dSame.apply(x, weight, bias)
    return F.conv3d(x, weight, bias, padding=padding)


def _ops(dim: int):
    if dim == 2:
        return F.conv2d, F.max_pool2d
    return _conv3d, F.max_pool3d


def _check_shape(x: torch.Tensor, config: UNetConfig) -> None:
    if x.ndim != config.dim + 2:
        raise ValueError(
            f"expected input of shape (N, C, *spatial) with {config.dim} spatial "
            f"axes, got {tuple(x.shape)}"
        )
    bad = [s for s in x.shape[2:] if s % config.divisor]
    if bad:
        raise ValueError(
            f"spatial shape {tuple(x.shape[2:])} is not divisible by "
            f"{config.divisor}; pad the input with volume.pad_to_multiple first"
        )


def _block(x, params, name, conv):
    x = conv(x, params[f"{name}.weight"], params[f"{name}.bias"], padding="same")
    # the aten op directly: F.instance_norm refuses single-voxel feature maps,
    # for which normalization is well defined (output = shift)
    return torch.instance_norm(
        x, params[f"{name}.norm.scale"], params[f"{name}.norm.shift"], None, None,
        True, 0.0, NORM_EPS, torch.backends.cudnn.enabled,
    )


def unet_forward(
    image: torch.Tensor,
    params: dict[str, torch.Tensor],
    config: UNetConfig,
    taps: dict[str, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Run the U-Net on ``image`` (N, C, *spatial) and return raw logits.

    If ``taps`` is a dict, the output of every convolution (after instance
    normalization) and every ReLU is stored in it under
    ``"<block>.conv"`` / ``"<block>.relu"``, in execution order.
    """
    _check_shape(image, config)
    conv, pool = _ops(config.dim)
    blocks = iter(_conv_blocks(config))

    def run_block(x):
        name = next(blocks)[0]
        x = _block(x, params, name, conv)
        if taps is not None:
            taps[f"{name}.conv"] = x
        x = F.relu(x)
        if taps is not None:
            taps[f"{name}.relu"] = x
        return x

    x = image
    skips = []
    for level in range(config.levels):
        if level > 0:
            x = pool(x, 2)
        for _ in range(config.blocks_per_level):
            x = run_block(x)
        skips.append(x)
    for level in range(config.levels - 2, -1, -1):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = run_block(x)
        x = torch.cat([x, skips[level]], dim=1)
        for _ in range(config.blocks_per_level):
            x = run_block(x)
    return conv(x, params["head.weight"], params["head.bias"])


def layer_names(config: UNetConfig) -> list[str]:
    """Names of all tappable activations in forward order."""
    names = []
    for name, *_ in _conv_blocks(config):
        names += [f"{name}.conv", f"{name}.relu"]
    return names


def layer_level(name: str, config: UNetConfig) -> int:
    """Resolution level (0 = full resolution) of a tapped activation."""
    stage = name.split(".")[0]
    if stage == "bottleneck":
        return config.levels - 1
    return int(stage[3:])


def layer_channels(name: str, config: UNetConfig) -> int:
    return config.channels(layer_level(name, config))


def init_weights(config: UNetConfig, generator: torch.Generator | None = None,
                 dtype=torch.float32) -> torch.Tensor:
    """Conventional fan-in scaled initialization of a flat weight vector.

    Conv weights ~ N(0, 2/fan_in), biases and norm shifts 0, norm scales 1.
    """
    layout = param_layout(config)
    w = torch.empty(layout.total, dtype=dtype)
    for e in layout:
        chunk = w[e.offset : e.stop]
        if e.role == "conv-weight":
            chunk.normal_(0.0, fan_in_std(e.shape), generator=generator)
        elif e.role == "norm-scale":
            chunk.fill_(1.0)
        else:
            chunk.zero_()
    return w


def fan_in_std(shape: tuple[int, ...]) -> float:
    fan_in = math.prod(shape[1:])
    return math.sqrt(2.0 / fan_in)
