"""MLP mapping voxel spacing (mm) to a complete U-Net weight vector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .segnet import UNetConfig, fan_in_std, init_weights, param_count, param_layout

OUTPUT_BOUND = 5.0


@dataclass(frozen=True)
class HyperNetConfig:
    input_dim: int = 3
    hidden_layers: int = 3
    hidden_width: int = 64
    output_dim: int | None = None
    final_scale: float = 0.01
    # fixed multiplier on the head pre-activation; sets how far one optimiser
    # step moves the generated weights
    head_gain: float = 0.1
    # affine input normalisation (off by default: spacing is fed raw in mm)
    input_shift: float = 0.0
    input_scale: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bounded_tanh(x: torch.Tensor) -> torch.Tensor:
    """5 tanh(x), kept strictly inside (-5, 5) even where tanh rounds to 1."""
    limit = torch.nextafter(torch.tensor(OUTPUT_BOUND, dtype=x.dtype), torch.tensor(0.0, dtype=x.dtype))
    return (torch.tanh(x) * OUTPUT_BOUND).clamp(-limit.item(), limit.item())


class HyperNet(nn.Module):
    """Spacing r -> flat weight vector eta for one U-Net configuration.

    All trainable state (the MLP weights) lives in this module; nothing about
    the generated U-Net is stored.
    """

    def __init__(self, config: HyperNetConfig, unet: UNetConfig):
        super().__init__()
        p = param_count(unet)
        if config.output_dim is not None and config.output_dim != p:
            raise ValueError(
                f"hypernetwork output_dim {config.output_dim} does not match the U-Net "
                f"parameter count {p}"
            )
        if config.input_dim != unet.dim:
            raise ValueError(f"input_dim {config.input_dim} != U-Net dim {unet.dim}")
        self.config = config
        self.unet = unet
        self.output_dim = p
        widths = [config.input_dim] + [config.hidden_width] * config.hidden_layers
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.head = nn.Linear(widths[-1], p)

    def forward(self, spacing) -> torch.Tensor:
        r = torch.as_tensor(spacing, dtype=self.head.weight.dtype, device=self.head.weight.device)
        if r.shape != (self.config.input_dim,):
            raise ValueError(
                f"expected a spacing of length {self.config.input_dim}, got shape {tuple(r.shape)}"
            )
        return bounded_tanh(self.preactivation(r))

    def features(self, r: torch.Tensor) -> torch.Tensor:
        h = (r - self.config.input_shift) * self.config.input_scale
        for layer in self.hidden:
            h = torch.relu(layer(h))
        return h

    def preactivation(self, r: torch.Tensor) -> torch.Tensor:
        """g * (b + W h / width): with Adam every head entry moves by about
        the learning rate per step, and the 1/width factor stops the width
        contributions to one output from adding up to a far larger move."""
        h = self.features(r) / self.config.hidden_width
        return self.config.head_gain * self.head(h)


def hypernet_forward(net: HyperNet, spacing) -> torch.Tensor:
    return net(spacing)


def init_hypernet(config: HyperNetConfig, unet: UNetConfig, seed: int = 0,
                  dtype=torch.float32) -> HyperNet:
    """Build a hypernetwork whose initial output is a well-scaled U-Net.

    Hidden layers get He-normal weights and zero biases. The head's bias is
    the inverse bounded-tanh of a conventionally initialised U-Net, so eta(r)
    starts as that U-Net plus a small spacing-dependent perturbation. Head
    weight rows are drawn with std ``config.final_scale`` times the scale of
    the U-Net parameter they produce (fan-in std for conv weights, 1 for
    biases and norm parameters). A plain fan-in init of the head would make
    the perturbation the same size for every tensor, swamping the deep,
    wide layers whose target std is smallest.
    """
    gen = torch.Generator().manual_seed(seed)
    net = HyperNet(config, unet).to(dtype)
    with torch.no_grad():
        for layer in net.hidden:
            layer.weight.normal_(0.0, math.sqrt(2.0 / layer.in_features), generator=gen)
            layer.bias.zero_()
        g = config.head_gain
        h = net.features(torch.ones(config.input_dim, dtype=dtype)) / config.hidden_width
        h_norm = max(float(h.norm()), 1e-12)
        # eta ~ 5 g (W h)_j near zero, so std_j(W) = scale_j / (5 g |h|)
        net.head.weight.normal_(0.0, 1.0, generator=gen)
        std = config.final_scale * output_scales(unet) / (OUTPUT_BOUND * g * h_norm)
        net.head.weight.mul_(std.to(dtype)[:, None])
        target = init_weights(unet, generator=gen, dtype=torch.float64)
        limit = OUTPUT_BOUND * (1 - 1e-6)
        net.head.bias.copy_(torch.atanh(target.clamp(-limit, limit) / OUTPUT_BOUND) / g)
    return net


def output_scales(unet: UNetConfig) -> torch.Tensor:
    """Conventional magnitude of each U-Net parameter, used to scale the head."""
    scales = torch.ones(param_count(unet), dtype=torch.float64)
    for e in param_layout(unet):
        if e.role == "conv-weight":
            scales[e.offset : e.stop] = fan_in_std(e.shape)
    return scales


def tensor_stds(eta: torch.Tensor, unet: UNetConfig) -> dict[str, tuple[float, float]]:
    """(empirical std, fan-in std) of each generated conv weight tensor."""
    out = {}
    for e in param_layout(unet):
        if e.role == "conv-weight":
            chunk = eta[e.offset : e.stop].detach().double()
            out[e.name] = (float(chunk.std()), fan_in_std(e.shape))
    return out


def state_to_numpy(net: HyperNet) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
