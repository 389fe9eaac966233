"""Shared network building blocks and training plumbing (PyTorch on CPU/GPU)."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns NaN/inf; carries the step it happened at."""


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def check_finite(loss: torch.Tensor, context: str) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDiverged(f"{context}: loss is {value}")
    return value


def state_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy().copy() for name, t in module.state_dict().items()}


def load_numpy_state(module: nn.Module, params: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.asarray(arr)) for name, arr in params.items()}
    module.load_state_dict(state)


def pad_to(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Zero-pad the last two dims symmetrically up to (height, width)."""
    dh = height - x.shape[-2]
    dw = width - x.shape[-1]
    if dh < 0 or dw < 0:
        raise ValueError(f"input {tuple(x.shape[-2:])} larger than pad target ({height}, {width})")
    return F.pad(x, (dw // 2, dw - dw // 2, dh // 2, dh - dh // 2))


def crop_to(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of pad_to: crop the centered (height, width) region."""
    dh = x.shape[-2] - height
    dw = x.shape[-1] - width
    return x[..., dh // 2 : dh // 2 + height, dw // 2 : dw // 2 + width]


class _DownBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)
        self.norm = nn.BatchNorm2d(c_out)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class _UpBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1)
        self.norm = nn.BatchNorm2d(c_out)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class UNet2d(nn.Module):
    """Encoder-decoder with skip connections; each depth halves height and width.

    Input height/width must be divisible by 2**depth. ``out_activation`` is
    'sigmoid' for rolls and 'softplus' for non-negative spectrograms.
    """

    def __init__(
        self,
        depth: int = 5,
        base_channels: int = 16,
        max_channels: int = 256,
        in_channels: int = 1,
        out_channels: int = 1,
        out_activation: str = "sigmoid",
    ):
        super().__init__()
        if out_activation not in ("sigmoid", "softplus"):
            raise ValueError(f"unknown out_activation {out_activation!r}")
        self.depth = depth
        self.out_activation = out_activation
        widths = [min(base_channels * 2**i, max_channels) for i in range(depth)]
        self.downs = nn.ModuleList()
        c_prev = in_channels
        for w in widths:
            self.downs.append(_DownBlock(c_prev, w))
            c_prev = w
        self.ups = nn.ModuleList()
        for i in reversed(range(depth)):
            c_skip = widths[i - 1] if i > 0 else 0
            c_out = widths[i - 1] if i > 0 else base_channels
            self.ups.append(_UpBlock(c_prev, c_out))
            c_prev = c_out + c_skip
        self.head = nn.Conv2d(base_channels, out_channels, 3, padding=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2**self.depth or w % 2**self.depth:
            raise ValueError(
                f"spatial size {(h, w)} not divisible by 2**{self.depth}"
            )
        skips = []
        for down in self.downs:
            skips.append(x)
            x = down(x)
        for i, up in enumerate(self.ups):
            x = up(x)
            skip = skips[-(i + 1)]
            if i + 1 < self.depth:
                x = torch.cat([x, skip], dim=1)
        x = self.head(x)
        if self.out_activation == "sigmoid":
            return torch.sigmoid(x)
        return F.softplus(x)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
