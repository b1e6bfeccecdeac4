"""Building blocks shared by the NS U-Net, the score U-Net and the content/speaker encoders."""

import math

import torch
from torch import nn

# fixed affine map that brings log-Mel values (floor about -11.5) near unit range
MEL_SHIFT = 5.0
MEL_SCALE = 3.0


def normalize_mel(x):
    return (x + MEL_SHIFT) / MEL_SCALE


class FrameNorm(nn.Module):
    """Normalizes each time frame over (channels, freq) of a [B, C, F, T] tensor.

    Statistics never mix frames, so the layer commutes with time shifts.
    """

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(1, channels, 1, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1, 1))

    def forward(self, x):
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = (x - mean).pow(2).mean(dim=(1, 2), keepdim=True)
        return (x - mean) * torch.rsqrt(var + self.eps) * self.gamma + self.beta


class ResBlock2d(nn.Module):
    """Two 3x3 convolutions with a residual path and an optional per-channel conditioning bias."""

    def __init__(self, c_in, c_out, cond_dim=None, time_dilation=1):
        super().__init__()
        pad = (1, time_dilation)
        self.norm1 = FrameNorm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=pad, dilation=(1, time_dilation))
        self.norm2 = FrameNorm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=pad, dilation=(1, time_dilation))
        self.act = nn.SiLU()
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.cond = nn.Linear(cond_dim, c_out) if cond_dim else None

    def forward(self, x, cond=None):
        h = self.conv1(self.act(self.norm1(x)))
        if self.cond is not None:
            h = h + self.cond(cond)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class FreqDown(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, (4, 3), stride=(2, 1), padding=(1, 1))

    def forward(self, x):
        return self.conv(x)


class FreqUp(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.ConvTranspose2d(channels, channels, (4, 3), stride=(2, 1), padding=(1, 1))

    def forward(self, x):
        return self.conv(x)


def sinusoidal_embedding(t, dim, scale=1000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / max(half - 1, 1))
    args = scale * t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ConvPositional(nn.Module):
    """Depthwise temporal convolution added to a [B, T, D] sequence (relative position cue)."""

    def __init__(self, dim, kernel=5):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)

    def forward(self, x):
        return x + self.conv(x.transpose(1, 2)).transpose(1, 2)


def transformer(dim, layers, heads=4, ff_mult=2):
    layer = nn.TransformerEncoderLayer(
        dim,
        heads,
        dim_feedforward=ff_mult * dim,
        dropout=0.0,
        activation="gelu",
        batch_first=True,
        norm_first=True,
    )
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


def count_parameters(module) -> int:
    return sum(p.numel() for p in module.parameters())
