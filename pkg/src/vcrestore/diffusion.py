"""Score-based Mel decoder: forward process, noise-prediction loss, CFG training and reverse sampling.

The forward process drifts the clean Mel towards the coarse content
spectrogram ``mhat``::

    M_t = mhat + (M_0 - mhat) * exp(-B(t)/2) + sqrt(1 - exp(-B(t))) * eps

with B(t) the integral of a linear beta schedule. The network output
``s_theta`` is trained to equal ``-eps``; the score used by the sampler is
``s_theta / sqrt(1 - exp(-B(t)))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import normalize_mel, sinusoidal_embedding
from .signal import N_MELS, MelSpectrogram

ALPHA = 0.1
P_UNCOND = 0.1


@dataclass(frozen=True)
class DiffusionSchedule:
    beta0: float = 0.05
    beta1: float = 20.0
    t_min: float = 1e-4

    def __post_init__(self):
        if not self.beta1 > self.beta0 > 0:
            raise ValueError("need beta1 > beta0 > 0")

    def beta(self, t):
        return self.beta0 + (self.beta1 - self.beta0) * t

    def integral(self, t):
        """B(t) = beta0 t + (beta1 - beta0) t^2 / 2."""
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t

    def variance(self, t):
        """Noise variance at time t: 1 - exp(-B(t))."""
        if isinstance(t, torch.Tensor):
            return -torch.expm1(-self.integral(t))
        return -np.expm1(-self.integral(t))

    def mean_coeff(self, t):
        if isinstance(t, torch.Tensor):
            return torch.exp(-0.5 * self.integral(t))
        return np.exp(-0.5 * self.integral(t))


DEFAULT_SCHEDULE = DiffusionSchedule()


def _bcast(t, like):
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(m0, mhat, t, noise, schedule: DiffusionSchedule = DEFAULT_SCHEDULE):
    """Sample M_t given the clean Mel, the prior centre and a standard-normal draw.

    Returns (M_t, noise) so the exact eps used can feed the loss.
    """
    if isinstance(t, torch.Tensor):
        if torch.any(t <= 0) or torch.any(t > 1):
            raise ValueError("t must lie in (0, 1]")
        tb = _bcast(t.to(m0.dtype), m0)
        sqrt_var = torch.sqrt(schedule.variance(tb))
    else:
        if not 0 < t <= 1:
            raise ValueError("t must lie in (0, 1]")
        tb = t
        sqrt_var = math.sqrt(schedule.variance(t))
    if m0.shape != mhat.shape or noise.shape != m0.shape:
        raise ValueError("m0, mhat and noise must share a shape")
    mt = mhat + (m0 - mhat) * schedule.mean_coeff(tb) + sqrt_var * noise
    return mt, noise


class ResBlock1d(nn.Module):
    def __init__(self, c_in, c_out, cond_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.cond = nn.Linear(cond_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.act = nn.SiLU()
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, cond):
        h = self.conv1(self.act(self.norm1(x))) + self.cond(cond)[:, :, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


@dataclass
class ScoreConfig:
    n_mels: int = N_MELS
    channels: tuple = (128, 160, 192)
    spk_dim: int = 128
    cond_dim: int = 128
    # spread of the clean Mel around the coarse prior centre, used by the analytic skip term
    prior_std: float = 0.8

    def __post_init__(self):
        self.channels = tuple(self.channels)


class ScoreNet(nn.Module):
    """Temporal U-Net predicting -eps from (M_t, t | mhat, s).

    Conditioning signals come with presence masks; a dropped signal is zeroed
    and its mask bit tells the network it is absent.

    The output is an analytic skip term plus a learned residual. The skip is
    the exact noise predictor when M_0 ~ N(mhat, prior_std^2 I), so an
    untrained residual already yields a stable reverse process. The skip is
    only applied where mhat is present.
    """

    def __init__(self, config: ScoreConfig | None = None, schedule: DiffusionSchedule | None = None):
        super().__init__()
        self.config = c = config or ScoreConfig()
        self.schedule = schedule or DEFAULT_SCHEDULE
        ch = c.channels
        self.time_mlp = nn.Sequential(nn.Linear(64, c.cond_dim), nn.SiLU(), nn.Linear(c.cond_dim, c.cond_dim))
        self.spk_mlp = nn.Sequential(nn.Linear(c.spk_dim + 1, c.cond_dim), nn.SiLU(), nn.Linear(c.cond_dim, c.cond_dim))
        self.inp = nn.Conv1d(2 * c.n_mels + 1, ch[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = ch[0]
        for i, cc in enumerate(ch):
            self.enc.append(ResBlock1d(prev, cc, c.cond_dim))
            prev = cc
            if i < len(ch) - 1:
                self.down.append(nn.Conv1d(cc, cc, 4, stride=2, padding=1))
        self.mid = nn.ModuleList([ResBlock1d(prev, prev, c.cond_dim), ResBlock1d(prev, prev, c.cond_dim)])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i, cc in enumerate(reversed(ch)):
            self.dec.append(ResBlock1d(prev + cc, cc, c.cond_dim))
            prev = cc
            if i < len(ch) - 1:
                nxt = ch[len(ch) - 2 - i]
                self.up.append(nn.ConvTranspose1d(cc, nxt, 4, stride=2, padding=1))
                prev = nxt
        self.out = nn.Sequential(nn.GroupNorm(8, prev), nn.SiLU(), nn.Conv1d(prev, c.n_mels, 3, padding=1))
        nn.init.zeros_(self.out[-1].weight)
        nn.init.zeros_(self.out[-1].bias)

    @property
    def multiple(self):
        return 2 ** (len(self.config.channels) - 1)

    def gaussian_skip(self, mt, t, mhat):
        """-E[eps | M_t] under a Gaussian clean-Mel prior centred at mhat."""
        tb = _bcast(t.to(mt.dtype), mt)
        var = self.schedule.variance(tb)
        decay = 1.0 - var  # exp(-B(t))
        return -torch.sqrt(var) * (mt - mhat) / (self.config.prior_std**2 * decay + var)

    def forward(self, mt, t, mhat, spk, mhat_mask=None, spk_mask=None):
        B, T, _ = mt.shape
        if mhat_mask is None:
            mhat_mask = mt.new_ones(B)
        if spk_mask is None:
            spk_mask = mt.new_ones(B)
        mhat_mask = mhat_mask.to(mt.dtype)
        spk_mask = spk_mask.to(mt.dtype)
        cond = self.time_mlp(sinusoidal_embedding(t.to(mt.dtype), 64))
        cond = cond + self.spk_mlp(torch.cat([spk * spk_mask[:, None], spk_mask[:, None]], dim=1))
        x = torch.cat(
            [
                normalize_mel(mt),
                normalize_mel(mhat) * mhat_mask[:, None, None],
                mhat_mask[:, None, None].expand(B, T, 1),
            ],
            dim=2,
        ).transpose(1, 2)
        pad = (-T) % self.multiple
        if pad:
            x = nn.functional.pad(x, (0, pad))
        h = self.inp(x)
        skips = []
        for i, block in enumerate(self.enc):
            h = block(h, cond)
            skips.append(h)
            if i < len(self.down):
                h = self.down[i](h)
        for block in self.mid:
            h = block(h, cond)
        for i, block in enumerate(self.dec):
            h = block(torch.cat([h, skips.pop()], dim=1), cond)
            if i < len(self.up):
                h = self.up[i](h)
        residual = self.out(h)[:, :, :T].transpose(1, 2)
        return residual + self.gaussian_skip(mt, t, mhat) * mhat_mask[:, None, None]


def cfg_masks(batch, p_uncond=P_UNCOND, generator=None, device=None):
    """Independent keep-masks for the content and speaker conditions (1 = kept)."""
    u = torch.rand(2, batch, generator=generator, device=device)
    return (u[0] >= p_uncond).float(), (u[1] >= p_uncond).float()


def diffusion_loss(
    model,
    m0,
    mhat,
    spk,
    generator=None,
    schedule: DiffusionSchedule = DEFAULT_SCHEDULE,
    p_uncond=P_UNCOND,
    t=None,
    noise=None,
    masks=None,
):
    """||s_theta(M_t, t | mhat, s) + eps||^2 summed over Mel elements, averaged over the batch.

    ``t``, ``noise`` and ``masks`` are drawn from ``generator`` unless given.
    """
    B = m0.shape[0]
    if t is None:
        u = torch.rand(B, generator=generator, dtype=m0.dtype)
        t = 1.0 - (1.0 - schedule.t_min) * u  # (t_min, 1]
    if noise is None:
        noise = torch.randn(m0.shape, generator=generator, dtype=m0.dtype)
    if masks is None:
        masks = cfg_masks(B, p_uncond, generator)
    mhat_mask, spk_mask = masks
    mt, eps = forward_diffuse(m0, mhat, t, noise, schedule)
    pred = model(mt, t, mhat, spk, mhat_mask, spk_mask)
    loss = (pred + eps).pow(2).sum(dim=tuple(range(1, m0.ndim))).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"diffusion loss is {loss.item()}")
    return loss


def total_loss(mode, l_d, l_enc, l_nr=None, alpha=ALPHA):
    """Weighted objective: clean stage L_d + a L_enc; adapt stage L_d + a (L_enc + L_nr)."""
    if mode == "clean_stage":
        return l_d + alpha * l_enc
    if mode == "adapt_stage":
        if l_nr is None:
            raise ValueError("adapt_stage needs l_nr")
        return l_d + alpha * (l_enc + l_nr)
    raise ValueError(f"unknown mode {mode!r}")


def guided_prediction(model, x, t, mhat, spk, guidance_w):
    """(1 + w) * conditional - w * unconditional network output."""
    B = x.shape[0]
    ones = x.new_ones(B)
    if guidance_w == 0:
        return model(x, t, mhat, spk, ones, ones)
    zeros = x.new_zeros(B)
    out = model(
        torch.cat([x, x]),
        torch.cat([t, t]),
        torch.cat([mhat, mhat]),
        torch.cat([spk, spk]),
        torch.cat([ones, zeros]),
        torch.cat([ones, zeros]),
    )
    cond, uncond = out[:B], out[B:]
    return (1 + guidance_w) * cond - guidance_w * uncond


@torch.no_grad()
def reverse_sample_tensor(
    model,
    mhat,
    spk,
    steps=30,
    guidance_w=1.0,
    generator=None,
    schedule: DiffusionSchedule = DEFAULT_SCHEDULE,
    x_init=None,
):
    """Euler-Maruyama integration of the reverse SDE from t=1 to t=0.

    Starts at ``mhat + N(0, I)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = mhat + torch.randn(mhat.shape, generator=generator, dtype=mhat.dtype) if x_init is None else x_init
    h = 1.0 / steps
    B = mhat.shape[0]
    for i in range(steps):
        t_val = 1.0 - (i + 0.5) * h
        t = torch.full((B,), t_val, dtype=mhat.dtype)
        beta = schedule.beta(t_val)
        score = guided_prediction(model, x, t, mhat, spk, guidance_w) / math.sqrt(schedule.variance(t_val))
        drift = (0.5 * (mhat - x) - score) * beta * h
        x = x - drift + math.sqrt(beta * h) * torch.randn(x.shape, generator=generator, dtype=x.dtype)
        if not torch.all(torch.isfinite(x)):
            raise FloatingPointError(f"reverse sampler diverged at step {i}")
    return x


def reverse_sample(model, mhat: MelSpectrogram, spk, steps=30, guidance_w=1.0, seed=0,
                   schedule: DiffusionSchedule = DEFAULT_SCHEDULE) -> MelSpectrogram:
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(int(seed))
    vec = getattr(spk, "vector", spk)
    out = reverse_sample_tensor(
        model,
        torch.as_tensor(mhat.values, dtype=dtype)[None],
        torch.as_tensor(np.asarray(vec), dtype=dtype)[None],
        steps,
        guidance_w,
        gen,
        schedule,
    )
    return MelSpectrogram(out[0].double().numpy(), mhat.frame_hop, mhat.sample_rate)
