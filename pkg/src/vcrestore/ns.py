"""Noise suppression stage: a ResU-Net that predicts an additive correction to the noisy log-Mel."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .layers import FreqDown, FreqUp, ResBlock2d, count_parameters, normalize_mel
from .signal import N_MELS, MelSpectrogram, Waveform, mel_analyze, mel_invert

log = logging.getLogger(__name__)


@dataclass
class NsConfig:
    channels: tuple = (8, 16, 24, 32)
    mel_bands: int = N_MELS
    lr: float = 2e-4

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.mel_bands != N_MELS:
            raise ValueError(f"NS model is fixed at {N_MELS} Mel bands")
        if self.mel_bands % (2 ** len(self.channels)):
            raise ValueError("mel_bands must be divisible by 2**depth")


class NsModel(nn.Module):
    """Fully convolutional ResU-Net over [freq, time]; pools only along frequency."""

    def __init__(self, config: NsConfig | None = None):
        super().__init__()
        self.config = config or NsConfig()
        ch = self.config.channels
        self.inp = nn.Conv2d(1, ch[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = ch[0]
        for c in ch:
            self.enc.append(ResBlock2d(prev, c))
            self.down.append(FreqDown(c))
            prev = c
        self.mid = nn.ModuleList([ResBlock2d(prev, prev, time_dilation=2), ResBlock2d(prev, prev)])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for c in reversed(ch):
            self.up.append(FreqUp(prev))
            self.dec.append(ResBlock2d(prev + c, c))
            prev = c
        self.head = nn.Conv2d(prev, 1, 1)

    def residual(self, mel):
        """Residual term for ``mel`` of shape [B, T, n_mels]."""
        x = normalize_mel(mel).transpose(1, 2).unsqueeze(1)  # [B, 1, F, T]
        h = self.inp(x)
        skips = []
        for block, down in zip(self.enc, self.down):
            h = block(h)
            skips.append(h)
            h = down(h)
        for block in self.mid:
            h = block(h)
        for up, block in zip(self.up, self.dec):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1))
        return self.head(h).squeeze(1).transpose(1, 2)

    def forward(self, mel):
        if mel.shape[-1] != self.config.mel_bands:
            raise ValueError(f"expected {self.config.mel_bands} Mel bands, got {mel.shape[-1]}")
        return mel + self.residual(mel)

    def zero_residual_head(self):
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        return self

    @property
    def n_parameters(self) -> int:
        return count_parameters(self)


def build_ns(config: NsConfig | None = None, seed: int = 0) -> NsModel:
    torch.manual_seed(seed)
    model = NsModel(config)
    log.debug("NS model with %d parameters", model.n_parameters)
    return model


def _as_tensor(mel, dtype=torch.float32):
    if isinstance(mel, MelSpectrogram):
        mel = mel.values
    t = torch.as_tensor(np.asarray(mel), dtype=dtype)
    return t.unsqueeze(0) if t.ndim == 2 else t


def ns_forward(model: NsModel, noisy_mel: MelSpectrogram) -> MelSpectrogram:
    if noisy_mel.n_mels != model.config.mel_bands:
        raise ValueError(f"expected {model.config.mel_bands} Mel bands, got {noisy_mel.n_mels}")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(_as_tensor(noisy_mel, dtype))[0]
    return MelSpectrogram(out.double().numpy(), noisy_mel.frame_hop, noisy_mel.sample_rate)


def ns_loss(model, noisy, clean):
    """Mean absolute error between the enhanced and clean log-Mel."""
    return (model(noisy) - clean).abs().mean()


@dataclass
class NsTrainState:
    model: NsModel
    optimizer: torch.optim.Optimizer
    step: int = 0
    rng_seed: int = 0
    history: list = field(default_factory=list)


def init_train_state(config: NsConfig | None = None, seed: int = 0) -> NsTrainState:
    model = build_ns(config, seed)
    opt = torch.optim.Adam(model.parameters(), lr=model.config.lr)
    return NsTrainState(model, opt, 0, seed)


def ns_train_step(state: NsTrainState, batch) -> tuple[NsTrainState, float]:
    """One Adam update on a (noisy_mel, clean_mel) batch of [B, T, n_mels] tensors."""
    noisy, clean = batch
    noisy, clean = _as_tensor(noisy), _as_tensor(clean)
    if noisy.shape != clean.shape:
        raise ValueError(f"unpaired batch: {tuple(noisy.shape)} vs {tuple(clean.shape)}")
    state.model.train()
    loss = ns_loss(state.model, noisy, clean)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"NS loss became {loss.item()} at step {state.step}")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    value = float(loss.item())
    state.history.append(value)
    return state, value


def ns_enhance(model: NsModel, noisy: Waveform, griffin_lim_iters: int = 32) -> tuple[Waveform, MelSpectrogram]:
    """Enhance a 16 kHz waveform; returns (waveform via Griffin-Lim, enhanced Mel)."""
    mel = mel_analyze(noisy)
    enhanced = ns_forward(model, mel)
    wav = mel_invert(enhanced, griffin_lim_iters, length=len(noisy))
    return wav, enhanced


def save_ns(path, state: NsTrainState, metadata=None):
    cfg = asdict(state.model.config)
    cfg["channels"] = list(cfg["channels"])
    return checkpoint.save(
        path,
        kind="ns",
        config=cfg,
        modules={"ns": state.model.state_dict()},
        optimizer=state.optimizer.state_dict(),
        step=state.step,
        seed=state.rng_seed,
        metadata=metadata or {},
    )


def load_ns(path) -> NsTrainState:
    ck = checkpoint.load(path, kind="ns")
    model = NsModel(NsConfig(**ck["config"]))
    model.load_state_dict(ck["modules"]["ns"])
    model.eval()
    opt = torch.optim.Adam(model.parameters(), lr=model.config.lr)
    if ck.get("optimizer"):
        opt.load_state_dict(ck["optimizer"])
    return NsTrainState(model, opt, ck["step"], ck["seed"])
