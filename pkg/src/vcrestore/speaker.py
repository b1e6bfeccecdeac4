"""Speaker encoder: dilated temporal convolutions with mean/std pooling to a unit-norm embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import normalize_mel
from .signal import N_MELS, MelSpectrogram, Waveform, mel_analyze

MIN_REFERENCE_SECONDS = 1.0


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        norm = np.linalg.norm(v)
        if norm == 0 or not np.isfinite(norm):
            raise ValueError("degenerate speaker embedding")
        self.vector = v / norm

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


class SpeakerEncoder(nn.Module):
    def __init__(self, n_mels=N_MELS, hidden=128, dim=128, n_speakers=0):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(
            nn.Conv1d(n_mels, hidden, 5, padding=2),
            nn.SiLU(),
            nn.Conv1d(hidden, hidden, 5, padding=4, dilation=2),
            nn.SiLU(),
            nn.Conv1d(hidden, hidden, 3, padding=3, dilation=3),
            nn.SiLU(),
        )
        self.proj = nn.Linear(2 * hidden, dim)
        # cosine classifier used only for training
        self.classifier = nn.Parameter(torch.randn(max(n_speakers, 1), dim) * 0.1)
        self.n_speakers = n_speakers

    def forward(self, mel):
        """[B, T, n_mels] -> [B, dim] unit-norm embeddings."""
        h = self.net(normalize_mel(mel).transpose(1, 2))
        stats = torch.cat([h.mean(dim=2), h.std(dim=2, unbiased=False)], dim=1)
        return F.normalize(self.proj(stats), dim=1)

    def logits(self, emb, scale=16.0):
        return scale * emb @ F.normalize(self.classifier, dim=1).t()


def speaker_encode(encoder: SpeakerEncoder, ref) -> SpeakerEmbedding:
    """Embed a reference clip (waveform or Mel) of at least one second."""
    if isinstance(ref, Waveform):
        if ref.duration < MIN_REFERENCE_SECONDS:
            raise ValueError(f"reference too short ({ref.duration:.2f} s < {MIN_REFERENCE_SECONDS} s)")
        mel = mel_analyze(ref)
    else:
        mel = ref
        seconds = mel.n_frames * mel.frame_hop / mel.sample_rate
        if seconds < MIN_REFERENCE_SECONDS:
            raise ValueError(f"reference too short ({seconds:.2f} s < {MIN_REFERENCE_SECONDS} s)")
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        x = torch.as_tensor(mel.values, dtype=dtype)[None]
        v = encoder(x)[0]
    return SpeakerEmbedding(v.double().numpy())


def embed_mel(encoder: SpeakerEncoder, mel: MelSpectrogram) -> np.ndarray:
    """Embedding without the minimum-length check (for internal conditioning)."""
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        return encoder(torch.as_tensor(mel.values, dtype=dtype)[None])[0].double().numpy()
