"""Content path: frame encoder, vector quantizer and transformer projection to a coarse Mel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import ConvPositional, normalize_mel, transformer
from .signal import N_MELS, MelSpectrogram


@dataclass
class ContentCodes:
    """Per-frame VQ indices with the pre-quantization features they came from."""

    indices: np.ndarray  # [frames] int
    features: np.ndarray  # [frames, d_c]
    codebook_size: int
    quantized: torch.Tensor | None = None  # [1, frames, d_c], what the projection consumes

    def __post_init__(self):
        if np.any(self.indices < 0) or np.any(self.indices >= self.codebook_size):
            raise ValueError("code index out of range")
        if len(self.indices) != len(self.features):
            raise ValueError("one index per frame required")


class FrameEncoder(nn.Module):
    """Convolutional front end followed by a small transformer (stand-in for a pretrained SSL encoder)."""

    def __init__(self, n_mels=N_MELS, dim=128, code_dim=64, layers=2):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv1d(n_mels, dim, 5, padding=2),
            nn.GELU(),
            nn.Conv1d(dim, dim, 5, padding=2),
            nn.GELU(),
        )
        self.pos = ConvPositional(dim)
        self.transformer = transformer(dim, layers)
        self.out = nn.Linear(dim, code_dim)

    def forward(self, mel):
        h = self.conv(normalize_mel(mel).transpose(1, 2)).transpose(1, 2)
        h = self.transformer(self.pos(h))
        return self.out(h)


class VectorQuantizer(nn.Module):
    """Nearest-neighbour codebook with EMA updates and a straight-through gradient."""

    def __init__(self, codebook_size=128, dim=64, decay=0.99, eps=1e-5):
        super().__init__()
        if codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")
        self.codebook_size = codebook_size
        self.dim = dim
        self.decay = decay
        self.eps = eps
        embed = torch.randn(codebook_size, dim) * 0.1
        self.register_buffer("embed", embed)
        self.register_buffer("cluster_size", torch.ones(codebook_size))
        self.register_buffer("embed_sum", embed.clone())
        self.register_buffer("usage_counts", torch.zeros(codebook_size, dtype=torch.long))

    def distances(self, x):
        flat = x.reshape(-1, self.dim)
        return (
            flat.pow(2).sum(1, keepdim=True)
            - 2 * flat @ self.embed.t().to(flat.dtype)
            + self.embed.pow(2).sum(1)[None, :].to(flat.dtype)
        )

    def nearest(self, x):
        return self.distances(x).argmin(dim=1).reshape(x.shape[:-1])

    def lookup(self, indices):
        return F.embedding(indices, self.embed)

    @torch.no_grad()
    def init_from_features(self, features, iters=20, generator=None):
        """k-means initialisation from a dump of encoder features [N, dim]."""
        feats = features.reshape(-1, self.dim).float()
        n = feats.shape[0]
        idx = torch.randperm(n, generator=generator)[: self.codebook_size]
        if len(idx) < self.codebook_size:
            idx = torch.randint(n, (self.codebook_size,), generator=generator)
        centers = feats[idx].clone()
        for _ in range(iters):
            assign = torch.cdist(feats, centers).argmin(1)
            sums = torch.zeros_like(centers).index_add_(0, assign, feats)
            counts = torch.bincount(assign, minlength=self.codebook_size).float()
            empty = counts == 0
            centers = torch.where(empty[:, None], centers, sums / counts.clamp(min=1)[:, None])
            if empty.any():
                centers[empty] = feats[torch.randint(n, (int(empty.sum()),), generator=generator)]
        self.embed.copy_(centers)
        self.embed_sum.copy_(centers)
        self.cluster_size.fill_(1.0)

    @torch.no_grad()
    def _ema_update(self, flat, indices, generator=None):
        onehot = F.one_hot(indices, self.codebook_size).to(flat.dtype)
        counts = onehot.sum(0)
        self.cluster_size.mul_(self.decay).add_(counts.to(self.cluster_size.dtype), alpha=1 - self.decay)
        self.embed_sum.mul_(self.decay).add_((onehot.t() @ flat).to(self.embed_sum.dtype), alpha=1 - self.decay)
        total = self.cluster_size.sum()
        smoothed = (self.cluster_size + self.eps) / (total + self.codebook_size * self.eps) * total
        self.embed.copy_(self.embed_sum / smoothed[:, None])
        # restart codes that have fallen out of use on random current features
        dead = self.cluster_size < 1e-2
        if dead.any():
            pick = torch.randint(flat.shape[0], (int(dead.sum()),), generator=generator)
            self.embed[dead] = flat[pick].to(self.embed.dtype)
            self.embed_sum[dead] = self.embed[dead]
            self.cluster_size[dead] = 1.0

    def forward(self, x, update=None, generator=None):
        """Returns (quantized with straight-through gradient, indices, commitment loss)."""
        if update is None:
            update = self.training
        indices = self.nearest(x.detach())
        flat_idx = indices.reshape(-1)
        if update:
            self._ema_update(x.detach().reshape(-1, self.dim), flat_idx, generator)
            self.usage_counts += torch.bincount(flat_idx, minlength=self.codebook_size)
        q = self.lookup(indices).to(x.dtype)
        commit = F.mse_loss(x, q.detach())
        return x + (q - x).detach(), indices, commit


class ContentProjector(nn.Module):
    """Transformer over code embeddings followed by a linear map to Mel bands."""

    def __init__(self, code_dim=64, dim=128, n_mels=N_MELS, layers=2):
        super().__init__()
        self.inp = nn.Linear(code_dim, dim)
        self.pos = ConvPositional(dim)
        self.transformer = transformer(dim, layers)
        self.proj = nn.Linear(dim, n_mels)

    def forward(self, q):
        return self.proj(self.transformer(self.pos(self.inp(q))))


@dataclass
class ContentConfig:
    n_mels: int = N_MELS
    dim: int = 128
    code_dim: int = 64
    codebook_size: int = 128
    encoder_layers: int = 2
    projector_layers: int = 2
    commitment: float = 0.25


class ContentPath(nn.Module):
    def __init__(self, config: ContentConfig | None = None):
        super().__init__()
        self.config = c = config or ContentConfig()
        self.encoder = FrameEncoder(c.n_mels, c.dim, c.code_dim, c.encoder_layers)
        self.vq = VectorQuantizer(c.codebook_size, c.code_dim)
        self.projector = ContentProjector(c.code_dim, c.dim, c.n_mels, c.projector_layers)
        self.use_vq = True

    def forward(self, mel, update_codebook=None, generator=None):
        """Returns (coarse Mel [B, T, n_mels], commitment loss, indices or None)."""
        feats = self.encoder(mel)
        if self.use_vq:
            q, indices, commit = self.vq(feats, update=update_codebook, generator=generator)
        else:
            q, indices, commit = feats, None, feats.new_zeros(())
        return self.projector(q), commit, indices


def _mel_tensor(mel, dtype):
    values = mel.values if isinstance(mel, MelSpectrogram) else mel
    t = torch.as_tensor(np.asarray(values), dtype=dtype)
    return t.unsqueeze(0) if t.ndim == 2 else t


def content_encode(path: ContentPath, mel: MelSpectrogram) -> ContentCodes:
    """Quantize a single utterance; with VQ disabled the dense features pass through."""
    if mel.n_mels != path.config.n_mels:
        raise ValueError(f"expected {path.config.n_mels} Mel bands, got {mel.n_mels}")
    dtype = next(path.parameters()).dtype
    with torch.no_grad():
        feats = path.encoder(_mel_tensor(mel, dtype))
        indices = path.vq.nearest(feats)
        q = path.vq.lookup(indices).to(dtype) if path.use_vq else feats
    return ContentCodes(
        indices=indices[0].numpy(),
        features=feats[0].double().numpy(),
        codebook_size=path.vq.codebook_size,
        quantized=q,
    )


def project_content(path: ContentPath, codes: ContentCodes, frame_hop=None, sample_rate=None) -> MelSpectrogram:
    """Coarse spectrogram with one frame per code."""
    q = codes.quantized
    if q is None:
        q = path.vq.lookup(torch.as_tensor(codes.indices, dtype=torch.long))[None]
    with torch.no_grad():
        out = path.projector(q.to(next(path.parameters()).dtype))[0]
    kwargs = {}
    if frame_hop is not None:
        kwargs["frame_hop"] = frame_hop
    if sample_rate is not None:
        kwargs["sample_rate"] = sample_rate
    return MelSpectrogram(out.double().numpy(), **kwargs)


def codebook_perplexity(counts) -> float:
    """exp(entropy) of the code usage distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def encoder_loss(mhat, m0):
    """Mean absolute difference between the coarse and clean Mel."""
    mhat = mhat.values if isinstance(mhat, MelSpectrogram) else mhat
    m0 = m0.values if isinstance(m0, MelSpectrogram) else m0
    if tuple(mhat.shape) != tuple(m0.shape):
        raise ValueError(f"shape mismatch {tuple(mhat.shape)} vs {tuple(m0.shape)}")
    if isinstance(mhat, torch.Tensor):
        return (mhat - m0).abs().mean()
    return float(np.mean(np.abs(np.asarray(mhat) - np.asarray(m0))))


def noise_robust_loss(mhat_vc, m0):
    """Same L1 distance as :func:`encoder_loss`, for the projection of a noisy/enhanced input."""
    return encoder_loss(mhat_vc, m0)
