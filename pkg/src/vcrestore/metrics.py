"""Objective evaluation measures: STOI, GCC-PHAT alignment, SECS, CER, SNR and log-spectral distance."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass

import numpy as np

from .signal import MelSpectrogram, Waveform, resample

log = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps

# canonical STOI constants
STOI_RATE = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE = 40.0


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    utt_id: str
    snr_condition_db: float | None
    mode: str
    stoi: float | None = None
    secs: float | None = None
    cer: float | None = None
    lsd: float | None = None
    alignment_lag: int | None = None
    l_nr: float | None = None
    ref_utt_id: str | None = None
    mos_estimate: float | None = None
    transcript: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- STOI


def _stoi_window(n):
    return np.hanning(n + 2)[1:-1]


def _third_octave_matrix(fs, nfft, num_bands, min_freq):
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    freq_low = min_freq * 2.0 ** ((2 * k - 1) / 6)
    freq_high = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        lo = int(np.argmin(np.square(f - freq_low[i])))
        hi = int(np.argmin(np.square(f - freq_high[i])))
        obm[i, lo:hi] = 1
    return obm


def _frames(x, size, hop):
    n = (len(x) - size) // hop + 1
    if n <= 0:
        return np.zeros((0, size))
    return np.lib.stride_tricks.sliding_window_view(x, size)[::hop][:n]


def _overlap_add(frames, hop):
    n, size = frames.shape
    out = np.zeros((n - 1) * hop + size) if n else np.zeros(0)
    for i in range(n):
        out[i * hop : i * hop + size] += frames[i]
    return out


def _remove_silent_frames(x, y, dyn_range, size, hop):
    w = _stoi_window(size)
    xf = _frames(x, size, hop) * w
    yf = _frames(y, size, hop) * w
    energies = 20 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = (np.max(energies) - dyn_range - energies) < 0
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _stoi_stft(x, size, hop, nfft):
    frames = _frames(x, size, hop) * _stoi_window(size)
    return np.fft.rfft(frames, n=nfft, axis=1).T  # [bins, frames]


def stoi(clean: Waveform, degraded: Waveform) -> float:
    """Short-time objective intelligibility of ``degraded`` against ``clean``.

    Both signals must already be time-aligned and of equal length.
    """
    if clean.sample_rate != degraded.sample_rate:
        raise MetricError("sample rates differ")
    if len(clean) != len(degraded):
        raise MetricError("length mismatch: align first (use gcc_phat_align)")
    x = resample(clean, STOI_RATE).samples
    y = resample(degraded, STOI_RATE).samples
    if not np.any(x):
        raise MetricError("clean signal is silent")
    hop = STOI_FRAME // 2
    x, y = _remove_silent_frames(x, y, STOI_DYN_RANGE, STOI_FRAME, hop)
    obm = _third_octave_matrix(STOI_RATE, STOI_NFFT, STOI_BANDS, STOI_MIN_FREQ)
    x_tob = np.sqrt(obm @ np.square(np.abs(_stoi_stft(x, STOI_FRAME, hop, STOI_NFFT))))
    y_tob = np.sqrt(obm @ np.square(np.abs(_stoi_stft(y, STOI_FRAME, hop, STOI_NFFT))))
    n_frames = x_tob.shape[1]
    if n_frames < STOI_SEGMENT:
        raise MetricError(
            f"only {n_frames} non-silent frames; STOI needs at least {STOI_SEGMENT}"
        )
    xs = np.stack([x_tob[:, m - STOI_SEGMENT : m] for m in range(STOI_SEGMENT, n_frames + 1)])
    ys = np.stack([y_tob[:, m - STOI_SEGMENT : m] for m in range(STOI_SEGMENT, n_frames + 1)])
    norm_const = np.linalg.norm(xs, axis=2, keepdims=True) / (
        np.linalg.norm(ys, axis=2, keepdims=True) + EPS
    )
    ys_norm = ys * norm_const
    clip_value = 10 ** (-STOI_BETA_DB / 20)
    ys_prim = np.minimum(ys_norm, xs * (1 + clip_value))
    ys_prim = ys_prim - ys_prim.mean(axis=2, keepdims=True)
    xs_c = xs - xs.mean(axis=2, keepdims=True)
    ys_prim /= np.linalg.norm(ys_prim, axis=2, keepdims=True) + EPS
    xs_c /= np.linalg.norm(xs_c, axis=2, keepdims=True) + EPS
    corr = np.sum(ys_prim * xs_c, axis=2)
    return float(np.mean(corr))


# ---------------------------------------------------------------- GCC-PHAT


def gcc_phat_lag(ref: np.ndarray, est: np.ndarray, max_lag: int) -> int:
    """Lag (in samples) to apply to ``est`` so that it lines up with ``ref``."""
    n = 1 << (len(ref) + len(est) - 1).bit_length()
    cross = np.fft.rfft(ref, n) * np.conj(np.fft.rfft(est, n))
    cc = np.fft.irfft(cross / (np.abs(cross) + EPS), n)
    max_lag = min(int(max_lag), n // 2)
    window = np.concatenate((cc[-max_lag:], cc[: max_lag + 1])) if max_lag else cc[:1]
    return int(np.argmax(window)) - max_lag


def shift(x: np.ndarray, lag: int, length: int) -> np.ndarray:
    """``out[n] = x[n - lag]``, zero-filled, trimmed/padded to ``length``."""
    out = np.zeros(length)
    src_lo = max(0, -lag)
    dst_lo = max(0, lag)
    n = min(len(x) - src_lo, length - dst_lo)
    if n > 0:
        out[dst_lo : dst_lo + n] = x[src_lo : src_lo + n]
    return out


def gcc_phat_align(ref: Waveform, est: Waveform, max_lag: int | None = None) -> tuple[int, Waveform]:
    """Estimate the lag of ``est`` against ``ref`` and return ``est`` shifted to ``ref``'s timeline."""
    if ref.sample_rate != est.sample_rate:
        raise MetricError("sample rates differ")
    if not np.any(ref.samples) or not np.any(est.samples):
        raise MetricError("cannot align an all-zero signal")
    if max_lag is None:
        max_lag = min(len(ref), len(est)) - 1
    if max_lag >= min(len(ref), len(est)):
        raise MetricError("max_lag must be smaller than both signal lengths")
    lag = gcc_phat_lag(ref.samples, est.samples, max_lag)
    return lag, Waveform(shift(est.samples, lag, len(ref)), ref.sample_rate)


# ---------------------------------------------------------------- SECS


def secs(a, b) -> float:
    """Cosine similarity of two (unit-norm) speaker embeddings."""
    a = np.asarray(getattr(a, "vector", a), dtype=np.float64)
    b = np.asarray(getattr(b, "vector", b), dtype=np.float64)
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


# ---------------------------------------------------------------- CER

_APOSTROPHES = str.maketrans({"’": "'", "‘": "'"})


def normalize_text(s: str) -> str:
    """Lowercase, drop punctuation (keeping intra-word apostrophes), collapse whitespace."""
    s = s.translate(_APOSTROPHES).lower()
    s = re.sub(r"(?<![\w])'|'(?![\w])", " ", s)
    s = re.sub(r"[^\w\s']|_", " ", s)
    return " ".join(s.split())


def edit_distance(a, b) -> int:
    """Levenshtein distance (unit-cost insert, delete, substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate over normalized text, spaces included."""
    ref = normalize_text(reference)
    hyp = normalize_text(hypothesis)
    if not ref:
        raise MetricError("reference is empty after normalization")
    return edit_distance(ref, hyp) / len(ref)


# ---------------------------------------------------------------- SNR / LSD


def measured_snr(clean: Waveform, mixture: Waveform) -> float:
    if len(clean) != len(mixture):
        raise MetricError("length mismatch")
    noise = mixture.samples - clean.samples
    p_noise = float(np.mean(np.square(noise)))
    p_clean = float(np.mean(np.square(clean.samples)))
    if p_noise == 0:
        log.warning("measured_snr: mixture equals clean (no noise)")
        return math.inf
    if p_clean == 0:
        return -math.inf
    return 10 * math.log10(p_clean / p_noise)


_NEPER_TO_DB = 10 / math.log(10)


def lsd(a: MelSpectrogram, b: MelSpectrogram) -> float:
    """Mean over frames of the RMS log-spectral difference in dB."""
    va = a.values if isinstance(a, MelSpectrogram) else a
    vb = b.values if isinstance(b, MelSpectrogram) else b
    if np.shape(va) != np.shape(vb):
        raise MetricError(f"shape mismatch {np.shape(va)} vs {np.shape(vb)}")
    diff_db = _NEPER_TO_DB * (np.asarray(va) - np.asarray(vb))
    return float(np.mean(np.sqrt(np.mean(np.square(diff_db), axis=1))))
