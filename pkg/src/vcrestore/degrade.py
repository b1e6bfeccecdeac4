"""Degraded-input synthesis: SNR-calibrated noise mixing, band limiting, clipping and packet drops."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .signal import Waveform, read_wav

log = logging.getLogger(__name__)

EVAL_SNR_GRID = (5.0, 10.0, 15.0, 20.0, 25.0)
ADAPT_SNR_GRID = (10.0, 20.0)
FILTER_ORDER = 8


class DegradationError(ValueError):
    pass


@dataclass
class DegradationSpec:
    noise_id: str | None = None
    snr_db: float | None = None
    lowpass_hz: float | None = None
    highpass_hz: float | None = None
    clip_threshold: float | None = None
    drops: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if (self.noise_id is None) != (self.snr_db is None):
            raise DegradationError("snr_db and noise_id must be given together")
        if self.clip_threshold is not None and not 0 < self.clip_threshold <= 1:
            raise DegradationError("clip_threshold must lie in (0, 1]")
        self.drops = [(float(s), float(d)) for s, d in self.drops]
        for start, dur in self.drops:
            if dur <= 0:
                raise DegradationError(f"drop duration must be positive, got {dur}")
            if start < 0:
                raise DegradationError(f"drop start must be non-negative, got {start}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drops"] = [list(x) for x in self.drops]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        keys = cls.__dataclass_fields__.keys()
        return cls(**{k: d[k] for k in keys if k in d})


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x))) if len(x) else 0.0


def fit_noise(noise: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    """Loop or trim ``noise`` to ``n`` samples, starting at ``offset``."""
    if len(noise) == 0:
        raise DegradationError("degenerate power: empty noise")
    if len(noise) >= n and offset == 0:
        return noise[:n]
    idx = (offset + np.arange(n)) % len(noise)
    return noise[idx]


def noise_gain(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    p_clean, p_noise = power(clean), power(noise)
    if p_clean == 0 or p_noise == 0:
        raise DegradationError("degenerate power")
    return float(np.sqrt(p_clean / (p_noise * 10 ** (snr_db / 10))))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Return ``clean + g * noise`` with ``g`` chosen so the mixture hits ``snr_db``.

    Power is measured over the whole clean utterance; noise shorter than the
    clean signal is looped from its start.
    """
    if clean.sample_rate != noise.sample_rate:
        raise DegradationError("clean and noise sample rates differ")
    n = fit_noise(noise.samples, len(clean))
    g = noise_gain(clean.samples, n, snr_db)
    return clean.with_samples(clean.samples + g * n)


def _check_cutoff(hz, sample_rate):
    if hz is not None and not 0 < hz < sample_rate / 2:
        raise DegradationError(f"cutoff {hz} Hz outside (0, Nyquist={sample_rate / 2})")


def bandlimit(w: Waveform, lowpass_hz: float | None = None, highpass_hz: float | None = None) -> Waveform:
    """Zero-phase Butterworth band limiting (forward-backward, effective order 16)."""
    _check_cutoff(lowpass_hz, w.sample_rate)
    _check_cutoff(highpass_hz, w.sample_rate)
    y = w.samples
    if lowpass_hz is not None:
        sos = butter(FILTER_ORDER, lowpass_hz, btype="lowpass", fs=w.sample_rate, output="sos")
        y = sosfiltfilt(sos, y)
    if highpass_hz is not None:
        sos = butter(FILTER_ORDER, highpass_hz, btype="highpass", fs=w.sample_rate, output="sos")
        y = sosfiltfilt(sos, y)
    return w.with_samples(y) if y is not w.samples else w


def clip(w: Waveform, threshold: float) -> Waveform:
    if not 0 < threshold <= 1:
        raise DegradationError("clip threshold must lie in (0, 1]")
    return w.with_samples(np.clip(w.samples, -threshold, threshold))


def drop_regions(drops, sample_rate: int, n_samples: int) -> list[tuple[int, int]]:
    """Convert (start_s, dur_s) pairs to merged, clamped [lo, hi) sample ranges."""
    spans = []
    for start, dur in drops:
        lo = int(round(start * sample_rate))
        hi = lo + int(round(dur * sample_rate))
        lo, hi = max(0, min(lo, n_samples)), max(0, min(hi, n_samples))
        if hi > lo:
            spans.append((lo, hi))
    spans.sort()
    merged = []
    for lo, hi in spans:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def packet_drop(w: Waveform, drops) -> Waveform:
    if not drops:
        return w
    y = w.samples.copy()
    for lo, hi in drop_regions(drops, w.sample_rate, len(y)):
        y[lo:hi] = 0.0
    return w.with_samples(y)


class NoiseBank:
    """Noise clips indexed by id; built from a directory of WAVs (id = filename stem)."""

    def __init__(self, clips: dict[str, Waveform] | None = None):
        self.clips = dict(clips or {})

    @classmethod
    def from_dir(cls, path) -> "NoiseBank":
        path = Path(path)
        if not path.is_dir():
            raise DegradationError(f"noise directory not found: {path}")
        return cls({p.stem: read_wav(p) for p in sorted(path.glob("*.wav"))})

    def __contains__(self, noise_id):
        return noise_id in self.clips

    def ids(self) -> list[str]:
        return sorted(self.clips)

    def get(self, noise_id: str) -> Waveform:
        try:
            return self.clips[noise_id]
        except KeyError:
            raise DegradationError(f"unknown noise_id {noise_id!r}") from None

    def segment(self, noise_id: str, n: int, seed: int) -> Waveform:
        """``n`` samples of the clip; looped from a seeded offset when the clip is shorter."""
        clip_ = self.get(noise_id)
        offset = 0
        if len(clip_) < n:
            offset = int(np.random.default_rng(seed).integers(len(clip_)))
        return clip_.with_samples(fit_noise(clip_.samples, n, offset))


def apply_spec(clean: Waveform, spec: DegradationSpec, noise_bank: NoiseBank | None = None) -> Waveform:
    """Apply ``spec`` in the fixed order bandlimit -> clip -> noise -> packet drop."""
    y = clean
    if spec.lowpass_hz is not None or spec.highpass_hz is not None:
        y = bandlimit(y, spec.lowpass_hz, spec.highpass_hz)
    if spec.clip_threshold is not None:
        y = clip(y, spec.clip_threshold)
    if spec.noise_id is not None:
        if noise_bank is None:
            raise DegradationError(f"unknown noise_id {spec.noise_id!r}: no noise bank")
        noise = noise_bank.segment(spec.noise_id, len(y), spec.seed)
        y = mix_at_snr(y, noise, spec.snr_db)
    if spec.drops:
        y = packet_drop(y, spec.drops)
    return y


def item_seed(global_seed: int, item_id: str) -> int:
    """Stable per-item seed derived from (global_seed, item_id)."""
    ss = np.random.SeedSequence([global_seed, *item_id.encode()])
    return int(ss.generate_state(1)[0])


def read_manifest(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DegradationError(f"{path}:{lineno}: bad JSON ({exc})") from None
    return rows


def write_manifest(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def manifest_spec(row: dict) -> DegradationSpec:
    return DegradationSpec.from_dict(row)
