"""DSP primitives shared by every stage: STFT, log-Mel analysis, Griffin-Lim, resampling, WAV I/O."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
FFT_SIZE = 1024
HOP = 256
N_MELS = 64
FMAX = 8000.0
LOG_FLOOR_POWER = 1e-5
LOG_FLOOR = float(np.log(LOG_FLOOR_POWER))


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise SignalError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise SignalError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise SignalError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: np.ndarray  # [frames, bins]
    phases: np.ndarray
    frame_hop: int
    fft_size: int
    sample_rate: int

    def __post_init__(self):
        if self.magnitudes.shape != self.phases.shape:
            raise SignalError("magnitude/phase shape mismatch")
        if self.magnitudes.ndim != 2 or self.magnitudes.shape[1] != self.fft_size // 2 + 1:
            raise SignalError(
                f"expected [frames, {self.fft_size // 2 + 1}] bins, got {self.magnitudes.shape}"
            )
        if np.any(self.magnitudes < 0):
            raise SignalError("negative magnitudes")

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    def complex(self) -> np.ndarray:
        return self.magnitudes * np.exp(1j * self.phases)


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [frames, n_mels], natural-log power
    frame_hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise SignalError(f"mel values must be [frames, bands], got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise SignalError("mel values contain non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


def hann(n: int) -> np.ndarray:
    # periodic Hann: COLA at hop n/4 and n/2
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _frame(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    n_frames = (len(x) - size) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, size)[::hop][:n_frames]


def stft(w: Waveform, fft_size: int = FFT_SIZE, hop: int = HOP) -> Spectrogram:
    """Hann-windowed STFT with fft_size//2 reflect padding on both ends.

    The padded signal yields ``len(w) // hop + 1`` frames.
    """
    if len(w) == 0:
        raise SignalError("empty input")
    if hop <= 0 or hop > fft_size:
        raise SignalError("invalid framing")
    pad = fft_size // 2
    mode = "reflect" if len(w) > 1 else "edge"
    x = np.pad(w.samples, pad, mode=mode)
    frames = _frame(x, fft_size, hop) * hann(fft_size)
    spec = np.fft.rfft(frames, axis=1)
    return Spectrogram(np.abs(spec), np.angle(spec), hop, fft_size, w.sample_rate)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, size = frames.shape
    out = np.zeros((n_frames - 1) * hop + size)
    for i in range(n_frames):
        out[i * hop : i * hop + size] += frames[i]
    return out


def istft(s: Spectrogram, length: int | None = None) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Without ``length`` the output has ``(frames - 1) * hop`` samples, which is
    within one hop of the analysed length.
    """
    if s.n_frames == 0:
        raise SignalError("spectrogram has no frames")
    win = hann(s.fft_size)
    frames = np.fft.irfft(s.complex(), n=s.fft_size, axis=1) * win
    y = _overlap_add(frames, s.frame_hop)
    norm = _overlap_add(np.tile(win**2, (s.n_frames, 1)), s.frame_hop)
    nz = norm > 1e-10
    y[nz] /= norm[nz]
    pad = s.fft_size // 2
    if length is None:
        length = (s.n_frames - 1) * s.frame_hop
    y = y[pad : pad + length]
    if len(y) < length:
        y = np.pad(y, (0, length - len(y)))
    return Waveform(y, s.sample_rate)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(
        f >= min_log_hz,
        min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep,
        f / f_sp,
    )


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=8)
def _mel_basis(sample_rate: int, fft_size: int, n_mels: int, fmin: float, fmax: float):
    fft_freqs = np.linspace(0, sample_rate / 2, fft_size // 2 + 1)
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    # area normalization: each triangle integrates to roughly the same value
    weights *= (2.0 / (hz_pts[2 : n_mels + 2] - hz_pts[:n_mels]))[:, None]
    weights.setflags(write=False)
    return weights


def mel_basis(sample_rate=SAMPLE_RATE, fft_size=FFT_SIZE, n_mels=N_MELS, fmin=0.0, fmax=FMAX):
    """Triangular filterbank, shape [n_mels, fft_size//2 + 1]."""
    return _mel_basis(int(sample_rate), int(fft_size), int(n_mels), float(fmin), float(fmax))


def log_mel_ceiling(sample_rate=SAMPLE_RATE, fft_size=FFT_SIZE, n_mels=N_MELS) -> float:
    """Upper bound on any log-Mel value of a signal within [-1, 1]."""
    peak_power = (fft_size / 2) ** 2  # |X_k| <= sum of the Hann window
    return float(np.log(mel_basis(sample_rate, fft_size, n_mels).sum(axis=1).max() * peak_power))


def mel_center_frequencies(n_mels=N_MELS, fmin=0.0, fmax=FMAX) -> np.ndarray:
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def _check_rate(sample_rate):
    if sample_rate != SAMPLE_RATE:
        raise SignalError(
            f"expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz; resample() it first"
        )


def mel_analyze(w: Waveform, fft_size: int = FFT_SIZE, hop: int = HOP, n_mels: int = N_MELS) -> MelSpectrogram:
    _check_rate(w.sample_rate)
    spec = stft(w, fft_size, hop)
    power = spec.magnitudes**2
    mel = power @ mel_basis(w.sample_rate, fft_size, n_mels).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR_POWER)), hop, w.sample_rate)


def mel_to_power(m: MelSpectrogram, fft_size: int = FFT_SIZE) -> np.ndarray:
    """Estimate a linear power spectrogram [frames, bins] whose Mel projection matches ``m``.

    Starts from the pseudo-inverse and refines with multiplicative
    non-negative least-squares updates.
    """
    basis = mel_basis(m.sample_rate, fft_size, m.n_mels)
    target = np.maximum(np.exp(m.values) - LOG_FLOOR_POWER, 0.0)
    power = np.maximum(target @ np.linalg.pinv(basis).T, 0.0)
    power += 1e-12
    for _ in range(50):
        approx = power @ basis.T
        power *= (target @ basis) / np.maximum(approx @ basis, 1e-20)
    power[target @ basis == 0] = 0.0
    return power


def spectral_convergence(target_mag: np.ndarray, spec: np.ndarray) -> float:
    denom = np.linalg.norm(target_mag)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(target_mag - np.abs(spec)) / denom)


def griffin_lim(
    magnitudes: np.ndarray,
    iterations: int = 32,
    fft_size: int = FFT_SIZE,
    hop: int = HOP,
    sample_rate: int = SAMPLE_RATE,
    length: int | None = None,
    history: list | None = None,
    seed: int = 0,
) -> Waveform:
    """Griffin-Lim phase reconstruction.

    ``history``, if given, receives the spectral convergence after each
    iteration (measured on the re-analysed signal).
    """
    if iterations < 1:
        raise SignalError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    n_frames = magnitudes.shape[0]
    if length is None:
        length = (n_frames - 1) * hop
    phases = rng.uniform(-np.pi, np.pi, size=magnitudes.shape)
    y = None
    for _ in range(iterations):
        y = istft(Spectrogram(magnitudes, phases, hop, fft_size, sample_rate), length)
        if len(y) == 0:
            break
        rebuilt = stft(y, fft_size, hop).complex()
        rebuilt = rebuilt[:n_frames]
        if rebuilt.shape[0] < n_frames:
            rebuilt = np.pad(rebuilt, ((0, n_frames - rebuilt.shape[0]), (0, 0)))
        if history is not None:
            history.append(spectral_convergence(magnitudes, rebuilt))
        phases = np.angle(rebuilt)
    return istft(Spectrogram(magnitudes, phases, hop, fft_size, sample_rate), length)


def mel_invert(
    m: MelSpectrogram,
    iterations: int = 32,
    fft_size: int = FFT_SIZE,
    length: int | None = None,
    history: list | None = None,
) -> Waveform:
    """Vocoder stand-in: Mel pseudo-inversion followed by Griffin-Lim."""
    if iterations < 1:
        raise SignalError("iterations must be >= 1")
    mag = np.sqrt(mel_to_power(m, fft_size))
    if length is None:
        length = (m.n_frames - 1) * m.frame_hop
    return griffin_lim(
        mag, iterations, fft_size, m.frame_hop, m.sample_rate, length=length, history=history
    )


def resample(w: Waveform, target_rate: int) -> Waveform:
    if target_rate <= 0 or w.sample_rate <= 0:
        raise SignalError("sample rates must be positive")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), target_rate)
    g = np.gcd(int(target_rate), int(w.sample_rate))
    up, down = target_rate // g, w.sample_rate // g
    if len(w) == 0:
        return Waveform(np.zeros(0), target_rate)
    y = resample_poly(w.samples, up, down)
    return Waveform(y, target_rate)


def read_wav(path) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise SignalError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise SignalError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path, w: Waveform) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.round(np.clip(w.samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, pcm)
    return path
