"""Synthetic multi-speaker corpus and noise bank.

Source-filter synthesis: a harmonic voice source with per-speaker pitch,
vocal-tract scale and spectral tilt, shaped by phone-dependent formant
envelopes, plus band-shaped frication noise. The result has enough speaker
and content structure to train and test the restoration models without any
external data.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .degrade import DegradationError
from .signal import SAMPLE_RATE, Waveform, hann, istft, stft, write_wav

CTRL_HOP = 80  # 5 ms control rate

# symbol -> (formants Hz, voicing 0..1, frication band (lo, hi) Hz or None, gain)
PHONES = {
    "a": ((730, 1090, 2440), 1.0, None, 1.0),
    "i": ((270, 2290, 3010), 1.0, None, 0.8),
    "u": ((300, 870, 2240), 1.0, None, 0.8),
    "e": ((530, 1840, 2480), 1.0, None, 0.9),
    "o": ((570, 840, 2410), 1.0, None, 0.9),
    "r": ((490, 1350, 1690), 1.0, None, 0.8),
    "m": ((280, 1300, 2300), 0.9, None, 0.35),
    "n": ((280, 1700, 2600), 0.9, None, 0.35),
    "s": ((1800, 2600, 3500), 0.0, (4500, 7800), 0.35),
    "x": ((1800, 2600, 3500), 0.0, (2400, 6000), 0.35),
    "f": ((1800, 2600, 3500), 0.0, (1200, 7800), 0.15),
    "z": ((300, 1800, 2600), 0.5, (4000, 7800), 0.35),
    "t": ((1800, 2600, 3500), 0.0, (3000, 6500), 0.5),
    "k": ((1800, 2600, 3500), 0.0, (1500, 3500), 0.5),
}
VOWELS = "aiueor"
CONSONANTS = "mnsxfztk"
FORMANT_BW = (90.0, 120.0, 170.0)
NOISE_TYPES = ("white", "pink", "brown", "hum", "babble", "fan", "alarm")


@dataclass(frozen=True)
class Speaker:
    speaker_id: str
    f0: float
    formant_scale: float
    tilt_db_per_oct: float
    breathiness: float
    rate: float


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    transcript: str
    waveform: Waveform


def make_speakers(n: int, seed: int = 0) -> list[Speaker]:
    """Speakers spread over pitch and vocal-tract length."""
    rng = np.random.default_rng(seed)
    f0s = np.geomspace(95, 250, n) * rng.uniform(0.95, 1.05, n)
    scales = np.linspace(0.88, 1.18, n)[rng.permutation(n)]
    speakers = []
    for i in range(n):
        speakers.append(
            Speaker(
                speaker_id=f"spk{i:02d}",
                f0=float(f0s[i]),
                formant_scale=float(scales[i]),
                tilt_db_per_oct=float(rng.uniform(-9, -4)),
                breathiness=float(rng.uniform(0.01, 0.08)),
                rate=float(rng.uniform(0.85, 1.2)),
            )
        )
    return speakers


def random_transcript(rng, n_words=None) -> str:
    if n_words is None:
        n_words = int(rng.integers(4, 7))
    words = []
    for _ in range(n_words):
        syllables = int(rng.integers(1, 3))
        w = ""
        for _ in range(syllables):
            if rng.random() < 0.8:
                w += CONSONANTS[rng.integers(len(CONSONANTS))]
            w += VOWELS[rng.integers(len(VOWELS))]
        words.append(w)
    return " ".join(words)


def _envelope(freqs, formants, tilt_db_per_oct):
    """Resonance envelope evaluated at ``freqs`` [..., K] for per-frame ``formants`` [..., 3]."""
    env = np.zeros_like(freqs)
    for j, bw in enumerate(FORMANT_BW):
        fj = formants[..., j : j + 1]
        env += (1.0 / (j + 1)) / (1.0 + ((freqs - fj) / bw) ** 2)
    octaves = np.log2(np.maximum(freqs, 50.0) / 100.0)
    return env * 10 ** (tilt_db_per_oct * octaves / 20)


def _smooth(x, n):
    if n <= 1:
        return x
    k = hann(n + 1)[1:]
    k /= k.sum()
    pad = n
    xp = np.pad(x, [(pad, pad)] + [(0, 0)] * (x.ndim - 1), mode="edge")
    out = np.apply_along_axis(lambda c: np.convolve(c, k, mode="same"), 0, xp)
    return out[pad:-pad]


def synthesize(speaker: Speaker, transcript: str, rng, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Render ``transcript`` (phone letters, words separated by spaces) in ``speaker``'s voice."""
    segments = []  # (phone or None for pause, duration s)
    segments.append((None, rng.uniform(0.12, 0.22)))
    for wi, word in enumerate(transcript.split()):
        if wi and rng.random() < 0.3:
            segments.append((None, rng.uniform(0.04, 0.1)))
        for ph in word:
            base = 0.13 if ph in VOWELS else 0.08
            segments.append((ph, base * rng.uniform(0.75, 1.35) / speaker.rate))
    segments.append((None, rng.uniform(0.12, 0.22)))

    n_ctrl_per = [max(2, int(round(d * sample_rate / CTRL_HOP))) for _, d in segments]
    n_ctrl = sum(n_ctrl_per)
    formants = np.zeros((n_ctrl, 3))
    voicing = np.zeros(n_ctrl)
    gain = np.zeros(n_ctrl)
    fric_lo = np.zeros(n_ctrl)
    fric_hi = np.zeros(n_ctrl)
    fric_gain = np.zeros(n_ctrl)
    pos = 0
    prev_formants = np.array(PHONES["a"][0], dtype=float)
    for (ph, _), n in zip(segments, n_ctrl_per):
        sl = slice(pos, pos + n)
        if ph is None:
            formants[sl] = prev_formants
        else:
            fm, voiced, band, g = PHONES[ph]
            fm = np.array(fm, dtype=float) * speaker.formant_scale
            formants[sl] = fm
            prev_formants = fm
            voicing[sl] = voiced
            gain[sl] = g * rng.uniform(0.8, 1.2)
            if band is not None:
                lo, hi = band
                fric_lo[sl], fric_hi[sl] = lo, min(hi, 0.49 * sample_rate)
                fric_gain[sl] = g
                if ph in "tk":  # short burst then closure-like decay
                    fric_gain[sl] *= np.exp(-np.arange(n) / max(1, n / 4))
        pos += n

    formants = _smooth(formants, 6)
    voicing = _smooth(voicing, 3)
    gain = _smooth(gain, 3)
    fric_gain = _smooth(fric_gain, 2)

    n_samples = n_ctrl * CTRL_HOP
    t_ctrl = np.arange(n_ctrl) * CTRL_HOP
    t = np.arange(n_samples)

    # pitch contour: declination plus slow random wander
    decl = np.linspace(1.08, 0.92, n_ctrl)
    wander = _smooth(rng.standard_normal(n_ctrl) * 0.04, 40)
    f0_ctrl = speaker.f0 * decl * (1 + wander)
    f0 = np.interp(t, t_ctrl, f0_ctrl)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    n_harm = int(0.48 * sample_rate / f0_ctrl.min())
    k = np.arange(1, n_harm + 1)
    harm_freqs = f0_ctrl[:, None] * k[None, :]
    amps = _envelope(harm_freqs, formants, speaker.tilt_db_per_oct)
    amps[harm_freqs >= 0.48 * sample_rate] = 0.0
    amps *= (voicing * gain)[:, None]

    voiced = np.zeros(n_samples)
    for j in range(n_harm):
        a = np.interp(t, t_ctrl, amps[:, j])
        if not np.any(a):
            continue
        voiced += a * np.sin(k[j] * phase)

    # frication + aspiration noise shaped in the STFT domain
    white = Waveform(rng.standard_normal(n_samples), sample_rate)
    spec = stft(white)
    freqs = np.linspace(0, sample_rate / 2, spec.magnitudes.shape[1])
    frame_pos = np.minimum(np.arange(spec.n_frames) * spec.frame_hop, n_samples - 1)
    ctrl_idx = np.minimum(frame_pos // CTRL_HOP, n_ctrl - 1)
    lo = fric_lo[ctrl_idx][:, None]
    hi = fric_hi[ctrl_idx][:, None]
    band = 1.0 / (1 + np.exp(-(freqs[None, :] - lo) / 150)) / (1 + np.exp((freqs[None, :] - hi) / 300))
    fric_shape = band * fric_gain[ctrl_idx][:, None] * 0.25
    asp_env = _envelope(
        np.broadcast_to(freqs, (len(ctrl_idx), len(freqs))),
        formants[ctrl_idx],
        speaker.tilt_db_per_oct,
    )
    asp_shape = asp_env * (voicing * gain)[ctrl_idx][:, None] * speaker.breathiness * 0.5
    shaped = type(spec)(
        spec.magnitudes * (fric_shape + asp_shape), spec.phases, spec.frame_hop, spec.fft_size, sample_rate
    )
    unvoiced = istft(shaped, n_samples).samples

    x = voiced + unvoiced
    x *= 0.08 / (np.sqrt(np.mean(x**2)) + 1e-12)
    peak = np.max(np.abs(x))
    if peak > 0.95:
        x *= 0.95 / peak
    return Waveform(x, sample_rate)


def synthesize_noise(kind: str, duration: float, rng, sample_rate: int = SAMPLE_RATE) -> Waveform:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    white = rng.standard_normal(n)
    if kind == "white":
        x = white
    elif kind in ("pink", "brown"):
        f = np.fft.rfftfreq(n, 1 / sample_rate)
        f[0] = f[1]
        slope = 0.5 if kind == "pink" else 1.0
        x = np.fft.irfft(np.fft.rfft(white) / f**slope, n)
    elif kind == "hum":
        f0 = rng.uniform(48, 62)
        x = sum(np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 12))
        x = x + 0.1 * white
    elif kind == "babble":
        spk = make_speakers(6, seed=int(rng.integers(1 << 30)) + 9999)
        x = np.zeros(n)
        for s in spk[:4]:
            u = synthesize(s, random_transcript(rng, 8), rng, sample_rate).samples
            u = np.resize(u, n)
            x += np.roll(u, int(rng.integers(n)))
    elif kind == "fan":
        f = np.fft.rfftfreq(n, 1 / sample_rate)
        shape = np.exp(-0.5 * ((f - 600) / 400) ** 2) + 0.05
        x = np.fft.irfft(np.fft.rfft(white) * shape, n)
        x *= 1 + 0.3 * np.sin(2 * np.pi * rng.uniform(3, 8) * t)
    elif kind == "alarm":
        f1, f2 = rng.uniform(700, 1600), rng.uniform(1800, 3000)
        gate = (np.sin(2 * np.pi * rng.uniform(1.5, 4) * t) > 0).astype(float)
        x = gate * np.sin(2 * np.pi * f1 * t) + (1 - gate) * np.sin(2 * np.pi * f2 * t) + 0.05 * white
    else:
        raise DegradationError(f"unknown noise kind {kind!r}")
    x = x / (np.sqrt(np.mean(x**2)) + 1e-12) * 0.1
    return Waveform(x, sample_rate)


@dataclass
class ManifestEntry:
    utt_id: str
    speaker_id: str
    wav_path: str
    transcript: str
    split: str = "train"


class CorpusManifest:
    """Utterance list with train/adapt/eval splits, stored as JSON lines."""

    SPLITS = ("train", "adapt", "eval")

    def __init__(self, entries, root=None):
        self.entries = list(entries)
        self.root = Path(root) if root is not None else None
        ids = [e.utt_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DegradationError("duplicate utt_id in manifest")
        for e in self.entries:
            if e.split not in self.SPLITS:
                raise DegradationError(f"{e.utt_id}: unknown split {e.split!r}")

    def split(self, name) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def speakers(self) -> list[str]:
        return sorted({e.speaker_id for e in self.entries})

    def path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.wav_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def get(self, utt_id) -> ManifestEntry:
        for e in self.entries:
            if e.utt_id == utt_id:
                return e
        raise KeyError(utt_id)

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        entries = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    entries.append(ManifestEntry(**{k: d[k] for k in ManifestEntry.__dataclass_fields__ if k in d}))
        manifest = cls(entries, root=path.parent)
        missing = [str(manifest.path(e)) for e in manifest.entries if not manifest.path(e).exists()]
        if missing:
            raise DegradationError(f"unreadable wav files: {missing[:5]}{' ...' if len(missing) > 5 else ''}")
        return manifest

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")
        return path


def build_toy_corpus(
    out_dir,
    n_speakers: int = 4,
    utts_per_speaker: int = 20,
    n_eval: int = 4,
    n_adapt: int = 2,
    seed: int = 0,
    noise_duration: float = 1.5,
) -> tuple[Path, Path]:
    """Write a synthetic corpus (wavs + manifest.jsonl) and a noise directory.

    Returns (manifest_path, noise_dir).
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    entries = []
    for spk in make_speakers(n_speakers, seed):
        for i in range(utts_per_speaker):
            text = random_transcript(rng)
            w = synthesize(spk, text, rng)
            utt_id = f"{spk.speaker_id}_{i:03d}"
            rel = Path("wavs") / f"{utt_id}.wav"
            write_wav(out_dir / rel, w)
            if i >= utts_per_speaker - n_eval:
                split = "eval"
            elif i >= utts_per_speaker - n_eval - n_adapt:
                split = "adapt"
            else:
                split = "train"
            entries.append(ManifestEntry(utt_id, spk.speaker_id, str(rel), text, split))
    manifest_path = CorpusManifest(entries).save(out_dir / "manifest.jsonl")
    noise_dir = out_dir / "noise"
    for kind in NOISE_TYPES:
        write_wav(noise_dir / f"{kind}.wav", synthesize_noise(kind, noise_duration, rng))
    return manifest_path, noise_dir
